""" Custom exceptions """


class OdttaError(Exception):
    """ Base class of every error raised by the runtime. """


class DimensionMismatchError(OdttaError):
    """ Tensor shape does not fit the layer or the model. """

    def __init__(self, expected, actual, where: str = None):
        self.message = f'dimension mismatch{f" at {where}" if where else ""}: expected {expected}, got {actual}'
        super().__init__(self.message)


class NonFiniteError(OdttaError):
    """ NaN or Inf produced or supplied. """

    def __init__(self, where: str):
        self.message = f'non-finite value encountered at {where}'
        super().__init__(self.message)


class BatchStatsError(OdttaError):
    """ Batch statistics requested for a batch of one sample. """

    def __init__(self, batch_size: int):
        self.message = f'batch statistics need at least 2 samples, got batch of {batch_size}'
        super().__init__(self.message)


class InvalidModelSpecError(OdttaError):
    """ Layer list cannot form a valid network. """

    def __init__(self, reason: str):
        self.message = f'invalid model spec: {reason}'
        super().__init__(self.message)


class MissingCacheError(OdttaError):
    """ Backward pass requested without a ForBackward activation cache. """

    def __init__(self):
        self.message = 'backward pass requires an activation cache produced with cache_policy=ForBackward'
        super().__init__(self.message)


class CacheMismatchError(OdttaError):
    """ Loss gradient does not belong to the cached batch. """

    def __init__(self, cache_shape, grad_shape):
        self.message = f'cache was built for logits of shape {cache_shape}, got gradient of shape {grad_shape}'
        super().__init__(self.message)


class MomentumRangeError(OdttaError):
    """ Momentum outside the open interval (0, 1). """

    def __init__(self, momentum: float):
        self.message = f'momentum must lie in (0, 1), got {momentum}'
        super().__init__(self.message)


class FingerprintMismatchError(OdttaError):
    """ BN snapshot or pool built for another model spec. """

    def __init__(self, expected: str, actual: str):
        self.message = f'model fingerprint mismatch: expected {expected[:12]}, got {actual[:12]}'
        super().__init__(self.message)


class InvalidEntropyError(OdttaError):
    """ Entropy outside [0, log C]. """

    def __init__(self, value: float, upper: float):
        self.message = f'entropy {value} outside [0, {upper}]'
        super().__init__(self.message)


class DetectorMisuseError(OdttaError):
    """ Detector operation called in the wrong phase. """

    def __init__(self, operation: str, phase: str):
        self.message = f'`{operation}` is not allowed in phase `{phase}`'
        super().__init__(self.message)


class InsufficientSamplesError(OdttaError):
    """ Not enough samples for the requested batching. """

    def __init__(self, available: int, required: int, where: str):
        self.message = f'{where} needs at least {required} samples, got {available}'
        super().__init__(self.message)


class EmptyPoolError(OdttaError):
    """ Candidate selection on an empty pool. """

    def __init__(self):
        self.message = 'candidate pool is empty'
        super().__init__(self.message)


class UnknownCandidateError(OdttaError, KeyError):
    """ Candidate id not present in the pool. """

    def __init__(self, candidate_id: int, ids):
        self.message = f'no candidate with id {candidate_id} in pool {list(ids)}'
        super().__init__(self.message)

    def __str__(self):
        return self.message


class ClusterError(OdttaError):
    """ Clustering produced an unusable partition. """

    def __init__(self, reason: str):
        self.message = f'clustering failed: {reason}'
        super().__init__(self.message)


class SourceAccuracyError(OdttaError):
    """ Fitted source model misses the clean accuracy bar. """

    def __init__(self, accuracy: float, required: float):
        self.message = f'source model reached {accuracy:.4f} clean accuracy, {required:.4f} required'
        super().__init__(self.message)


class TooManyPointsError(OdttaError):
    """ Exhaustive enumeration requested for a large instance. """

    def __init__(self, n_points: int, limit: int):
        self.message = f'exhaustive k-means supports at most {limit} points, got {n_points}'
        super().__init__(self.message)


class ConfigError(OdttaError):
    """ Inconsistent configuration. """

    def __init__(self, reason: str):
        self.message = f'invalid config: {reason}'
        super().__init__(self.message)


class TraceMismatchError(OdttaError):
    """ Trace and label channel do not describe the same run. """

    def __init__(self, trace_length: int, label_length: int):
        self.message = f'trace has {trace_length} records but label channel has {label_length}'
        super().__init__(self.message)
