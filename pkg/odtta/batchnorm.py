""" BatchNorm layer state: statistics, affine parameters, the statistics merge and whole-model snapshots. """
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Tuple

import numpy as np

from .exceptions import DimensionMismatchError, FingerprintMismatchError, MomentumRangeError, NonFiniteError

if TYPE_CHECKING:
    from .network import Network

__all__ = ('DEFAULT_EPS', 'SNAPSHOT_VERSION', 'BnStatistics', 'BnLayerState', 'BnSnapshot', 'merge_stats',
           'snapshot', 'restore', 'merge_batch_stats')

DEFAULT_EPS = 1e-5
SNAPSHOT_VERSION = 1


def _vector(values, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(name)
    return array


@dataclass(frozen=True, eq=False)
class BnStatistics:
    """ Per-channel mean and (biased) variance, either running or of one batch. """
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'mean', _vector(self.mean, 'statistics mean'))
        object.__setattr__(self, 'var', _vector(self.var, 'statistics variance'))
        if self.mean.shape != self.var.shape:
            raise DimensionMismatchError(self.mean.shape, self.var.shape, 'BN statistics')

    @classmethod
    def of_batch(cls, activations: np.ndarray):
        return cls(activations.mean(axis=0), activations.var(axis=0))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(eq=False)
class BnLayerState:
    """ One BN layer: running statistics (mean/var) and learnable scale/shift (gamma/beta). """
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.running_mean = _vector(self.running_mean, 'running_mean')
        self.running_var = _vector(self.running_var, 'running_var')
        self.gamma = _vector(self.gamma, 'gamma')
        self.beta = _vector(self.beta, 'beta')
        self.eps = float(self.eps)
        dim = self.running_mean.shape[0]
        for name in ('running_var', 'gamma', 'beta'):
            if getattr(self, name).shape[0] != dim:
                raise DimensionMismatchError(dim, getattr(self, name).shape[0], f'BN {name}')
        if np.any(self.running_var < 0):
            raise ValueError('running_var must be elementwise non-negative')
        assert self.eps > 0, f'eps must be positive, got {self.eps}'

    @classmethod
    def identity(cls, dim: int, eps: float = DEFAULT_EPS):
        return cls(np.zeros(dim), np.ones(dim), np.ones(dim), np.zeros(dim), eps)

    @property
    def dim(self) -> int:
        return self.running_mean.shape[0]

    @property
    def stats(self) -> BnStatistics:
        return BnStatistics(self.running_mean, self.running_var)

    def with_stats(self, stats: BnStatistics):
        if stats.dim != self.dim:
            raise DimensionMismatchError(self.dim, stats.dim, 'BN statistics')
        return BnLayerState(stats.mean, stats.var, self.gamma, self.beta, self.eps)

    def copy(self):
        return BnLayerState(self.running_mean.copy(), self.running_var.copy(), self.gamma.copy(), self.beta.copy(),
                            self.eps)

    def to_document(self) -> dict:
        return {'dim': self.dim, 'eps': self.eps, 'running_mean': self.running_mean.tolist(),
                'running_var': self.running_var.tolist(), 'gamma': self.gamma.tolist(), 'beta': self.beta.tolist()}

    @classmethod
    def from_document(cls, document: dict):
        state = cls(document['running_mean'], document['running_var'], document['gamma'], document['beta'],
                    document['eps'])
        if state.dim != document['dim']:
            raise DimensionMismatchError(document['dim'], state.dim, 'BN document')
        return state


def merge_stats(prev: BnStatistics, batch_stats: BnStatistics, momentum: float) -> BnStatistics:
    """ Integrate the statistics of the current batch into the running ones.

    S_k = m * S_{k-1} + (1 - m) * B_k, history weighted by the momentum, evaluated as S_{k-1} + (1 - m) * (B_k - S_{k-1})
    so that B_k == S_{k-1} is an exact fixed point. Variances are merged as raw variances.

    @param prev: Statistics integrated up to the previous batch (S_{k-1}).
    @param batch_stats: Statistics of the current batch (B_k).
    @param momentum: History weight m in (0, 1).
    @return: Merged statistics S_k.
    """
    if not 0.0 < momentum < 1.0:
        raise MomentumRangeError(momentum)
    if prev.dim != batch_stats.dim:
        raise DimensionMismatchError(prev.dim, batch_stats.dim, 'merge_stats')
    if np.any(batch_stats.var < 0):
        raise ValueError('batch variance must be non-negative')
    mean = prev.mean + (1.0 - momentum) * (batch_stats.mean - prev.mean)
    var = prev.var + (1.0 - momentum) * (batch_stats.var - prev.var)
    return BnStatistics(mean, np.maximum(var, 0.0))


@dataclass(frozen=True, eq=False)
class BnSnapshot:
    """ BN layers of one model (in layer order) tagged with the model fingerprint. """
    layers: Tuple[BnLayerState, ...]
    fingerprint: str

    def to_document(self) -> dict:
        return {'version': SNAPSHOT_VERSION, 'kind': 'bn_snapshot', 'fingerprint': self.fingerprint,
                'layers': [layer.to_document() for layer in self.layers]}

    @classmethod
    def from_document(cls, document: dict):
        assert document['version'] == SNAPSHOT_VERSION, f"unsupported snapshot version {document['version']}"
        return cls(tuple(BnLayerState.from_document(d) for d in document['layers']), document['fingerprint'])

    def dumps(self) -> str:
        return json.dumps(self.to_document())

    @classmethod
    def loads(cls, text: str):
        return cls.from_document(json.loads(text))

    @property
    def nbytes(self) -> int:
        """ Size of the serialized document, the storage cost of one candidate. """
        return len(self.dumps().encode('utf-8'))

    def layer_stats(self) -> List[BnStatistics]:
        return [layer.stats for layer in self.layers]


def snapshot(network: 'Network') -> BnSnapshot:
    """ Copy every BN layer state of the network. """
    return BnSnapshot(tuple(layer.copy() for layer in network.bn_layers), network.spec.fingerprint())


def restore(network: 'Network', snap: BnSnapshot) -> 'Network':
    """ Overwrite the network's BN layers with a snapshot; dense parameters are untouched.

    The network is left unmodified when the fingerprint does not match.
    """
    fingerprint = network.spec.fingerprint()
    if snap.fingerprint != fingerprint:
        raise FingerprintMismatchError(fingerprint, snap.fingerprint)
    for index, layer in zip(network.spec.bn_indices, snap.layers):
        network.params[index] = layer.copy()
    return network


def merge_batch_stats(network: 'Network', cache, momentum: float) -> 'Network':
    """ Merge the batch statistics recorded in a BatchStats forward cache into every BN layer, in place. """
    for ordinal, index in enumerate(network.spec.bn_indices, start=1):
        layer = network.params[index]
        network.params[index] = layer.with_stats(merge_stats(layer.stats, cache.bn_batch_stats(ordinal), momentum))
    return network
