""" Dense tensors and a small feed-forward network (Dense / ReLU / BatchNorm) with a BN-affine reverse pass. """
import hashlib
import json
import os
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from .batchnorm import DEFAULT_EPS, BnLayerState, BnStatistics
from .exceptions import (BatchStatsError, CacheMismatchError, DimensionMismatchError, InsufficientSamplesError,
                         InvalidModelSpecError, MissingCacheError, NonFiniteError)

__all__ = ('MODEL_VERSION', 'BnMode', 'CachePolicy', 'Dense', 'ReLU', 'BatchNorm', 'ModelSpec', 'DenseParams',
           'BnRecord', 'ActivationCache', 'Network', 'as_tensor', 'check_finite', 'softmax_entropy',
           'entropy_grad', 'backward_bn_affine')

MODEL_VERSION = 1


class BnMode(str, Enum):
    RUNNING = 'running'
    BATCH = 'batch'


class CachePolicy(str, Enum):
    NONE = 'none'
    FOR_BACKWARD = 'for_backward'


def check_finite(array: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(where)
    return array


def as_tensor(values, ndim: int = None, name: str = 'tensor') -> np.ndarray:
    """ Copy `values` into a float64 array, checking rank and finiteness. """
    array = np.array(values, dtype=np.float64)
    if ndim is not None and array.ndim != ndim:
        raise DimensionMismatchError(f'{ndim}-d', f'{array.ndim}-d', name)
    return check_finite(array, name)


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class BatchNorm:
    dim: int
    eps: float = DEFAULT_EPS


Layer = Union[Dense, ReLU, BatchNorm]


def _layer_to_document(layer: Layer) -> dict:
    if isinstance(layer, Dense):
        return {'type': 'dense', 'in_dim': layer.in_dim, 'out_dim': layer.out_dim}
    if isinstance(layer, BatchNorm):
        return {'type': 'batchnorm', 'dim': layer.dim, 'eps': layer.eps}
    return {'type': 'relu'}


def _layer_from_document(document: dict) -> Layer:
    if document['type'] == 'dense':
        return Dense(document['in_dim'], document['out_dim'])
    if document['type'] == 'batchnorm':
        return BatchNorm(document['dim'], document['eps'])
    if document['type'] == 'relu':
        return ReLU()
    raise InvalidModelSpecError(f"unknown layer type {document['type']}")


@dataclass(frozen=True)
class ModelSpec:
    """ Ordered layer catalog plus the number of classes C. """
    layers: Tuple[Layer, ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        self.validate()

    def validate(self):
        if len(self.layers) == 0:
            raise InvalidModelSpecError('no layers')
        if not isinstance(self.layers[0], (Dense, BatchNorm)):
            raise InvalidModelSpecError('first layer must fix the input dimension (Dense or BatchNorm)')
        dim = None
        for n, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if dim is not None and layer.in_dim != dim:
                    raise InvalidModelSpecError(f'layer {n}: Dense expects {layer.in_dim} inputs, receives {dim}')
                dim = layer.out_dim
            elif isinstance(layer, BatchNorm):
                if dim is not None and layer.dim != dim:
                    raise InvalidModelSpecError(f'layer {n}: BatchNorm({layer.dim}) receives {dim}')
                if layer.eps <= 0:
                    raise InvalidModelSpecError(f'layer {n}: eps must be positive')
                dim = layer.dim
        if len(self.bn_indices) < 2:
            raise InvalidModelSpecError('at least two BatchNorm layers are required')
        if self.class_count < 1 or dim != self.class_count:
            raise InvalidModelSpecError(f'output dimension {dim} != class_count {self.class_count}')

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], class_count: int, eps: float = DEFAULT_EPS):
        """ Dense -> BatchNorm -> ReLU per hidden width, then a Dense classifier head. """
        layers, dim = [], input_dim
        for width in hidden:
            layers += [Dense(dim, width), BatchNorm(width, eps), ReLU()]
            dim = width
        layers.append(Dense(dim, class_count))
        return cls(tuple(layers), class_count)

    @property
    def input_dim(self) -> int:
        first = self.layers[0]
        return first.in_dim if isinstance(first, Dense) else first.dim

    @property
    def bn_indices(self) -> Tuple[int, ...]:
        return tuple(n for n, layer in enumerate(self.layers) if isinstance(layer, BatchNorm))

    def bn_index(self, ordinal: int) -> int:
        """ Layer index of the `ordinal`-th BN layer (1-based). """
        if not 1 <= ordinal <= len(self.bn_indices):
            raise InvalidModelSpecError(f'model has {len(self.bn_indices)} BN layers, asked for BN #{ordinal}')
        return self.bn_indices[ordinal - 1]

    def to_document(self) -> dict:
        return {'class_count': self.class_count, 'layers': [_layer_to_document(layer) for layer in self.layers]}

    @classmethod
    def from_document(cls, document: dict):
        return cls(tuple(_layer_from_document(d) for d in document['layers']), document['class_count'])

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_document(), sort_keys=True).encode('utf-8')).hexdigest()


@dataclass(eq=False)
class DenseParams:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray

    def copy(self):
        return DenseParams(self.weight.copy(), self.bias.copy())


@dataclass(eq=False)
class BnRecord:
    """ What one BN layer saw during a forward pass. """
    stats: BnStatistics  # batch statistics of the layer input
    inv_std: np.ndarray
    x_hat: Optional[np.ndarray] = None


@dataclass(eq=False)
class ActivationCache:
    policy: CachePolicy
    bn_mode: BnMode
    batch_size: int
    logits_shape: Tuple[int, int]
    inputs: List[Optional[np.ndarray]]
    bn_records: List[BnRecord]

    def retained_count(self) -> int:
        """ Retained-activation proxy: number of scalars held after the forward pass.

        Without a backward cache only the BN statistic buffers (mean, var) survive, independent of batch size.
        """
        count = sum(2 * record.stats.dim for record in self.bn_records)
        if self.policy is CachePolicy.FOR_BACKWARD:
            count += sum(x.size for x in self.inputs)
            count += sum(record.x_hat.size + record.inv_std.size for record in self.bn_records)
        return count

    def bn_batch_stats(self, ordinal: int) -> BnStatistics:
        return self.bn_records[ordinal - 1].stats


class Network:
    """ Feed-forward network over a `ModelSpec` holding dense parameters and BN layer states. """

    def __init__(self, spec: ModelSpec, params: List[Union[DenseParams, BnLayerState, None]]):
        assert len(params) == len(spec.layers), f'{len(params)} parameter entries for {len(spec.layers)} layers'
        self.spec = spec
        self.params = params

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int = 0):
        """ He-normal dense weights, zero biases, identity BN (gamma=1, beta=0, mean=0, var=1). """
        rng = np.random.default_rng(seed)
        params = []
        for layer in spec.layers:
            if isinstance(layer, Dense):
                weight = rng.normal(0.0, np.sqrt(2.0 / layer.in_dim), size=(layer.in_dim, layer.out_dim))
                params.append(DenseParams(weight, np.zeros(layer.out_dim)))
            elif isinstance(layer, BatchNorm):
                params.append(BnLayerState.identity(layer.dim, layer.eps))
            else:
                params.append(None)
        return cls(spec, params)

    @property
    def bn_layers(self) -> List[BnLayerState]:
        return [self.params[n] for n in self.spec.bn_indices]

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def copy(self):
        return Network(self.spec, [None if p is None else p.copy() for p in self.params])

    def parameter_count(self, bn_only: bool = False) -> int:
        count = 0
        for param in self.params:
            if isinstance(param, BnLayerState):
                count += 4 * param.dim
            elif isinstance(param, DenseParams) and not bn_only:
                count += param.weight.size + param.bias.size
        return count

    def _validate_batch(self, batch, bn_mode: BnMode) -> np.ndarray:
        x = as_tensor(batch, ndim=2, name='batch')
        if x.shape[0] == 0:
            raise InsufficientSamplesError(0, 1, 'forward')
        if x.shape[1] != self.spec.input_dim:
            raise DimensionMismatchError(self.spec.input_dim, x.shape[1], 'network input')
        if bn_mode is BnMode.BATCH and x.shape[0] < 2:
            raise BatchStatsError(x.shape[0])
        return x

    def forward(self,
                batch,
                bn_mode: BnMode = BnMode.RUNNING,
                cache_policy: CachePolicy = CachePolicy.NONE,
                stop_at: int = None) -> Tuple[np.ndarray, ActivationCache]:
        """ Forward pass.

        @param batch: Tensor[B x d].
        @param bn_mode: Normalize with running statistics or with the statistics of this batch.
        @param cache_policy: Keep per-layer inputs and normalized activations for a backward pass.
        @param stop_at: Stop before this layer index and return its input instead of logits.
        @return: (logits, activation cache)
        """
        bn_mode, cache_policy = BnMode(bn_mode), CachePolicy(cache_policy)
        x = self._validate_batch(batch, bn_mode)
        keep = cache_policy is CachePolicy.FOR_BACKWARD
        inputs, records = [], []
        for n, (layer, param) in enumerate(zip(self.spec.layers, self.params)):
            if stop_at is not None and n == stop_at:
                break
            inputs.append(x if keep else None)
            if isinstance(layer, Dense):
                x = x @ param.weight + param.bias
            elif isinstance(layer, ReLU):
                x = np.maximum(x, 0.0)
            else:
                stats = BnStatistics.of_batch(x)
                used = stats if bn_mode is BnMode.BATCH else param.stats
                inv_std = 1.0 / np.sqrt(used.var + param.eps)
                x_hat = (x - used.mean) * inv_std
                records.append(BnRecord(stats, inv_std, x_hat if keep else None))
                x = param.gamma * x_hat + param.beta
            check_finite(x, f'layer {n} ({type(layer).__name__})')
        cache = ActivationCache(cache_policy, bn_mode, x.shape[0], x.shape, inputs, records)
        return x, cache

    def layer_input(self, batch, layer_index: int, bn_mode: BnMode = BnMode.RUNNING) -> np.ndarray:
        """ Activations entering layer `layer_index` (per sample). """
        activations, _ = self.forward(batch, bn_mode=bn_mode, stop_at=layer_index)
        return activations

    def predict(self, batch, bn_mode: BnMode = BnMode.RUNNING) -> np.ndarray:
        logits, _ = self.forward(batch, bn_mode=bn_mode)
        return logits.argmax(axis=1)

    def to_document(self) -> dict:
        layers = []
        for layer, param in zip(self.spec.layers, self.params):
            document = _layer_to_document(layer)
            if isinstance(param, DenseParams):
                document.update(weight=param.weight.reshape(-1).tolist(), bias=param.bias.tolist())
            elif isinstance(param, BnLayerState):
                document.update(param.to_document())
            layers.append(document)
        return {'version': MODEL_VERSION, 'kind': 'network', 'class_count': self.spec.class_count, 'layers': layers}

    @classmethod
    def from_document(cls, document: dict):
        assert document['version'] == MODEL_VERSION, f"unsupported model version {document['version']}"
        spec = ModelSpec.from_document(document)
        params = []
        for layer, entry in zip(spec.layers, document['layers']):
            if isinstance(layer, Dense):
                weight = as_tensor(entry['weight'], name='dense weight').reshape(layer.in_dim, layer.out_dim)
                params.append(DenseParams(weight, as_tensor(entry['bias'], name='dense bias')))
            elif isinstance(layer, BatchNorm):
                params.append(BnLayerState.from_document(entry))
            else:
                params.append(None)
        return cls(spec, params)

    def save(self, path: str):
        if os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_document(), f)

    @classmethod
    def load(cls, path: str):
        with open(path, 'r') as f:
            return cls.from_document(json.load(f))


def softmax_entropy(logits) -> Tuple[np.ndarray, np.ndarray]:
    """ Row-wise softmax probabilities and prediction entropy H(p) = -sum p log p, stable for large logits. """
    z = as_tensor(logits, ndim=2, name='logits')
    log_probs = log_softmax(z, axis=1)
    probs = np.exp(log_probs)
    entropy = -(probs * log_probs).sum(axis=1)
    return probs, np.clip(entropy, 0.0, np.log(z.shape[1]))


def entropy_grad(logits) -> Tuple[np.ndarray, np.ndarray]:
    """ Per-sample entropy and its gradient w.r.t. that sample's logits: dH/dz = -p * (log p + H). """
    z = as_tensor(logits, ndim=2, name='logits')
    log_probs = log_softmax(z, axis=1)
    probs = np.exp(log_probs)
    entropy = -(probs * log_probs).sum(axis=1)
    return entropy, -probs * (log_probs + entropy[:, None])


def _reverse(network: Network, cache: ActivationCache, loss_grad_logits,
             with_dense: bool) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], Dict[int, Tuple[np.ndarray, np.ndarray]]]:
    if cache is None or cache.policy is not CachePolicy.FOR_BACKWARD:
        raise MissingCacheError()
    g = np.array(loss_grad_logits, dtype=np.float64)
    if g.shape != tuple(cache.logits_shape) or len(cache.inputs) != len(network.spec.layers):
        raise CacheMismatchError(tuple(cache.logits_shape), g.shape)
    check_finite(g, 'loss gradient')
    lowest = 0 if with_dense else network.spec.bn_indices[0]
    bn_grads: List = [None] * len(cache.bn_records)
    dense_grads = {}
    ordinal = len(cache.bn_records)
    for n in range(len(network.spec.layers) - 1, lowest - 1, -1):
        layer, param, x_in = network.spec.layers[n], network.params[n], cache.inputs[n]
        if isinstance(layer, Dense):
            if with_dense:
                dense_grads[n] = (x_in.T @ g, g.sum(axis=0))
            g = g @ param.weight.T
        elif isinstance(layer, ReLU):
            g = g * (x_in > 0.0)
        else:
            ordinal -= 1
            record = cache.bn_records[ordinal]
            bn_grads[ordinal] = ((g * record.x_hat).sum(axis=0), g.sum(axis=0))
            g_hat = g * param.gamma
            if cache.bn_mode is BnMode.BATCH:
                size = g.shape[0]
                g = record.inv_std / size * (size * g_hat - g_hat.sum(axis=0)
                                             - record.x_hat * (g_hat * record.x_hat).sum(axis=0))
            else:
                g = g_hat * record.inv_std
        check_finite(g, f'backward layer {n}')
    return bn_grads, dense_grads


def backward_bn_affine(network: Network, cache: ActivationCache,
                       loss_grad_logits) -> List[Tuple[np.ndarray, np.ndarray]]:
    """ Gradients of the loss w.r.t. every BN layer's (gamma, beta); dense parameters stay frozen.

    @param network: Network the cache was produced with.
    @param cache: ForBackward cache of the same batch and BN mode used for the loss.
    @param loss_grad_logits: dL/dlogits, Tensor[B x C].
    @return: One (dL/dgamma, dL/dbeta) pair per BN layer, in layer order.
    """
    bn_grads, _ = _reverse(network, cache, loss_grad_logits, with_dense=False)
    return bn_grads
