""" Independent reference computations used to check the fast paths: finite differences and exhaustive K-Means. """
from typing import Callable, List, Tuple

import numpy as np

from .exceptions import TooManyPointsError
from .network import BnMode, Network, as_tensor

__all__ = ('FINITE_DIFF_STEP', 'EXHAUSTIVE_LIMIT', 'finite_diff_bn_affine', 'partitions', 'kmeans_exhaustive',
           'inertia')

FINITE_DIFF_STEP = 1e-5
EXHAUSTIVE_LIMIT = 10


def finite_diff_bn_affine(network: Network, batch, loss: Callable[[np.ndarray], float],
                          bn_mode: BnMode = BnMode.BATCH,
                          step: float = FINITE_DIFF_STEP) -> List[Tuple[np.ndarray, np.ndarray]]:
    """ Central-difference estimate of dL/dgamma and dL/dbeta for every BN layer.

    @param loss: Maps the logits of `batch` to a scalar.
    """
    x = as_tensor(batch, ndim=2, name='batch')
    trial = network.copy()

    def evaluate() -> float:
        logits, _ = trial.forward(x, bn_mode=bn_mode)
        return float(loss(logits))

    grads = []
    for layer in trial.bn_layers:
        pair = []
        for values in (layer.gamma, layer.beta):
            grad = np.zeros_like(values)
            for j in range(values.shape[0]):
                origin = values[j]
                values[j] = origin + step
                upper = evaluate()
                values[j] = origin - step
                lower = evaluate()
                values[j] = origin
                grad[j] = (upper - lower) / (2 * step)
            pair.append(grad)
        grads.append(tuple(pair))
    return grads


def partitions(n: int, k: int):
    """ Every split of range(n) into exactly k non-empty groups, as restricted-growth label tuples. """
    labels = [0] * n

    def grow(i: int, used: int):
        if n - i < k - used:
            return
        if i == n:
            if used == k:
                yield tuple(labels)
            return
        for c in range(min(used + 1, k)):
            labels[i] = c
            yield from grow(i + 1, max(used, c + 1))

    if n == 0:
        return
    yield from grow(0, 0)


def inertia(points: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    return float(sum(((points[labels == c] - points[labels == c].mean(axis=0)) ** 2).sum()
                     for c in np.unique(labels)))


def kmeans_exhaustive(points, k: int) -> Tuple[np.ndarray, float]:
    """ Globally optimal K-Means partition by enumerating every partition (at most 10 points).

    @return: (labels, inertia)
    """
    x = as_tensor(points, name='points')
    x = x.reshape(len(x), -1)
    if len(x) > EXHAUSTIVE_LIMIT:
        raise TooManyPointsError(len(x), EXHAUSTIVE_LIMIT)
    assert 1 <= k <= len(x), f'k must lie in 1..{len(x)}, got {k}'
    best, best_inertia = None, float('inf')
    for labels in partitions(len(x), k):
        value = inertia(x, labels)
        if value < best_inertia:
            best, best_inertia = labels, value
    return np.array(best), best_inertia
