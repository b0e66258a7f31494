""" Candidate pool: BN-mean domain features, K-Means initial candidates, progressive candidates and selection. """
import json
import os
from dataclasses import dataclass
from enum import Enum
from multiprocessing import Pool
from typing import Iterator, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .batchnorm import BnSnapshot, snapshot
from .exceptions import (ClusterError, DimensionMismatchError, EmptyPoolError, FingerprintMismatchError,
                         InsufficientSamplesError, UnknownCandidateError)
from .network import BnMode, Network, as_tensor
from .resources import ResourceCounters
from .trainer import fit_bn_supervised

__all__ = ('POOL_VERSION', 'DEFAULT_FEATURE_LAYER', 'DEFAULT_CAPACITY', 'DEFAULT_RESTARTS', 'FeatureSource',
           'DomainFeature', 'ProvenanceKind', 'Provenance', 'Candidate', 'CandidatePool', 'FeatureExtractor',
           'extract_feature', 'sample_features', 'farthest_point_init', 'kmeans', 'cluster_agreement',
           'build_initial_pool', 'add_progressive', 'select_candidate')

POOL_VERSION = 1
DEFAULT_FEATURE_LAYER = 2
DEFAULT_CAPACITY = 64
DEFAULT_RESTARTS = 4
PARALLEL_PROCESSING = bool(int(os.getenv('PARALLEL_PROCESSING', '0')))
NUM_WORKERS = int(os.getenv('NUM_WORKERS', '4'))


class FeatureSource(str, Enum):
    CANDIDATE_STORED = 'candidate_stored'
    STREAM_ESTIMATED = 'stream_estimated'


@dataclass(frozen=True, eq=False)
class DomainFeature:
    """ Mean of the feature-layer BN input, the domain signature compared by L2 distance. """
    vector: np.ndarray
    source: FeatureSource = FeatureSource.STREAM_ESTIMATED

    def __post_init__(self):
        object.__setattr__(self, 'vector', as_tensor(self.vector, ndim=1, name='domain feature'))
        object.__setattr__(self, 'source', FeatureSource(self.source))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def stored(self):
        return DomainFeature(self.vector, FeatureSource.CANDIDATE_STORED)

    def distance(self, other: 'DomainFeature') -> float:
        if other.dim != self.dim:
            raise DimensionMismatchError(self.dim, other.dim, 'domain feature')
        return float(np.linalg.norm(self.vector - other.vector))


class ProvenanceKind(str, Enum):
    SOURCE_MODEL = 'source_model'
    INITIAL_CLUSTER = 'initial_cluster'
    PROGRESSIVE = 'progressive'


@dataclass(frozen=True)
class Provenance:
    kind: ProvenanceKind
    index: Optional[int] = None  # cluster index or adaptation index

    def __post_init__(self):
        object.__setattr__(self, 'kind', ProvenanceKind(self.kind))

    def __str__(self):
        return self.kind.value if self.index is None else f'{self.kind.value}({self.index})'


@dataclass(eq=False)
class Candidate:
    id: int
    snap: BnSnapshot
    feature: DomainFeature
    provenance: Provenance

    def to_document(self) -> dict:
        return {'id': self.id, 'provenance': {'kind': self.provenance.kind.value, 'index': self.provenance.index},
                'feature': self.feature.vector.tolist(), 'snapshot': self.snap.to_document()}

    @classmethod
    def from_document(cls, document: dict):
        return cls(document['id'], BnSnapshot.from_document(document['snapshot']),
                   DomainFeature(document['feature'], FeatureSource.CANDIDATE_STORED),
                   Provenance(**document['provenance']))


class CandidatePool:
    """ Ordered candidates sharing one model fingerprint; only Progressive candidates are ever evicted. """

    def __init__(self, fingerprint: str, feature_layer: int = DEFAULT_FEATURE_LAYER,
                 capacity: Optional[int] = DEFAULT_CAPACITY, candidates: List[Candidate] = None,
                 next_id: int = 0, adaptations: int = 0):
        assert capacity is None or capacity >= 1, f'capacity must be positive, got {capacity}'
        self.fingerprint = fingerprint
        self.feature_layer = feature_layer
        self.capacity = capacity
        self.candidates = list(candidates or [])
        self.next_id = max([next_id] + [c.id + 1 for c in self.candidates])
        self.adaptations = adaptations

    def __len__(self):
        return len(self.candidates)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.candidates)

    @property
    def ids(self) -> List[int]:
        return [c.id for c in self.candidates]

    def get(self, candidate_id: int) -> Candidate:
        for candidate in self.candidates:
            if candidate.id == candidate_id:
                return candidate
        raise UnknownCandidateError(candidate_id, self.ids)

    def add(self, snap: BnSnapshot, feature: DomainFeature, provenance: Provenance) -> Candidate:
        if snap.fingerprint != self.fingerprint:
            raise FingerprintMismatchError(self.fingerprint, snap.fingerprint)
        if self.candidates and feature.dim != self.candidates[0].feature.dim:
            raise DimensionMismatchError(self.candidates[0].feature.dim, feature.dim, 'candidate feature')
        if self.capacity is not None and len(self.candidates) >= self.capacity:
            self._evict()
        candidate = Candidate(self.next_id, snap, feature.stored(), provenance)
        self.candidates.append(candidate)
        self.next_id += 1
        return candidate

    def _evict(self):
        for n, candidate in enumerate(self.candidates):
            if candidate.provenance.kind is ProvenanceKind.PROGRESSIVE:
                logger.debug(f'pool at capacity {self.capacity}: evict candidate {candidate.id}')
                del self.candidates[n]
                return
        logger.warning(f'pool at capacity {self.capacity} holds no progressive candidate, growing past the cap')

    def distances(self, feature: DomainFeature) -> np.ndarray:
        return np.array([feature.distance(c.feature) for c in self.candidates])

    def to_document(self) -> dict:
        return {'version': POOL_VERSION, 'kind': 'candidate_pool', 'fingerprint': self.fingerprint,
                'feature_layer': self.feature_layer, 'capacity': self.capacity, 'next_id': self.next_id,
                'adaptations': self.adaptations, 'candidates': [c.to_document() for c in self.candidates]}

    @classmethod
    def from_document(cls, document: dict):
        assert document['version'] == POOL_VERSION, f"unsupported pool version {document['version']}"
        return cls(document['fingerprint'], document['feature_layer'], document['capacity'],
                   [Candidate.from_document(d) for d in document['candidates']], document['next_id'],
                   document['adaptations'])

    def save(self, path: str):
        if os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_document(), f)

    @classmethod
    def load(cls, path: str):
        with open(path, 'r') as f:
            return cls.from_document(json.load(f))


def sample_features(network: Network, samples, layer: int = DEFAULT_FEATURE_LAYER,
                    bn_mode: BnMode = BnMode.RUNNING, batch_size: int = 16) -> np.ndarray:
    """ Per-sample inputs of the `layer`-th BN layer, Tensor[N x dim].

    Under BatchStats the samples go through in batches of `batch_size`; a trailing single sample joins the
    previous batch.
    """
    x = as_tensor(samples, ndim=2, name='samples')
    index = network.spec.bn_index(layer)
    if BnMode(bn_mode) is BnMode.RUNNING:
        return network.layer_input(x, index, bn_mode=BnMode.RUNNING)
    bounds = list(range(0, len(x), batch_size)) + [len(x)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]
    return np.concatenate([network.layer_input(x[a:b], index, bn_mode=BnMode.BATCH)
                           for a, b in zip(bounds[:-1], bounds[1:])])


def extract_feature(network: Network, samples, batch_size: int = 16, layer: int = DEFAULT_FEATURE_LAYER,
                    bn_mode: BnMode = BnMode.RUNNING, counters: ResourceCounters = None) -> DomainFeature:
    """ Domain feature of a sample set: average of K = N // batch_size per-batch means of the feature-layer input.

    Leftover samples (N mod batch_size) are dropped. Forward passes only; no activation cache is kept.

    @param network: Feature extractor (source model).
    @param samples: Tensor[N x d], N >= batch_size.
    @param layer: Ordinal of the BN layer whose input mean is the feature (2 = second BN layer).
    """
    x = as_tensor(samples, ndim=2, name='samples')
    assert batch_size >= 2, f'feature batches need at least two samples, got {batch_size}'
    if len(x) < batch_size:
        raise InsufficientSamplesError(len(x), batch_size, 'extract_feature')
    index = network.spec.bn_index(layer)
    batch_means = []
    for start in range(0, len(x) - batch_size + 1, batch_size):
        activations, cache = network.forward(x[start:start + batch_size], bn_mode=bn_mode, stop_at=index)
        if counters is not None:
            counters.record_forward(cache)
        batch_means.append(activations.mean(axis=0))
    return DomainFeature(np.mean(batch_means, axis=0), FeatureSource.STREAM_ESTIMATED)


class FeatureExtractor:
    """ Fixed reference network every domain feature is measured through, so stored and query features share one
    coordinate system. """

    def __init__(self, network: Network, layer: int = DEFAULT_FEATURE_LAYER, bn_mode: BnMode = BnMode.RUNNING,
                 batch_size: int = 16):
        network.spec.bn_index(layer)
        self.network = network.copy()
        self.layer = layer
        self.bn_mode = BnMode(bn_mode)
        self.batch_size = batch_size

    @property
    def fingerprint(self) -> str:
        return self.network.spec.fingerprint()

    def extract(self, samples, counters: ResourceCounters = None) -> DomainFeature:
        return extract_feature(self.network, samples, self.batch_size, self.layer, self.bn_mode, counters)

    def sample_features(self, samples) -> np.ndarray:
        return sample_features(self.network, samples, self.layer, self.bn_mode, self.batch_size)


def farthest_point_init(points: np.ndarray, k: int, first: int) -> np.ndarray:
    """ Start at `first`, then repeatedly take the point farthest from every chosen center (lowest index on ties). """
    chosen = [first]
    nearest = np.linalg.norm(points - points[first], axis=1)
    for _ in range(1, k):
        index = int(np.argmax(nearest))
        chosen.append(index)
        nearest = np.minimum(nearest, np.linalg.norm(points - points[index], axis=1))
    return points[chosen].copy()


def kmeans(points, k: int, seed: int = 0, n_restarts: int = 1, max_iter: int = 100,
           tol: float = 1e-6) -> Tuple[np.ndarray, np.ndarray, float]:
    """ Lloyd K-Means from seeded farthest-point starts; the lowest-inertia run wins (first run on ties).

    Empty clusters are repaired by moving the center to the point farthest from its centroid.

    @return: (labels, centers, inertia)
    """
    x = as_tensor(points, name='points')
    x = x.reshape(len(x), -1)
    if k < 1 or len(x) < k:
        raise ClusterError(f'cannot split {len(x)} points into {k} clusters')
    rng = np.random.default_rng(seed)
    starts = rng.permutation(len(x))[:max(1, n_restarts)]
    best = None
    for first in starts:
        model = KMeans(n_clusters=k, init=farthest_point_init(x, k, int(first)), n_init=1, max_iter=max_iter,
                       tol=tol, algorithm='lloyd', random_state=seed).fit(x)
        if best is None or model.inertia_ < best.inertia_:
            best = model
    labels = best.labels_.astype(int)
    if len(np.unique(labels)) < k:
        raise ClusterError(f'{k - len(np.unique(labels))} cluster(s) stayed empty')
    return labels, best.cluster_centers_, float(best.inertia_)


def cluster_agreement(reference, assigned) -> float:
    """ Fraction of points whose cluster maps onto their reference group under the best one-to-one mapping. """
    reference, assigned = np.asarray(reference), np.asarray(assigned)
    groups, clusters = np.unique(reference), np.unique(assigned)
    overlap = np.array([[np.sum((reference == g) & (assigned == c)) for c in clusters] for g in groups])
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return float(overlap[rows, cols].sum() / len(reference))


def _fit_cluster(network: Network, samples: np.ndarray, labels: np.ndarray, epochs: int, lr: float,
                 batch_size: int, stats_momentum: float, seed: int) -> BnSnapshot:
    return snapshot(fit_bn_supervised(network, samples, labels, epochs=epochs, lr=lr, batch_size=batch_size,
                                      stats_momentum=stats_momentum, seed=seed))


def build_initial_pool(network: Network,
                       samples: np.ndarray,
                       labels: np.ndarray,
                       m_clusters: int,
                       extractor: FeatureExtractor = None,
                       supervised_epochs: int = 2,
                       lr: float = 0.01,
                       batch_size: int = 16,
                       stats_momentum: float = 0.9,
                       capacity: Optional[int] = DEFAULT_CAPACITY,
                       include_source: bool = True,
                       n_restarts: int = DEFAULT_RESTARTS,
                       seed: int = 0) -> Tuple[CandidatePool, np.ndarray]:
    """ Cluster a labeled training set by per-sample BN features and fit one BN-only candidate per cluster.

    @param network: Pre-trained model; its BN state is the SourceModel candidate.
    @param m_clusters: Number of K-Means subsets (>= 2).
    @param extractor: Feature extractor, the network itself when omitted.
    @return: (pool, cluster assignment of every training sample)
    """
    assert m_clusters >= 2, f'm_clusters must be at least 2, got {m_clusters}'
    extractor = extractor or FeatureExtractor(network, batch_size=batch_size)
    pool = CandidatePool(network.spec.fingerprint(), extractor.layer, capacity)
    if include_source:
        pool.add(snapshot(network), extractor.extract(samples), Provenance(ProvenanceKind.SOURCE_MODEL))

    assignment, _, inertia = kmeans(extractor.sample_features(samples), m_clusters, seed=seed, n_restarts=n_restarts)
    logger.info(f'clustered {len(samples)} samples into {m_clusters} subsets (inertia {inertia:.4f})')
    jobs = []
    for c in range(m_clusters):
        members = np.flatnonzero(assignment == c)
        if len(members) < 2 * batch_size:
            raise InsufficientSamplesError(len(members), 2 * batch_size, f'cluster {c}')
        jobs.append((network, samples[members], labels[members], supervised_epochs, lr, batch_size,
                     stats_momentum, seed + c))
    if PARALLEL_PROCESSING:
        with Pool(NUM_WORKERS) as p:
            snaps = p.starmap(_fit_cluster, jobs)
    else:
        snaps = [_fit_cluster(*job) for job in jobs]
    for c, (snap, job) in enumerate(zip(snaps, jobs)):
        candidate = pool.add(snap, extractor.extract(job[1]), Provenance(ProvenanceKind.INITIAL_CLUSTER, c))
        logger.info(f'\t * candidate {candidate.id}: cluster {c}, {len(job[1])} samples')
    return pool, assignment


def add_progressive(pool: CandidatePool, snap: BnSnapshot, feature: DomainFeature) -> CandidatePool:
    """ Append a freshly adapted snapshot keyed by the feature of the samples that drove the adaptation. """
    candidate = pool.add(snap, feature, Provenance(ProvenanceKind.PROGRESSIVE, pool.adaptations))
    pool.adaptations += 1
    logger.debug(f'progressive candidate {candidate.id} added, pool size {len(pool)}')
    return pool


def select_candidate(pool: CandidatePool, feature: DomainFeature) -> Candidate:
    """ Candidate whose stored feature is nearest in L2; the lowest id wins ties. """
    if len(pool) == 0:
        raise EmptyPoolError()
    distances = pool.distances(feature)
    best = min(range(len(pool)), key=lambda n: (distances[n], pool.candidates[n].id))
    return pool.candidates[best]
