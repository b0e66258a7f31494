import numpy as np
import pytest

from odtta.batchnorm import snapshot
from odtta.domain_pool import (DEFAULT_RESTARTS, CandidatePool, DomainFeature, FeatureExtractor, Provenance,
                               ProvenanceKind, add_progressive, build_initial_pool, cluster_agreement, extract_feature,
                               kmeans, select_candidate)
from odtta.exceptions import (ClusterError, EmptyPoolError, FingerprintMismatchError, InsufficientSamplesError,
                              InvalidModelSpecError, OdttaError, UnknownCandidateError)
from odtta.network import BnMode, Network, ModelSpec
from odtta.oracles import kmeans_exhaustive
from odtta.resources import ResourceCounters
from odtta.stream import DomainSpec

# identity plus two strong opposite offsets, well apart in feature space
TRAIN_DOMAINS = (DomainSpec(), DomainSpec('brightness', parameter=2.5, domain_id=1),
                 DomainSpec('brightness', parameter=-2.5, domain_id=2))


def domain_samples(task, domain, n, seed):
    rng = np.random.default_rng(seed)
    x, y = task.sample(n, rng)
    return domain.apply(x, rng), y


@pytest.fixture(scope='module')
def clustered(source, task, extractor):
    parts = [domain_samples(task, d, 300, 10 + n) for n, d in enumerate(TRAIN_DOMAINS)]
    x, y = np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    truth = np.repeat(np.arange(len(TRAIN_DOMAINS)), 300)
    pool, assignment = build_initial_pool(source, x, y, 3, extractor, include_source=False, seed=0)
    return pool, assignment, truth


def majority_cluster(assignment, truth, domain):
    return int(np.bincount(assignment[truth == domain]).argmax())


def pool_of(network, features, provenances=None):
    pool = CandidatePool(network.spec.fingerprint(), capacity=None)
    for n, vector in enumerate(features):
        kind = provenances[n] if provenances else ProvenanceKind.INITIAL_CLUSTER
        pool.add(snapshot(network), DomainFeature(np.asarray(vector, dtype=float)), Provenance(kind, n))
    return pool


def test_feature_of_identical_samples(source, task):
    x, _ = task.sample(1, np.random.default_rng(0))
    feature = extract_feature(source, np.repeat(x, 32, axis=0))
    expected = source.layer_input(x, source.spec.bn_index(2))[0]
    np.testing.assert_allclose(feature.vector, expected, rtol=1e-12, atol=1e-12)


def test_feature_averages_batch_means(source, task):
    x, _ = task.sample(40, np.random.default_rng(1))
    index = source.spec.bn_index(2)
    feature = extract_feature(source, x, batch_size=16)
    halves = [source.layer_input(x[a:a + 16], index).mean(axis=0) for a in (0, 16)]
    np.testing.assert_allclose(feature.vector, (halves[0] + halves[1]) / 2, rtol=1e-12, atol=1e-12)


def test_feature_needs_one_batch(source, task):
    x, _ = task.sample(8, np.random.default_rng(2))
    with pytest.raises(InsufficientSamplesError):
        extract_feature(source, x, batch_size=16)
    with pytest.raises(InvalidModelSpecError):
        extract_feature(source, np.repeat(x, 4, axis=0), layer=3)


def test_feature_extraction_is_forward_only(source, task):
    x, _ = task.sample(128, np.random.default_rng(3))
    counters = ResourceCounters()
    extract_feature(source, x, counters=counters)
    assert counters.backward_caches == 0 and counters.backward_sample_count == 0
    assert counters.peak_retained_activations <= source.forward(x)[1].retained_count()


def test_feature_separates_domains(source, task):
    shifted = DomainSpec('brightness', parameter=2.5)
    a = extract_feature(source, domain_samples(task, DomainSpec(), 256, 4)[0])
    b = extract_feature(source, domain_samples(task, DomainSpec(), 256, 5)[0])
    c = extract_feature(source, domain_samples(task, shifted, 256, 6)[0])
    assert a.distance(c) >= 3 * a.distance(b)


def test_severe_domains_are_separable(source, task):
    kinds = ('gaussian_noise', 'brightness', 'contrast', 'occlusion')
    features = {k: [extract_feature(source, domain_samples(task, DomainSpec(k, 5), 512, 20 + s)[0])
                    for s in range(2)] for k in kinds}
    within = max(f[0].distance(f[1]) for f in features.values())
    between = min(features[a][0].distance(features[b][0]) for a in kinds for b in kinds if a < b)
    assert between > within


def test_kmeans_splits_two_groups():
    points = np.array([0.0, 0.1, 0.2, 0.3, 10.0, 10.1, 10.2, 10.3])[:, None]
    labels, centers, inertia = kmeans(points, 2)
    assert len(set(labels[:4])) == 1 and len(set(labels[4:])) == 1 and labels[0] != labels[4]
    assert inertia == pytest.approx(4 * 0.0125 * 2)


def assert_lloyd_fixed_point(points, labels, centers):
    nearest = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2).argmin(axis=1)
    assert np.array_equal(nearest, labels)
    for c in range(len(centers)):
        np.testing.assert_allclose(centers[c], points[labels == c].mean(axis=0), atol=1e-6)


def test_kmeans_reaches_the_global_optimum():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(100):
        n, k = int(rng.integers(4, 9)), int(rng.integers(2, 4))
        points = rng.uniform(size=(n, 2))
        labels, centers, found = kmeans(points, k, seed=int(rng.integers(1000)), n_restarts=DEFAULT_RESTARTS)
        _, best = kmeans_exhaustive(points, k)
        if found <= best + 1e-9:
            hits += 1
        else:
            # a miss still has to be a local optimum
            assert_lloyd_fixed_point(points, labels, centers)
    assert hits >= 95


def test_kmeans_needs_enough_points():
    with pytest.raises(ClusterError):
        kmeans(np.zeros((2, 3)), 3)


def test_clusters_follow_domains(clustered):
    _, assignment, truth = clustered
    assert cluster_agreement(truth, assignment) >= 0.9


def test_selection_matches_the_query_domain(clustered, source, task, extractor):
    pool, assignment, truth = clustered
    target = majority_cluster(assignment, truth, 1)
    hits = 0
    for trial in range(50):
        feature = extractor.extract(domain_samples(task, TRAIN_DOMAINS[1], 128, 1000 + trial)[0])
        hits += select_candidate(pool, feature).provenance.index == target
    assert hits >= 45


def test_pool_building_is_deterministic(source, task, extractor):
    x, y = domain_samples(task, DomainSpec(), 400, 30)
    first, _ = build_initial_pool(source, x, y, 2, extractor, seed=1)
    second, _ = build_initial_pool(source, x, y, 2, extractor, seed=1)
    assert first.to_document() == second.to_document()
    assert [c.provenance.kind for c in first] == [ProvenanceKind.SOURCE_MODEL, ProvenanceKind.INITIAL_CLUSTER,
                                                  ProvenanceKind.INITIAL_CLUSTER]


def test_select_single_and_exact(network):
    pool = pool_of(network, [[0.0, 0.0]])
    assert select_candidate(pool, DomainFeature(np.array([5.0, 5.0]))).id == 0
    pool = pool_of(network, [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    assert select_candidate(pool, DomainFeature(np.array([1.0, 1.0]))).id == 1


def test_select_ties_go_to_the_lowest_id(network):
    pool = pool_of(network, [[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    assert select_candidate(pool, DomainFeature(np.array([0.0, 0.0]))).id == 0


def test_selection_ignores_a_common_offset(network):
    rng = np.random.default_rng(8)
    vectors, query = rng.standard_normal((6, 4)), rng.standard_normal(4)
    offset = 100.0 * rng.standard_normal(4)
    plain = select_candidate(pool_of(network, vectors), DomainFeature(query)).id
    moved = select_candidate(pool_of(network, vectors + offset), DomainFeature(query + offset)).id
    assert plain == moved


def test_empty_pool(network):
    with pytest.raises(EmptyPoolError):
        select_candidate(CandidatePool(network.spec.fingerprint()), DomainFeature(np.zeros(2)))


def test_progressive_growth(network):
    pool = CandidatePool(network.spec.fingerprint(), capacity=None)
    for n in range(5):
        add_progressive(pool, snapshot(network), DomainFeature(np.full(3, float(n))))
    assert len(pool) == 5 and pool.adaptations == 5
    assert pool.ids == sorted(set(pool.ids))
    assert select_candidate(pool, DomainFeature(np.full(3, 3.1))).id == pool.ids[3]


def test_capacity_evicts_the_oldest_progressive(network):
    pool = pool_of(network, [[0.0], [1.0]], [ProvenanceKind.SOURCE_MODEL, ProvenanceKind.INITIAL_CLUSTER])
    pool.capacity = 3
    for n in range(3):
        add_progressive(pool, snapshot(network), DomainFeature(np.array([10.0 + n])))
    kinds = [c.provenance.kind for c in pool]
    assert len(pool) == 3
    assert kinds[:2] == [ProvenanceKind.SOURCE_MODEL, ProvenanceKind.INITIAL_CLUSTER]
    assert pool.candidates[-1].provenance.index == 2


def test_pool_rejects_a_foreign_snapshot(network):
    foreign = Network.initialize(ModelSpec.mlp(16, [8, 8], 10))
    pool = CandidatePool(network.spec.fingerprint())
    with pytest.raises(FingerprintMismatchError):
        add_progressive(pool, snapshot(foreign), DomainFeature(np.zeros(2)))


def test_pool_file_round_trip(clustered, tmp_path):
    pool = clustered[0]
    path = str(tmp_path / 'pool.json')
    pool.save(path)
    assert CandidatePool.load(path).to_document() == pool.to_document()


def test_extractor_is_a_frozen_copy(source, task):
    deployed = source.copy()
    extractor = FeatureExtractor(deployed)
    x, _ = task.sample(64, np.random.default_rng(9))
    before = extractor.extract(x).vector
    deployed.bn_layers[0].running_mean += 5.0
    assert np.array_equal(extractor.extract(x).vector, before)
    assert not np.array_equal(extract_feature(deployed, x).vector, before)


def test_batch_statistics_features_cannot_see_an_offset(source, task):
    x, _ = domain_samples(task, DomainSpec(), 256, 31)
    shifted = DomainSpec('brightness', parameter=2.5).apply(x, np.random.default_rng(0))
    batch = FeatureExtractor(source, bn_mode=BnMode.BATCH)
    # per-batch normalization in the first BN layer removes a constant offset exactly
    assert batch.extract(x).distance(batch.extract(shifted)) < 1e-8
    running = FeatureExtractor(source, bn_mode=BnMode.RUNNING)
    other, _ = domain_samples(task, DomainSpec(), 256, 32)
    assert running.extract(x).distance(running.extract(shifted)) >= 3 * running.extract(x).distance(
        running.extract(other))


def test_unknown_candidate_id(clustered):
    pool = clustered[0]
    with pytest.raises(UnknownCandidateError) as info:
        pool.get(max(pool.ids) + 1)
    assert isinstance(info.value, OdttaError)
    assert pool.get(pool.ids[0]) is pool.candidates[0]
