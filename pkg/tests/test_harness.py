import filecmp
import os

import numpy as np
import pytest

from odtta.compute_metrics import evaluate
from odtta.config import DetectorConfig, ExperimentConfig, PolicyConfig, load_config
from odtta.detector import calibrate_threshold
from odtta.domain_pool import ProvenanceKind
from odtta.exceptions import FingerprintMismatchError
from odtta.harness import (DEFAULT_TARGET_DROPS, TRACE_COLUMNS, calibrate_detector, feature_layer_correlation,
                           pilot_entropies, prepare_pool, run, run_experiment, source_pool)
from odtta.network import ModelSpec, Network
from odtta.stream import DomainSpec, StreamSchedule, materialize, random_schedule
from odtta.trainer import accuracy

CONTRAST = DomainSpec('contrast', 5, domain_id=1)


def stream(task, segments, seed=0):
    return materialize(StreamSchedule(task, tuple(segments), seed))


@pytest.fixture(scope='module')
def pool(source, task, extractor):
    x, _ = task.sample(1024, np.random.default_rng(21))
    return source_pool(source, x, extractor)


@pytest.fixture(scope='module')
def clustered_pool(source, task, extractor):
    return prepare_pool(ExperimentConfig(), task, source, extractor)


@pytest.fixture(scope='module')
def threshold(source, task, pool, extractor, grids):
    domains = [d.with_grid(grids) for d in DetectorConfig().domain_specs()]
    return calibrate_detector(source, pool, task, domains, extractor=extractor)


@pytest.fixture(scope='module')
def shift_runs(source, task, pool, extractor, threshold):
    samples, labels = stream(task, [(DomainSpec(), 1500), (CONTRAST, 1500)], seed=5)
    runs = {name: run(samples, source, pool, PolicyConfig(name), threshold=threshold, extractor=extractor)
            for name in ('source', 'continual', 'ondemand')}
    return runs, labels


def test_source_policy_is_plain_inference(source, task, pool):
    samples, labels = stream(task, [(DomainSpec(), 2000)], seed=1)
    result = run(samples, source, pool, PolicyConfig('source'))
    summary = evaluate(result.trace, labels)
    assert summary['overall_accuracy'] == pytest.approx(100 * accuracy(source, samples, labels.labels))
    assert result.counters.backward_sample_count == 0
    assert result.counters.forward_sample_count == 2000
    assert list(result.trace.columns) == list(TRACE_COLUMNS)
    assert result.trace['index'].tolist() == list(range(2000))


def test_stationary_stream_never_adapts(source, task, pool, extractor, threshold):
    samples, labels = stream(task, [(DomainSpec(), 5000)], seed=2)
    result = run(samples, source, pool, PolicyConfig('ondemand'), threshold=threshold, extractor=extractor)
    assert not result.trace['trigger'].any()
    assert result.counters.backward_sample_count == 0
    assert len(result.pool) == len(pool)


def test_threshold_covers_adapted_entropy_noise(source, task, pool, extractor, threshold, grids):
    clean_only = calibrate_threshold(pilot_entropies(source, task, 2000, seed=1000), source.class_count, floor=0.0)
    assert threshold > clean_only
    # after the one adaptation to a stationary corrupted span the detector stays quiet
    occlusion = DomainSpec('occlusion', 5, domain_id=1).with_grid(grids)
    samples, labels = stream(task, [(DomainSpec(), 1000), (occlusion, 4000)], seed=3)
    result = run(samples, source, pool, PolicyConfig('ondemand'), threshold=threshold, extractor=extractor)
    summary = evaluate(result.trace, labels)
    assert summary['detected'] == 1
    assert summary['false_triggers'] <= 1


def test_ondemand_over_a_clustered_pool(source, task, clustered_pool, extractor, threshold):
    kinds = [c.provenance.kind for c in clustered_pool]
    assert kinds.count(ProvenanceKind.SOURCE_MODEL) == 1
    assert kinds.count(ProvenanceKind.INITIAL_CLUSTER) == ExperimentConfig().pool.m_clusters
    samples, labels = stream(task, [(DomainSpec(), 1500), (CONTRAST, 1500)], seed=5)
    result = run(samples, source, clustered_pool, PolicyConfig('ondemand'), threshold=threshold,
                 extractor=extractor)
    summary = evaluate(result.trace, labels)
    assert summary['detected'] == 1
    assert summary['false_triggers'] == 0
    assert len(result.reports) >= 1
    assert result.reports[0].selected_candidate in clustered_pool.ids
    assert {r.selected_candidate for r in result.reports} <= set(result.pool.ids)
    grown = [c.provenance.kind for c in result.pool]
    assert grown[:len(kinds)] == kinds
    assert grown.count(ProvenanceKind.PROGRESSIVE) == len(result.reports)
    source_run = run(samples, source, clustered_pool, PolicyConfig('source'))
    assert summary['domain_accuracy'][1] > evaluate(source_run.trace, labels)['domain_accuracy'][1] + 5


def test_run_leaves_its_inputs_untouched(source, task, pool, extractor, shift_runs):
    assert len(pool) == 1
    runs, _ = shift_runs
    assert len(runs['ondemand'].pool) > 1
    assert runs['ondemand'].network is not source


def test_ondemand_adapts_after_the_shift(shift_runs):
    runs, labels = shift_runs
    result = runs['ondemand']
    summary = evaluate(result.trace, labels)
    assert summary['detected'] == 1
    assert summary['false_triggers'] == 0
    assert len(result.reports) >= 1
    assert result.counters.adaptations_triggered >= len(result.reports)
    assert result.counters.backward_sample_count == sum(r.backward_samples for r in result.reports)
    assert result.counters.samples_cached >= 128 * len(result.reports)
    first = int(np.flatnonzero(result.trace['trigger'].to_numpy())[0])
    assert first >= 1500
    # the candidate column switches to the new progressive candidate once the cache is full
    assert result.trace['candidate'].iloc[first + 128] == result.pool.candidates[1].id
    assert summary['domain_accuracy'][1] > evaluate(runs['source'].trace, labels)['domain_accuracy'][1]


def test_continual_backpropagates_every_sample(shift_runs):
    runs, _ = shift_runs
    counters = runs['continual'].counters
    assert counters.backward_sample_count == 3000
    assert counters.forward_sample_count == 6000


def test_memory_and_energy_ordering(shift_runs):
    runs, _ = shift_runs
    ondemand, continual = runs['ondemand'].counters, runs['continual'].counters
    assert ondemand.peak_retained_activations < continual.peak_retained_activations
    assert ondemand.energy_proxy < continual.energy_proxy
    assert ondemand.backward_sample_count <= 0.15 * continual.backward_sample_count


def test_energy_gap_grows_with_the_span(source, task, pool, extractor, threshold):
    gaps = []
    for span in (1000, 2000):
        samples, _ = stream(task, [(DomainSpec(), span), (CONTRAST, span)], seed=6)
        energy = {name: run(samples, source, pool, PolicyConfig(name), threshold=threshold,
                            extractor=extractor).counters.energy_proxy for name in ('continual', 'ondemand')}
        gaps.append(energy['continual'] - energy['ondemand'])
    assert 0 < gaps[0] < gaps[1]


def test_run_rejects_a_foreign_pool(task, pool):
    foreign = Network.initialize(ModelSpec.mlp(task.input_dim, [32, 32], task.class_count))
    samples, _ = stream(task, [(DomainSpec(), 100)])
    with pytest.raises(FingerprintMismatchError):
        run(samples, foreign, pool, PolicyConfig('source'))


def small_config():
    return ExperimentConfig.from_document({
        'schedule': {'domains': [{'kind': 'identity'}, {'kind': 'contrast', 'severity': 5}], 'span': 600},
        'detector': {'calibration_samples': 1000},
    })


def test_replay_is_byte_identical(source, task, tmp_path):
    first, second = str(tmp_path / 'a'), str(tmp_path / 'b')
    run_experiment(small_config(), out_dir=first, source=(task, source))
    run_experiment(small_config(), out_dir=second, source=(task, source))
    assert filecmp.cmp(os.path.join(first, 'trace.csv'), os.path.join(second, 'trace.csv'), shallow=False)
    for name in ('summary.json', 'config.json', 'run.log'):
        assert os.path.exists(os.path.join(first, name))
    # the written config freezes the grids, so replaying it needs no calibration
    replayed = load_config(os.path.join(first, 'config.json'))
    assert set(replayed.schedule.grids) == {'contrast', 'gaussian_noise'}
    third = str(tmp_path / 'c')
    run_experiment(replayed, out_dir=third, source=(task, source))
    assert filecmp.cmp(os.path.join(first, 'trace.csv'), os.path.join(third, 'trace.csv'), shallow=False)


def test_run_experiment_summary(source, task, tmp_path):
    _, summary, labels = run_experiment(small_config(), policy='continual', source=(task, source))
    assert summary['policy'] == 'continual'
    assert summary['samples'] == len(labels) == 1200
    assert summary['backward_sample_count'] == 1200
    assert summary['domains'] == ['identity', 'contrast-5']
    assert summary['threshold'] is None
    assert summary['initial_pool_size'] == 1 + ExperimentConfig().pool.m_clusters


def test_feature_layer_correlation_table(source, task):
    domains = [DomainSpec(), DomainSpec('contrast', 5), DomainSpec('gaussian_noise', 5), DomainSpec('occlusion', 5)]
    table = feature_layer_correlation(source, task, domains, samples_per_domain=256)
    assert table['layer'].tolist() == [1, 2]
    assert (table['pairs'] == 12).all()
    assert table['pearson_r'].between(-1, 1).all()


def test_calibrated_grids_hit_the_target_drops(source, task, grids):
    x, y = task.sample(4000, np.random.default_rng(77))
    clean = accuracy(source, x, y)
    for kind, grid in grids.items():
        assert len(grid) == 5
        drops = [clean - accuracy(source, DomainSpec(kind, s, parameter=grid[s - 1], seed=s).apply(
            x, np.random.default_rng(s)), y) for s in range(1, 6)]
        assert drops == pytest.approx(list(DEFAULT_TARGET_DROPS), abs=0.04), kind
    # contrast shrinks its factor, the other kinds grow their parameter
    assert grids['contrast'] == sorted(grids['contrast'], reverse=True)
    assert grids['occlusion'] == sorted(grids['occlusion'])
    assert grids['gaussian_noise'] == sorted(grids['gaussian_noise'])


def run_schedule(source, task, pool, extractor, threshold, grids, seed):
    samples, labels = materialize(random_schedule(task, n_domains=8, span=2000, seed=seed, grids=grids))
    return {name: run(samples, source, pool, PolicyConfig(name), threshold=threshold, extractor=extractor)
            for name in ('continual', 'ondemand')}, labels


@pytest.mark.slow
def test_ondemand_matches_continual_at_a_fraction_of_the_cost(source, task, pool, extractor, threshold, grids):
    ratios, gaps = [], []
    for seed in range(5):
        runs, labels = run_schedule(source, task, pool, extractor, threshold, grids, seed)
        ondemand, continual = evaluate(runs['ondemand'].trace, labels), evaluate(runs['continual'].trace, labels)
        ratios.append(ondemand['backward_sample_count'] / continual['backward_sample_count'])
        gaps.append(ondemand['overall_accuracy'] - continual['overall_accuracy'])
        assert ondemand['peak_retained_activations'] < continual['peak_retained_activations']
    assert np.mean(ratios) <= 0.15
    assert np.mean(gaps) >= -3


@pytest.mark.slow
def test_detection_over_random_schedules(source, task, pool, extractor, threshold, grids):
    detected, false = [], []
    for seed in range(10):
        samples, labels = materialize(random_schedule(task, n_domains=8, span=2000, seed=100 + seed, grids=grids))
        plain = evaluate(run(samples, source, pool, PolicyConfig('source')).trace, labels)
        clean = plain['domain_accuracy'][0]
        assert all(clean - acc >= 15 for acc in plain['domain_accuracy'][1:]), plain['domain_accuracy']
        result = run(samples, source, pool, PolicyConfig('ondemand'), threshold=threshold, extractor=extractor)
        summary = evaluate(result.trace, labels)
        assert all(drop < 5 for drop in summary['missed_drops'])
        detected.append(summary['detected'] / summary['shifts'])
        false.append(summary['false_triggers'])
    assert np.mean(detected) >= 7 / 8
    assert np.mean(false) <= 0.5
