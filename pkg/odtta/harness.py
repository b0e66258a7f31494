""" Stream execution of the adaptation policies (source-only, continual, on-demand) and the experiment runner. """
import copy
import itertools
from dataclasses import dataclass, field
from os.path import join as pj
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.stats import pearsonr
from tqdm import tqdm

from .adapter import AdaptConfig, AdaptReport, adapt, continual_step, entropy_threshold, stats_phase
from .batchnorm import snapshot
from .compute_metrics import evaluate
from .config import ExperimentConfig, Policy, PolicyConfig
from .detector import DEFAULT_BASELINE_WINDOW, DEFAULT_MOMENTUM, ShiftDetector, calibrate_threshold
from .domain_pool import (CandidatePool, FeatureExtractor, Provenance, ProvenanceKind, add_progressive,
                          build_initial_pool, extract_feature)
from .exceptions import FingerprintMismatchError
from .network import BnMode, ModelSpec, Network, as_tensor, softmax_entropy
from .resources import ResourceCounters
from .stream import (PARAMETER_RANGES, CorruptionKind, DomainSpec, LabelChannel, StreamSchedule, TaskSpec, materialize,
                     random_schedule)
from .trainer import SourceTrainer, accuracy, fit_source_model
from .utils import save_result, save_trace, write_json

__all__ = ('DEFAULT_TARGET_DROPS', 'TRACE_COLUMNS', 'RunResult', 'run', 'source_pool', 'pilot_entropies',
           'adapted_pilot_entropies', 'calibrate_detector', 'calibrate_severity_grid', 'calibrate_severity_grids',
           'build_schedule', 'resolve_grids', 'prepare_source', 'prepare_pool', 'resolve_threshold', 'run_experiment',
           'feature_layer_correlation')

# source-model accuracy drop per severity 1..5
DEFAULT_TARGET_DROPS = (0.05, 0.12, 0.20, 0.30, 0.40)

TRACE_COLUMNS = ('index', 'prediction', 'entropy', 'ema', 'phase', 'trigger', 'candidate', 'forward_sample_count',
                 'backward_sample_count', 'peak_retained_activations', 'adaptations_triggered', 'samples_cached')


@dataclass
class RunResult:
    trace: pd.DataFrame
    counters: ResourceCounters
    pool: CandidatePool
    reports: List[AdaptReport] = field(default_factory=list)
    network: Network = None


class _TraceWriter:

    def __init__(self, counters: ResourceCounters):
        self.counters = counters
        self.columns = {name: [] for name in TRACE_COLUMNS}

    def append(self, index: int, prediction: int, entropy: float, ema: float, phase: str, trigger: bool,
               candidate: int):
        for name, value in zip(TRACE_COLUMNS[:7], (index, prediction, entropy, ema, phase, trigger, candidate)):
            self.columns[name].append(value)
        for name in TRACE_COLUMNS[7:]:
            self.columns[name].append(getattr(self.counters, name))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.columns, columns=list(TRACE_COLUMNS))


def _initial_candidate(pool: CandidatePool) -> int:
    for candidate in pool:
        if candidate.provenance.kind is ProvenanceKind.SOURCE_MODEL:
            return candidate.id
    return -1


def _run_source(network: Network, x: np.ndarray, writer: _TraceWriter, active: int):
    logits, cache = network.forward(x)
    _, entropy = softmax_entropy(logits)
    prediction = logits.argmax(axis=1)
    for t in range(len(x)):
        writer.counters.record_forward(cache, samples=1)
        writer.append(t, int(prediction[t]), float(entropy[t]), float('nan'), 'inference', False, active)


def _run_continual(network: Network, x: np.ndarray, writer: _TraceWriter, policy: PolicyConfig,
                   cfg: AdaptConfig, active: int, disable_progress: bool):
    tau = entropy_threshold(network.class_count, cfg.tau_coeff)
    size = policy.continual_batch
    for start in tqdm(range(0, len(x), size), disable=disable_progress):
        logits, entropy = continual_step(network, x[start:start + size], cfg.lr, cfg.stats_momentum, tau,
                                         writer.counters)
        for j, t in enumerate(range(start, start + len(logits))):
            writer.append(t, int(logits[j].argmax()), float(entropy[j]), float('nan'), 'continual', False, active)


def _run_ondemand(network: Network, x: np.ndarray, writer: _TraceWriter, pool: CandidatePool,
                  detector: ShiftDetector, cfg: AdaptConfig, extractor: FeatureExtractor, active: int,
                  reports: List[AdaptReport], disable_progress: bool) -> Network:
    counters = writer.counters
    cache_start, t = None, 0
    progress = tqdm(total=len(x), disable=disable_progress)
    while t < len(x):
        # running-stats inference is per sample, so the rest of the stream goes through the current model at once
        logits, cache = network.forward(x[t:])
        _, entropy = softmax_entropy(logits)
        resume = len(x)
        for j in range(len(logits)):
            i = t + j
            counters.record_forward(cache, samples=1)
            trigger = detector.update(float(entropy[j]))
            if trigger:
                counters.adaptations_triggered += 1
                cache_start = i + 1
            elif cache_start is not None and i >= cache_start:
                counters.samples_cached += 1
                if i - cache_start + 1 == cfg.cache_size:
                    network, report, candidate = adapt(network, pool, x[cache_start:i + 1], cfg, extractor,
                                                       counters)
                    add_progressive(pool, candidate.snap, candidate.feature)
                    active = pool.candidates[-1].id
                    reports.append(report)
                    detector.reset()
                    cache_start = None
                    resume = i + 1
            writer.append(i, int(logits[j].argmax()), float(entropy[j]), detector.ema, detector.phase.value,
                          trigger, active)
            if resume == i + 1:
                break
        progress.update(resume - t)
        t = resume
    progress.close()
    if cache_start is not None:
        logger.info(f'stream ended while caching ({len(x) - cache_start} of {cfg.cache_size} samples)')
    return network


def run(samples,
        network: Network,
        pool: CandidatePool,
        policy: PolicyConfig,
        adapt_cfg: AdaptConfig = None,
        threshold: float = None,
        momentum: float = 0.995,
        baseline_window: int = 100,
        extractor: FeatureExtractor = None,
        disable_progress: bool = True) -> RunResult:
    """ Push a stream through one policy and record one trace row per sample.

    Only samples enter; the label channel is not an argument. `network` and `pool` are left untouched, the result
    carries the final model and pool.

    @param samples: Tensor[T x d] input channel of the stream.
    @param threshold: Detector threshold (on-demand only).
    @param extractor: Reference network for domain features, the source `network` when omitted.
    """
    x = as_tensor(samples, ndim=2, name='stream')
    if pool.fingerprint != network.spec.fingerprint():
        raise FingerprintMismatchError(network.spec.fingerprint(), pool.fingerprint)
    adapt_cfg = adapt_cfg or AdaptConfig()
    network, pool = network.copy(), copy.deepcopy(pool)
    counters = ResourceCounters()
    writer = _TraceWriter(counters)
    reports = []
    active = _initial_candidate(pool)
    logger.info(f'run policy {policy.policy.value} over {len(x)} samples')
    if policy.policy is Policy.SOURCE:
        _run_source(network, x, writer, active)
    elif policy.policy is Policy.CONTINUAL:
        _run_continual(network, x, writer, policy, adapt_cfg, active, disable_progress)
    else:
        assert threshold is not None, 'on-demand policy needs a detector threshold'
        extractor = extractor or FeatureExtractor(network, layer=pool.feature_layer, batch_size=adapt_cfg.stats_batch)
        detector = ShiftDetector(network.class_count, threshold, momentum, baseline_window)
        network = _run_ondemand(network, x, writer, pool, detector, adapt_cfg, extractor, active, reports,
                                disable_progress)
    return RunResult(writer.frame(), counters, pool, reports, network)


def source_pool(network: Network, clean_samples, extractor: FeatureExtractor, capacity: int = None) -> CandidatePool:
    """ Pool holding only the source model, keyed by the feature of clean data. """
    pool = CandidatePool(network.spec.fingerprint(), extractor.layer, capacity)
    pool.add(snapshot(network), extractor.extract(clean_samples), Provenance(ProvenanceKind.SOURCE_MODEL))
    return pool


def pilot_entropies(network: Network, task: TaskSpec, n: int, seed: int) -> np.ndarray:
    """ Per-sample entropies of the source model on a clean stationary stream. """
    x, _ = task.sample(n, np.random.default_rng(seed))
    _, entropy = softmax_entropy(network.forward(x)[0])
    return entropy


def adapted_pilot_entropies(network: Network, pool: CandidatePool, task: TaskSpec, domain: DomainSpec, n: int,
                            seed: int, cfg: AdaptConfig = None, extractor: FeatureExtractor = None) -> np.ndarray:
    """ Per-sample entropies on a stationary stream of `domain`, seen through the model adapted to its first
    `cache_size` samples. """
    cfg = cfg or AdaptConfig()
    rng = np.random.default_rng(seed)
    x, _ = task.sample(cfg.cache_size + n, rng)
    x = domain.apply(x, rng)
    model, _, _ = adapt(network, pool, x[:cfg.cache_size], cfg, extractor)
    _, entropy = softmax_entropy(model.forward(x[cfg.cache_size:])[0])
    return entropy


def calibrate_detector(network: Network, pool: CandidatePool, task: TaskSpec, domains: Sequence[DomainSpec],
                       cfg: AdaptConfig = None, extractor: FeatureExtractor = None, samples: int = 2000,
                       seed: int = 1000, safety: float = 2.0, momentum: float = DEFAULT_MOMENTUM,
                       baseline_window: int = DEFAULT_BASELINE_WINDOW) -> float:
    """ Detector threshold covering the entropy noise of the source model on clean data and of adapted models on
    every domain in `domains` (held-out corruptions, not the ones the stream will show). """
    pilots = [pilot_entropies(network, task, samples, seed)]
    for n, domain in enumerate(domains):
        pilots.append(adapted_pilot_entropies(network, pool, task, domain, samples, seed + 1 + n, cfg, extractor))
        logger.debug(f'pilot {domain.name}: mean entropy {pilots[-1].mean():.4f}, std {pilots[-1].std():.4f}')
    return calibrate_threshold(pilots, network.class_count, momentum, baseline_window, safety=safety)


def calibrate_severity_grid(network: Network, task: TaskSpec, kind: CorruptionKind,
                            target_drops: Sequence[float] = DEFAULT_TARGET_DROPS, samples: int = 2000, seed: int = 0,
                            iterations: int = 20) -> Tuple[float, ...]:
    """ Five parameters of one corruption kind at which the source model loses `target_drops` clean accuracy.

    Each severity bisects the position between the mildest and the most severe parameter of the kind, starting
    from the previous severity, so the grid stays monotone. The corruption draws are the same at every bisection
    step. A target past the most severe parameter is clipped there.
    """
    kind = CorruptionKind(kind)
    mild, severe = PARAMETER_RANGES[kind]
    x, y = task.sample(samples, np.random.default_rng(seed))
    clean = accuracy(network, x, y)

    def parameter(position: float) -> float:
        return mild + position * (severe - mild)

    def drop(position: float) -> float:
        domain = DomainSpec(kind, parameter=parameter(position), seed=seed)
        return clean - accuracy(network, domain.apply(x, np.random.default_rng(seed + 1)), y)

    grid, low = [], 0.0
    for severity, target in enumerate(target_drops, start=1):
        high = 1.0
        if drop(high) < target:
            logger.warning(f'{kind.value}-{severity}: the most severe parameter drops accuracy by '
                           f'{100 * drop(high):.1f} < {100 * target:.1f} points')
        else:
            for _ in range(iterations):
                middle = (low + high) / 2
                if drop(middle) < target:
                    low = middle
                else:
                    high = middle
        low = high
        grid.append(round(parameter(high), 6))
    logger.info(f'severity grid of {kind.value}: {grid}')
    return tuple(grid)


def calibrate_severity_grids(network: Network, task: TaskSpec, kinds: Sequence[CorruptionKind],
                             target_drops: Sequence[float] = DEFAULT_TARGET_DROPS, samples: int = 2000,
                             seed: int = 0) -> Dict[str, List[float]]:
    """ Severity grid per kind, as a config document (kind value -> five parameters). """
    kinds = list(dict.fromkeys(CorruptionKind(k) for k in kinds if CorruptionKind(k) is not CorruptionKind.IDENTITY))
    return {k.value: list(calibrate_severity_grid(network, task, k, target_drops, samples, seed)) for k in kinds}


def build_schedule(config: ExperimentConfig, task: TaskSpec, grids: Mapping[str, Sequence[float]] = None
                   ) -> StreamSchedule:
    sc = config.schedule
    grids = grids if grids is not None else sc.grids
    if sc.domains:
        return StreamSchedule(task, tuple((d.with_grid(grids), sc.span) for d in sc.domain_specs()), sc.seed)
    return random_schedule(task, n_domains=sc.random_domains, span=sc.span, kinds=sc.kinds,
                           severities=sc.severities, seed=sc.seed, grids=grids)


def resolve_grids(config: ExperimentConfig, task: TaskSpec, network: Network) -> Dict[str, List[float]]:
    """ Grids frozen in the config, completed by calibration for every other kind the run will apply. """
    grids = {CorruptionKind(k).value: list(v) for k, v in config.schedule.grids.items()}
    if not config.schedule.calibrate_grids:
        return grids
    kinds = [d.kind for d in config.schedule.domain_specs()] if config.schedule.domains else \
        [CorruptionKind(k) for k in config.schedule.kinds]
    kinds += [d.kind for d in config.detector.domain_specs()]
    missing = [k for k in kinds if k.value not in grids]
    grids.update(calibrate_severity_grids(network, task, missing, seed=config.schedule.seed))
    return grids


def prepare_source(config: ExperimentConfig) -> Tuple[TaskSpec, Network]:
    tc, mc = config.task, config.model
    if mc.checkpoint_dir is not None:
        trainer = SourceTrainer(mc.checkpoint_dir, tc.input_dim, tc.class_count, tc.noise_scale, tc.prototype_scale,
                                tc.seed, mc.hidden, mc.eps, mc.epochs, mc.batch_size, mc.lr, mc.train_size, mc.seed,
                                mc.min_accuracy, disable_log=True)
        return trainer.task, trainer.train(disable_progress=True)
    task = TaskSpec.create(tc.input_dim, tc.class_count, tc.noise_scale, tc.prototype_scale, tc.seed)
    spec = ModelSpec.mlp(tc.input_dim, mc.hidden, tc.class_count, mc.eps)
    return task, fit_source_model(task, spec, epochs=mc.epochs, lr=mc.lr, batch_size=mc.batch_size,
                                  train_size=mc.train_size, seed=mc.seed, min_accuracy=mc.min_accuracy)


def prepare_pool(config: ExperimentConfig, task: TaskSpec, network: Network,
                 extractor: FeatureExtractor) -> CandidatePool:
    pc = config.pool
    rng = np.random.default_rng(pc.seed + 7)
    domains = pc.domain_specs() or [DomainSpec()]
    parts = [task.sample(pc.samples_per_domain, rng) for _ in domains]
    x = np.concatenate([d.apply(p[0], rng) for d, p in zip(domains, parts)])
    y = np.concatenate([p[1] for p in parts])
    if pc.m_clusters < 2:
        return source_pool(network, x, extractor, pc.capacity)
    pool, _ = build_initial_pool(network, x, y, pc.m_clusters, extractor, supervised_epochs=pc.supervised_epochs,
                                 lr=pc.lr, batch_size=config.adapt.stats_batch,
                                 stats_momentum=config.adapt.stats_momentum, capacity=pc.capacity, seed=pc.seed)
    logger.info(f'initial pool: {len(pool)} candidates from {len(domains)} training domain(s)')
    return pool


def resolve_threshold(config: ExperimentConfig, task: TaskSpec, network: Network, pool: CandidatePool,
                      extractor: FeatureExtractor = None, grids: Mapping[str, Sequence[float]] = None) -> float:
    dc = config.detector
    if dc.fixed_threshold is not None:
        return dc.fixed_threshold
    domains = [d.with_grid(grids) for d in dc.domain_specs()]
    return calibrate_detector(network, pool, task, domains, config.adapt, extractor, dc.calibration_samples,
                              config.schedule.seed + 1000, dc.calibration_safety, dc.momentum, dc.baseline_window)


def run_experiment(config: ExperimentConfig, policy: str = None, out_dir: str = None, source=None,
                   disable_progress: bool = True) -> Tuple[RunResult, dict, LabelChannel]:
    """ Generate the stream, run one policy, score it and (optionally) write `trace.csv`, `adaptations.csv`,
    `summary.json`, `config.json` and `run.log` into `out_dir`.

    The written config carries the severity grids the run used, so replaying it skips their calibration.

    @param source: (task, network) to reuse instead of fitting the source model.
    """
    config = copy.deepcopy(config)
    if policy is not None:
        config.policy = PolicyConfig(policy, config.policy.continual_batch, config.policy.seed)
    sink = logger.add(pj(out_dir, 'run.log'), level='DEBUG') if out_dir else None
    try:
        config.log()
        task, network = source if source is not None else prepare_source(config)
        config.schedule.grids = resolve_grids(config, task, network)
        schedule = build_schedule(config, task)
        samples, labels = materialize(schedule)
        extractor = FeatureExtractor(network, config.pool.feature_layer, BnMode(config.pool.bn_mode),
                                     config.adapt.stats_batch)
        pool = prepare_pool(config, task, network, extractor)
        threshold = None
        if config.policy.policy is Policy.ONDEMAND:
            threshold = resolve_threshold(config, task, network, pool, extractor, config.schedule.grids)
        result = run(samples, network, pool, config.policy, config.adapt, threshold, config.detector.momentum,
                     config.detector.baseline_window, extractor, disable_progress)
        summary = evaluate(result.trace, labels)
        summary.update(policy=config.policy.policy.value, threshold=threshold,
                       domains=[d.name for d in schedule.domains], pool_size=len(result.pool),
                       initial_pool_size=len(pool))
        logger.info(f"{summary['policy']}: accuracy {summary['overall_accuracy']:.2f}, detected {summary['detected']}"
                    f"/{summary['shifts']}, false {summary['false_triggers']}, "
                    f"backward samples {summary['backward_sample_count']}")
        if out_dir:
            save_trace(pj(out_dir, 'trace.csv'), result.trace)
            for n, report in enumerate(result.reports):
                save_result(pj(out_dir, 'adaptations.csv'), dict(adaptation=n, **report.to_dict()))
            write_json(pj(out_dir, 'summary.json'), summary)
            write_json(pj(out_dir, 'config.json'), config.to_document())
    finally:
        if sink is not None:
            logger.remove(sink)
    return result, summary, labels


def feature_layer_correlation(network: Network, task: TaskSpec, domains: Sequence[DomainSpec],
                              samples_per_domain: int = 512, cfg: AdaptConfig = None, seed: int = 0) -> pd.DataFrame:
    """ Per BN layer: Pearson r between feature similarity of two domains and the accuracy on one of them of the
    model whose statistics were aligned to the other.

    Similarity is the negated L2 distance between the domains' input means at that layer.
    """
    cfg = cfg or AdaptConfig(cache_size=samples_per_domain, param_passes=0)
    rng = np.random.default_rng(seed)
    data = []
    for domain in domains:
        x, y = task.sample(samples_per_domain, rng)
        x_test, y_test = task.sample(samples_per_domain, rng)
        data.append((domain.apply(x, rng), domain.apply(x_test, rng), y_test))
    aligned = []
    for x, _, _ in data:
        model = network.copy()
        stats_phase(model, x, cfg)
        aligned.append(model)
    pairs = [(i, j) for i, j in itertools.permutations(range(len(domains)), 2)]
    scores = [accuracy(aligned[i], data[j][1], data[j][2]) for i, j in pairs]
    rows = []
    for layer in range(1, len(network.spec.bn_indices) + 1):
        features = [extract_feature(network, x, cfg.stats_batch, layer) for x, _, _ in data]
        similarity = [-features[i].distance(features[j]) for i, j in pairs]
        r, p = pearsonr(similarity, scores)
        rows.append({'layer': layer, 'pearson_r': float(r), 'p_value': float(p), 'pairs': len(pairs)})
    return pd.DataFrame(rows)
