""" Decoupled BN update: statistics merged at a large batch by forward passes, then gamma/beta tuned at a small batch
by the filtered entropy loss. """
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from loguru import logger

from .batchnorm import merge_batch_stats, restore, snapshot
from .domain_pool import (Candidate, CandidatePool, DomainFeature, FeatureExtractor, Provenance, ProvenanceKind,
                          select_candidate)
from .exceptions import ConfigError, InsufficientSamplesError, NonFiniteError
from .network import BnMode, CachePolicy, Network, as_tensor, backward_bn_affine, entropy_grad, softmax_entropy
from .resources import ResourceCounters

__all__ = ('AdaptConfig', 'AdaptReport', 'entropy_threshold', 'filtered_entropy_grad', 'stats_phase',
           'param_phase', 'adapt', 'continual_step', 'coupled_retained')


@dataclass
class AdaptConfig:
    cache_size: int = 128
    stats_batch: int = 16
    param_batch: int = 1
    lr: float = 1e-3
    stats_momentum: float = 0.9
    tau_coeff: float = 0.4
    param_passes: int = 1

    def __post_init__(self):
        if not self.cache_size >= self.stats_batch >= 2:
            raise ConfigError(f'need cache_size >= stats_batch >= 2, got {self.cache_size} and {self.stats_batch}')
        if self.param_batch < 1 or self.param_passes < 0:
            raise ConfigError('param_batch must be >= 1 and param_passes >= 0')
        if not 0.0 < self.stats_momentum < 1.0:
            raise ConfigError(f'stats_momentum must lie in (0, 1), got {self.stats_momentum}')
        if self.lr <= 0:
            raise ConfigError(f'lr must be positive, got {self.lr}')

    def tau(self, class_count: int) -> float:
        return entropy_threshold(class_count, self.tau_coeff)


@dataclass
class AdaptReport:
    selected_candidate: int = None
    stats_batches_processed: int = 0
    param_steps_taken: int = 0
    samples_filtered_out: int = 0
    samples_kept: int = 0
    param_phase_failed: bool = False
    param_steps_discarded: int = 0
    loss_trajectory: List[float] = field(default_factory=list)
    stats_peak_retained: int = 0
    param_peak_retained: int = 0
    stats_backward_caches: int = 0
    forward_samples: int = 0
    backward_samples: int = 0

    @property
    def peak_retained_activations(self) -> int:
        return max(self.stats_peak_retained, self.param_peak_retained)

    def to_dict(self) -> dict:
        return {'selected_candidate': self.selected_candidate, 'stats_batches': self.stats_batches_processed,
                'param_steps': self.param_steps_taken, 'filtered_out': self.samples_filtered_out,
                'kept': self.samples_kept, 'failed': self.param_phase_failed,
                'discarded_steps': self.param_steps_discarded,
                'final_loss': self.loss_trajectory[-1] if self.loss_trajectory else float('nan'),
                'peak_retained': self.peak_retained_activations, 'forward_samples': self.forward_samples,
                'backward_samples': self.backward_samples}


def entropy_threshold(class_count: int, tau_coeff: float = 0.4) -> float:
    return tau_coeff * math.log(class_count)


def filtered_entropy_grad(logits: np.ndarray, tau: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """ Entropy averaged over the samples with H < tau, and its gradient w.r.t. every logit row.

    @return: (loss, dL/dlogits, keep mask); the loss is NaN and the gradient zero when nothing survives.
    """
    entropy, grad = entropy_grad(logits)
    keep = entropy < tau
    kept = int(keep.sum())
    if kept == 0:
        return float('nan'), np.zeros_like(grad), keep
    return float(entropy[keep].mean()), grad * keep[:, None] / kept, keep


def _apply_bn_step(network: Network, bn_grads, lr: float):
    for layer, (g_gamma, g_beta) in zip(network.bn_layers, bn_grads):
        layer.gamma -= lr * g_gamma
        layer.beta -= lr * g_beta
        if not (np.all(np.isfinite(layer.gamma)) and np.all(np.isfinite(layer.beta))):
            raise NonFiniteError('BN affine update')


def stats_phase(network: Network, cached, cfg: AdaptConfig, counters: ResourceCounters = None) -> int:
    """ Merge the statistics of every full `stats_batch` of the cache into the running statistics, in order.

    Forward passes under BatchStats without an activation cache; no gradient is computed.

    @return: number of batches merged
    """
    x = as_tensor(cached, ndim=2, name='cached samples')
    counters = counters if counters is not None else ResourceCounters()
    batches = 0
    for start in range(0, len(x) - cfg.stats_batch + 1, cfg.stats_batch):
        _, cache = network.forward(x[start:start + cfg.stats_batch], bn_mode=BnMode.BATCH,
                                   cache_policy=CachePolicy.NONE)
        counters.record_forward(cache)
        merge_batch_stats(network, cache, cfg.stats_momentum)
        batches += 1
    return batches


def param_phase(network: Network, cached, cfg: AdaptConfig, counters: ResourceCounters = None,
                report: AdaptReport = None) -> Tuple[Network, int, int]:
    """ Filtered entropy minimization on gamma/beta over `param_batch` chunks, `param_passes` times.

    Forward passes use RunningStats; running statistics are left as they are. Chunks whose samples all have
    H >= tau are skipped. A non-finite loss or update restores the state held before this phase and marks the
    phase failed in `report`; the steps, kept samples and losses of the aborted phase are not credited to it, only
    `param_steps_discarded` records them. The backward work stays on the counters.

    @return: (network, steps applied, samples filtered out)
    """
    x = as_tensor(cached, ndim=2, name='cached samples')
    counters = counters if counters is not None else ResourceCounters()
    report = report if report is not None else AdaptReport()
    tau = cfg.tau(network.class_count)
    before = snapshot(network)
    steps, filtered, kept, losses = 0, 0, 0, []
    try:
        for _ in range(cfg.param_passes):
            for start in range(0, len(x), cfg.param_batch):
                logits, cache = network.forward(x[start:start + cfg.param_batch], bn_mode=BnMode.RUNNING,
                                                cache_policy=CachePolicy.FOR_BACKWARD)
                counters.record_forward(cache)
                report.param_peak_retained = max(report.param_peak_retained, cache.retained_count())
                loss, grad, keep = filtered_entropy_grad(logits, tau)
                filtered += int((~keep).sum())
                if not keep.any():
                    continue
                if not math.isfinite(loss):
                    raise NonFiniteError('filtered entropy loss')
                bn_grads = backward_bn_affine(network, cache, grad)
                counters.record_backward(int(keep.sum()))
                _apply_bn_step(network, bn_grads, cfg.lr)
                kept += int(keep.sum())
                losses.append(loss)
                steps += 1
    except NonFiniteError as e:
        logger.warning(f'param phase aborted ({e.message}); restoring the pre-phase BN state')
        restore(network, before)
        report.param_phase_failed = True
        report.param_steps_discarded += steps
        steps, kept, losses = 0, 0, []
    report.param_steps_taken += steps
    report.samples_kept += kept
    report.loss_trajectory.extend(losses)
    report.samples_filtered_out += filtered
    return network, steps, filtered


def adapt(network: Network,
          pool: CandidatePool,
          cached,
          cfg: AdaptConfig,
          extractor: FeatureExtractor = None,
          counters: ResourceCounters = None,
          candidate_id: Optional[int] = None) -> Tuple[Network, AdaptReport, Candidate]:
    """ Adapt to the domain of the cached samples.

    Steps, in order: estimate the domain feature of the cache, select the nearest candidate (or `candidate_id`),
    restore its BN snapshot onto a copy of `network`, merge statistics, tune gamma/beta, and package the result as
    a progressive candidate (not yet added to the pool).

    @param network: Deployed model; dense weights are shared by every candidate.
    @param cached: Tensor[N x d] with exactly `cfg.cache_size` unlabeled samples.
    @param extractor: Reference network for domain features, `network` itself when omitted.
    @param candidate_id: Start from this candidate instead of the nearest one.
    """
    x = as_tensor(cached, ndim=2, name='cached samples')
    if len(x) != cfg.cache_size:
        raise InsufficientSamplesError(len(x), cfg.cache_size, 'adapt')
    counters = counters if counters is not None else ResourceCounters()
    before = counters.to_dict()
    extractor = extractor or FeatureExtractor(network, layer=pool.feature_layer, batch_size=cfg.stats_batch)

    feature = extractor.extract(x, counters)
    start = pool.get(candidate_id) if candidate_id is not None else select_candidate(pool, feature)
    adapted = restore(network.copy(), start.snap)
    report = AdaptReport(selected_candidate=start.id)

    stats_counters = ResourceCounters()
    report.stats_batches_processed = stats_phase(adapted, x, cfg, stats_counters)
    report.stats_peak_retained = stats_counters.peak_retained_activations
    report.stats_backward_caches = stats_counters.backward_caches

    param_counters = ResourceCounters()
    param_phase(adapted, x, cfg, param_counters, report)

    for phase in (stats_counters, param_counters):
        counters.forward_sample_count += phase.forward_sample_count
        counters.backward_sample_count += phase.backward_sample_count
        counters.backward_caches += phase.backward_caches
        counters.peak_retained_activations = max(counters.peak_retained_activations, phase.peak_retained_activations)
    delta = counters.delta(before)
    report.forward_samples, report.backward_samples = delta['forward_sample_count'], delta['backward_sample_count']
    logger.info(f'adapted from candidate {start.id} ({start.provenance}): {report.stats_batches_processed} stats '
                f'batches, {report.param_steps_taken} param steps, {report.samples_filtered_out} filtered')
    candidate = Candidate(-1, snapshot(adapted), feature.stored(), Provenance(ProvenanceKind.PROGRESSIVE))
    return adapted, report, candidate


def continual_step(network: Network, batch, lr: float, stats_momentum: float, tau: float,
                   counters: ResourceCounters = None) -> Tuple[np.ndarray, np.ndarray]:
    """ One adapt-then-infer step of continual TTA on a buffered batch.

    One filtered-entropy step at batch size B with the batch's own statistics (merged into the running ones), then
    the batch is predicted. Every sample of the batch takes part in the backward pass. A single-sample batch falls
    back to RunningStats.

    @return: (logits after the update, per-sample entropy)
    """
    x = as_tensor(batch, ndim=2, name='batch')
    counters = counters if counters is not None else ResourceCounters()
    mode = BnMode.BATCH if len(x) >= 2 else BnMode.RUNNING
    logits, cache = network.forward(x, bn_mode=mode, cache_policy=CachePolicy.FOR_BACKWARD)
    counters.record_forward(cache)
    _, grad, keep = filtered_entropy_grad(logits, tau)
    if keep.any():
        before = snapshot(network)
        try:
            _apply_bn_step(network, backward_bn_affine(network, cache, grad), lr)
        except NonFiniteError as e:
            logger.warning(f'continual step skipped ({e.message})')
            restore(network, before)
    counters.record_backward(len(x))
    if mode is BnMode.BATCH:
        merge_batch_stats(network, cache, stats_momentum)
    logits, cache = network.forward(x, bn_mode=mode)
    counters.record_forward(cache)
    _, entropy = softmax_entropy(logits)
    return logits, entropy


def coupled_retained(network: Network, batch) -> int:
    """ Retained-activation count of a coupled update (statistics and parameters from one backward-cached batch). """
    _, cache = network.forward(batch, bn_mode=BnMode.BATCH, cache_policy=CachePolicy.FOR_BACKWARD)
    return cache.retained_count()
