""" EMA-entropy shift detection: baseline capture after each adaptation and one-sided threshold test. """
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .exceptions import DetectorMisuseError, InvalidEntropyError, MomentumRangeError

__all__ = ('DEFAULT_MOMENTUM', 'DEFAULT_BASELINE_WINDOW', 'THRESHOLD_PRESETS', 'Phase', 'Decision', 'DetectorState',
           'ingest', 'reset_after_adaptation', 'ShiftDetector', 'detection_latency', 'calibrate_threshold',
           'threshold_sweep')

DEFAULT_MOMENTUM = 0.995
DEFAULT_BASELINE_WINDOW = 100
ENTROPY_TOLERANCE = 1e-9
# thresholds used on the reference benchmarks, roughly a 5% accuracy drop each
THRESHOLD_PRESETS = {
    'cifar10-c': 0.06,
    'imagenet-c': 0.3,
    'core50': 0.1,
    'shift': 0.1,
}


class Phase(str, Enum):
    COLLECTING = 'collecting_baseline'
    MONITORING = 'monitoring'
    SUPPRESSED = 'suppressed'


class Decision(str, Enum):
    NO_SHIFT = 'no_shift'
    SHIFT_DETECTED = 'shift_detected'


@dataclass(frozen=True)
class DetectorState:
    """ EMA-entropy tracker. Only entropies enter; labels never do. """
    class_count: int
    threshold: float = THRESHOLD_PRESETS['cifar10-c']
    momentum: float = DEFAULT_MOMENTUM
    baseline_window: int = DEFAULT_BASELINE_WINDOW
    ema_sample: float = 0.0
    ema_base: float = None
    phase: Phase = Phase.COLLECTING
    window: Tuple[float, ...] = field(default=(), repr=False)
    samples_seen: int = 0

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise MomentumRangeError(self.momentum)
        assert self.threshold > 0, f'threshold must be positive, got {self.threshold}'
        assert self.baseline_window > 0, f'baseline_window must be positive, got {self.baseline_window}'
        assert self.class_count >= 2, f'class_count must be at least 2, got {self.class_count}'

    @property
    def max_entropy(self) -> float:
        return math.log(self.class_count)

    @property
    def collected(self) -> int:
        return len(self.window)

    @property
    def excursion(self) -> float:
        return self.ema_sample - self.ema_base if self.ema_base is not None else 0.0


def ingest(state: DetectorState, sample_entropy: float) -> Tuple[DetectorState, Decision]:
    """ Feed one per-sample entropy.

    CollectingBaseline: accumulate the window; once full, ema_base is its arithmetic mean and ema_sample is
    seeded with it. Monitoring: E_t = m * E_{t-1} + (1 - m) * x_t and a shift is flagged when E_t - ema_base
    exceeds the threshold, which suppresses detection until `reset_after_adaptation`. Suppressed: no-op.
    """
    x = float(sample_entropy)
    if not (0.0 <= x <= state.max_entropy + ENTROPY_TOLERANCE):
        raise InvalidEntropyError(x, state.max_entropy)
    seen = state.samples_seen + 1
    if state.phase is Phase.SUPPRESSED:
        return replace(state, samples_seen=seen), Decision.NO_SHIFT
    if state.phase is Phase.COLLECTING:
        window = state.window + (x,)
        if len(window) < state.baseline_window:
            return replace(state, window=window, samples_seen=seen), Decision.NO_SHIFT
        base = math.fsum(window) / len(window)
        return replace(state, window=(), ema_base=base, ema_sample=base, phase=Phase.MONITORING,
                       samples_seen=seen), Decision.NO_SHIFT
    ema = state.momentum * state.ema_sample + (1.0 - state.momentum) * x
    if ema - state.ema_base > state.threshold:
        return replace(state, ema_sample=ema, phase=Phase.SUPPRESSED, samples_seen=seen), Decision.SHIFT_DETECTED
    return replace(state, ema_sample=ema, samples_seen=seen), Decision.NO_SHIFT


def reset_after_adaptation(state: DetectorState) -> DetectorState:
    """ Start collecting a new baseline from the next post-adaptation samples. """
    if state.phase is not Phase.SUPPRESSED:
        raise DetectorMisuseError('reset_after_adaptation', state.phase.value)
    return replace(state, phase=Phase.COLLECTING, ema_base=None, window=())


class ShiftDetector:
    """ Mutable wrapper owned by the stream-processing thread. """

    def __init__(self, class_count: int, threshold: float, momentum: float = DEFAULT_MOMENTUM,
                 baseline_window: int = DEFAULT_BASELINE_WINDOW):
        self.state = DetectorState(class_count, threshold=threshold, momentum=momentum,
                                   baseline_window=baseline_window)

    def update(self, sample_entropy: float) -> bool:
        self.state, decision = ingest(self.state, sample_entropy)
        if decision is Decision.SHIFT_DETECTED:
            logger.info(f'shift detected at sample {self.state.samples_seen - 1}: '
                        f'ema {self.state.ema_sample:.4f}, base {self.state.ema_base:.4f}')
        return decision is Decision.SHIFT_DETECTED

    def reset(self):
        self.state = reset_after_adaptation(self.state)

    @property
    def phase(self) -> Phase:
        return self.state.phase

    @property
    def ema(self) -> float:
        return self.state.ema_sample if self.state.phase is not Phase.COLLECTING else float('nan')


def detection_latency(delta: float, threshold: float, momentum: float = DEFAULT_MOMENTUM) -> int:
    """ Samples needed to flag a noiseless step of size `delta`: ceil(log(1 - thr/delta) / log m). """
    if delta <= threshold:
        return -1
    return math.ceil(math.log(1.0 - threshold / delta) / math.log(momentum))


def _excursions(entropies: Sequence[float], class_count: int, momentum: float,
                baseline_window: int, horizon: Optional[int] = None) -> np.ndarray:
    # replay with an unreachable threshold; the detector never leaves Monitoring.
    # With a horizon the baseline is recollected every `horizon` samples.
    state = DetectorState(class_count, threshold=float('inf'), momentum=momentum, baseline_window=baseline_window)
    out = []
    for t, x in enumerate(entropies):
        if horizon and t and t % horizon == 0:
            state = DetectorState(class_count, threshold=float('inf'), momentum=momentum,
                                  baseline_window=baseline_window)
        state, _ = ingest(state, x)
        if state.phase is Phase.MONITORING:
            out.append(state.excursion)
    return np.array(out)


def calibrate_threshold(pilot_entropies, class_count: int, momentum: float = DEFAULT_MOMENTUM,
                        baseline_window: int = DEFAULT_BASELINE_WINDOW, safety: float = 2.0,
                        floor: Optional[float] = None, horizon: Optional[int] = 500) -> float:
    """ Threshold from stationary pilot streams: largest upward EMA excursion over the baseline times `safety`.

    Every pilot is replayed once end to end and once with the baseline recollected every `horizon` samples, so
    the peak also covers unlucky baseline estimates like the ones collected after each adaptation. Pilots should
    include streams seen through adapted models, whose entropy varies far more than the source model's on clean
    data.

    @param pilot_entropies: Per-sample entropies of one stream without shifts, or a list of such streams.
    @param safety: Multiplicative margin applied to the largest excursion seen.
    @param floor: Lower bound of the returned threshold, 1% of log C when omitted.
    @param horizon: Samples between baseline recollections; None replays each pilot once.
    """
    pilots = list(pilot_entropies)
    if pilots and np.ndim(pilots[0]) == 0:
        pilots = [pilots]
    floor = 0.01 * math.log(class_count) if floor is None else floor
    excursions = [np.zeros(0)]
    for entropies in pilots:
        entropies = list(entropies)
        excursions.append(_excursions(entropies, class_count, momentum, baseline_window))
        if horizon:
            assert horizon > baseline_window, f'horizon must exceed the baseline window {baseline_window}'
            excursions.append(_excursions(entropies, class_count, momentum, baseline_window, horizon))
    excursions = np.concatenate(excursions)
    peak = float(excursions.max()) if excursions.size else 0.0
    threshold = max(floor, safety * max(peak, 0.0))
    logger.info(f'calibrated threshold {threshold:.4f} over {len(pilots)} pilot(s) (peak excursion {peak:.4f}, '
                f'safety x{safety})')
    return threshold


def threshold_sweep(entropies: Sequence[float], class_count: int, thresholds: Sequence[float],
                    momentum: float = DEFAULT_MOMENTUM, baseline_window: int = DEFAULT_BASELINE_WINDOW) -> List[dict]:
    """ Trigger count and first trigger index per threshold on a fixed entropy stream (no adaptation). """
    rows = []
    for threshold in thresholds:
        state = DetectorState(class_count, threshold=threshold, momentum=momentum, baseline_window=baseline_window)
        triggers = []
        for t, x in enumerate(entropies):
            state, decision = ingest(state, x)
            if decision is Decision.SHIFT_DETECTED:
                triggers.append(t)
                state = reset_after_adaptation(state)
        rows.append({'threshold': threshold, 'triggers': len(triggers),
                     'first_trigger': triggers[0] if triggers else None})
    return rows
