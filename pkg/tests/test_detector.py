import inspect
import math

import numpy as np
import pytest

from odtta.detector import (Decision, DetectorState, Phase, ShiftDetector, calibrate_threshold, detection_latency,
                            ingest, reset_after_adaptation, threshold_sweep)
from odtta.exceptions import DetectorMisuseError, InvalidEntropyError

C = 10


def feed(detector: ShiftDetector, values) -> list:
    return [t for t, x in enumerate(values) if detector.update(x)]


def steps_until_trigger(detector: ShiftDetector, value: float, limit: int = 10000) -> int:
    for n in range(1, limit + 1):
        if detector.update(value):
            return n
    return -1


def test_baseline_is_the_window_mean():
    state = DetectorState(C)
    for x in [0.2] * 50 + [0.4] * 50:
        state, _ = ingest(state, x)
    assert state.phase is Phase.MONITORING
    assert state.ema_base == pytest.approx(0.3, abs=1e-15)
    assert state.ema_sample == state.ema_base


def test_constant_stream_never_triggers():
    detector = ShiftDetector(C, threshold=0.06)
    assert feed(detector, [0.5] * 5000) == []


def test_step_latency():
    detector = ShiftDetector(C, threshold=0.06)
    feed(detector, [0.5] * 100)
    assert steps_until_trigger(detector, 1.5) == 13 == detection_latency(1.0, 0.06)
    assert detector.phase is Phase.SUPPRESSED


@pytest.mark.parametrize('delta, threshold', [(0.2, 0.1), (0.5, 0.06), (1.0, 0.3), (0.07, 0.06)])
def test_latency_formula(delta, threshold):
    detector = ShiftDetector(C, threshold=threshold)
    feed(detector, [0.3] * 100)
    expected = math.ceil(math.log(1 - threshold / delta) / math.log(0.995))
    assert steps_until_trigger(detector, 0.3 + delta) == expected == detection_latency(delta, threshold)


def test_small_step_never_triggers():
    detector = ShiftDetector(C, threshold=0.06)
    feed(detector, [0.5] * 100)
    assert steps_until_trigger(detector, 0.55, limit=20000) == -1
    assert detection_latency(0.05, 0.06) == -1


def test_alternating_stream_stays_near_baseline():
    detector = ShiftDetector(C, threshold=0.06)
    values = [0.4, 0.6] * 5000
    feed(detector, values[:100])
    assert detector.state.ema_base == 0.5
    for x in values[100:]:
        assert not detector.update(x)
        assert abs(detector.ema - 0.5) <= 0.0006


def test_ema_stays_within_the_input_range():
    rng = np.random.default_rng(0)
    detector = ShiftDetector(C, threshold=10.0)
    for x in rng.uniform(0.8, 1.2, 3000):
        detector.update(x)
        if detector.phase is Phase.MONITORING:
            assert 0.8 <= detector.ema <= 1.2


def test_rebaseline_after_adaptation():
    detector = ShiftDetector(C, threshold=0.06)
    feed(detector, [0.5] * 100)
    assert steps_until_trigger(detector, 1.5) > 0
    detector.reset()
    assert detector.phase is Phase.COLLECTING
    feed(detector, [0.75] * 100)
    assert detector.state.ema_base == 0.75
    # against the new baseline a further rise of 0.5 needs its own latency
    assert steps_until_trigger(detector, 1.25) == detection_latency(0.5, 0.06) == 26


def test_suppressed_detector_ignores_input():
    state = DetectorState(C, threshold=0.06)
    for x in [0.5] * 100 + [2.0] * 10:
        state, decision = ingest(state, x)
    assert state.phase is Phase.SUPPRESSED
    ema = state.ema_sample
    for _ in range(100):
        state, decision = ingest(state, 2.3)
        assert decision is Decision.NO_SHIFT
    assert state.ema_sample == ema
    assert reset_after_adaptation(state).phase is Phase.COLLECTING


def test_reset_outside_suppressed_is_misuse():
    detector = ShiftDetector(C, threshold=0.06)
    with pytest.raises(DetectorMisuseError):
        detector.reset()
    feed(detector, [0.5] * 100)
    with pytest.raises(DetectorMisuseError):
        detector.reset()


@pytest.mark.parametrize('value', [-0.1, math.log(C) + 0.01, float('nan')])
def test_invalid_entropy(value):
    with pytest.raises(InvalidEntropyError):
        ingest(DetectorState(C), value)


def test_ingest_takes_entropy_only():
    assert list(inspect.signature(ingest).parameters) == ['state', 'sample_entropy']


def test_lower_threshold_triggers_no_later():
    rng = np.random.default_rng(3)
    stream = np.concatenate([rng.uniform(0.2, 0.4, 1000), rng.uniform(0.5, 0.9, 2000)])
    rows = threshold_sweep(stream, C, [0.02, 0.05, 0.1, 0.2, 0.3])
    firsts = [row['first_trigger'] for row in rows]
    assert all(f is not None for f in firsts)
    assert firsts == sorted(firsts)


def test_calibrated_threshold_is_quiet_on_its_pilot():
    rng = np.random.default_rng(5)
    pilot = np.clip(rng.gamma(0.5, 0.1, 5000), 0.0, math.log(C))
    threshold = calibrate_threshold(pilot, C)
    assert threshold > 0
    assert threshold_sweep(pilot, C, [threshold])[0]['triggers'] == 0


def test_calibration_floor():
    assert calibrate_threshold([0.3] * 1000, C, floor=0.01) == 0.01


def test_default_floor_scales_with_the_class_count():
    assert calibrate_threshold([0.3] * 1000, C) == pytest.approx(0.01 * math.log(C))


def test_calibration_covers_every_pilot():
    rng = np.random.default_rng(6)
    quiet = np.clip(rng.gamma(0.5, 0.02, 3000), 0.0, math.log(C))
    noisy = np.clip(rng.uniform(0.0, 1.6, 3000), 0.0, math.log(C))
    alone = calibrate_threshold(quiet, C)
    joint = calibrate_threshold([quiet, noisy], C)
    assert joint == calibrate_threshold([noisy, quiet], C)
    assert joint > 3 * alone
    assert threshold_sweep(noisy, C, [alone])[0]['triggers'] > 0
    for pilot in (quiet, noisy):
        assert threshold_sweep(pilot, C, [joint])[0]['triggers'] == 0
