import numpy as np
import pandas as pd
import pytest

from odtta.compute_metrics import COUNTER_COLUMNS, evaluate, with_correct
from odtta.exceptions import TraceMismatchError
from odtta.stream import LabelChannel
from odtta.utils import load_trace, save_result, save_trace


def make_trace(predictions, triggers=(), backward=0, forward=None):
    n = len(predictions)
    trigger = np.zeros(n, dtype=bool)
    trigger[list(triggers)] = True
    trace = pd.DataFrame({'index': np.arange(n), 'prediction': predictions, 'trigger': trigger})
    for column in COUNTER_COLUMNS:
        trace[column] = 0
    trace['forward_sample_count'] = np.arange(1, n + 1) if forward is None else forward
    trace.loc[n - 1, 'backward_sample_count'] = backward
    return trace


def channel(labels, boundaries):
    labels = np.asarray(labels)
    domain_ids = np.zeros(len(labels), dtype=int)
    for n, start in enumerate(boundaries):
        domain_ids[start:] = n
    return LabelChannel(labels, domain_ids, list(boundaries))


def test_triggers_at_every_boundary():
    labels = channel(np.zeros(900, dtype=int), [0, 300, 600])
    summary = evaluate(make_trace(np.zeros(900, dtype=int), triggers=[310, 640]), labels)
    assert (summary['shifts'], summary['detected'], summary['missed'], summary['false_triggers']) == (2, 2, 0, 0)
    assert summary['latencies'] == [10, 40]
    assert summary['mean_latency'] == 25.0


def test_no_triggers_miss_every_shift():
    labels = channel(np.zeros(900, dtype=int), [0, 300, 600])
    summary = evaluate(make_trace(np.zeros(900, dtype=int)), labels)
    assert summary['missed'] == 2 and summary['detected'] == 0
    assert summary['missed_drops'] == [0.0, 0.0]


def test_false_triggers():
    labels = channel(np.zeros(900, dtype=int), [0, 300, 600])
    summary = evaluate(make_trace(np.zeros(900, dtype=int), triggers=[50, 320, 330, 700]), labels)
    assert summary['detected'] == 2
    assert summary['false_triggers'] == 2


def test_accuracy_and_drop():
    predictions = np.zeros(800, dtype=int)
    predictions[400:500] = 1
    labels = channel(np.zeros(800, dtype=int), [0, 400])
    summary = evaluate(make_trace(predictions), labels)
    assert summary['overall_accuracy'] == pytest.approx(87.5)
    assert summary['domain_accuracy'] == [100.0, 75.0]
    assert summary['drops'] == [pytest.approx(50.0)]


def test_energy_proxy_and_counters():
    labels = channel(np.zeros(10, dtype=int), [0])
    summary = evaluate(make_trace(np.zeros(10, dtype=int), backward=4), labels)
    assert summary['forward_sample_count'] == 10
    assert summary['energy_proxy'] == 10 + 3 * 4


def test_length_mismatch():
    with pytest.raises(TraceMismatchError):
        with_correct(make_trace(np.zeros(5, dtype=int)), channel(np.zeros(6, dtype=int), [0]))


def test_trace_file_round_trip(tmp_path):
    trace = make_trace(np.arange(6) % 3)
    trace['entropy'] = np.random.default_rng(0).uniform(size=6)
    path = str(tmp_path / 'trace.csv')
    save_trace(path, trace)
    loaded = load_trace(path)
    assert np.array_equal(loaded['entropy'].to_numpy(), trace['entropy'].to_numpy())


def test_save_result_appends(tmp_path):
    path = str(tmp_path / 'runs.csv')
    save_result(path, {'policy': 'ondemand', 'accuracy': 80.0})
    save_result(path, {'policy': 'continual', 'accuracy': 79.0})
    assert pd.read_csv(path)['policy'].tolist() == ['ondemand', 'continual']
