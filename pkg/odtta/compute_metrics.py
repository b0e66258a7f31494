""" Scoring of run traces against the hidden label channel, plus entropy/accuracy subset statistics. """
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from .exceptions import TraceMismatchError
from .network import Network, softmax_entropy
from .stream import DomainSpec, LabelChannel, TaskSpec

__all__ = ('COUNTER_COLUMNS', 'with_correct', 'evaluate', 'subset_scores', 'entropy_accuracy_correlation')

COUNTER_COLUMNS = ('forward_sample_count', 'backward_sample_count', 'peak_retained_activations',
                   'adaptations_triggered', 'samples_cached')


def with_correct(trace: pd.DataFrame, labels: LabelChannel) -> pd.DataFrame:
    """ Trace with the `correct` flag filled in; the only place labels meet predictions. """
    if len(trace) != len(labels):
        raise TraceMismatchError(len(trace), len(labels))
    trace = trace.copy()
    trace['correct'] = trace['prediction'].to_numpy() == labels.labels
    return trace


def _rate(flags: np.ndarray) -> float:
    return float(flags.mean()) if len(flags) else float('nan')


def evaluate(trace: pd.DataFrame, labels: LabelChannel, drop_window: int = 200) -> dict:
    """ Accuracy per domain span and shift detection counts against the scheduled boundaries.

    The first trigger inside a span detects the shift into that span; further triggers in the span, and every
    trigger in the first span, are false. The measured drop of a shift is the accuracy over the last `drop_window`
    samples before the boundary minus the accuracy over the first `drop_window` after it, in points.
    """
    correct = with_correct(trace, labels)['correct'].to_numpy()
    total = len(correct)
    starts = list(labels.boundaries) or [0]
    spans = list(zip(starts, starts[1:] + [total]))
    triggers = np.flatnonzero(trace['trigger'].to_numpy().astype(bool)) if 'trigger' in trace else np.array([], int)

    detected, missed, false, latencies, drops, missed_drops = 0, 0, 0, [], [], []
    for s, (a, b) in enumerate(spans):
        inside = triggers[(triggers >= a) & (triggers < b)]
        if s == 0:
            false += len(inside)
            continue
        prev_a = spans[s - 1][0]
        drop = 100 * (_rate(correct[max(prev_a, a - drop_window):a]) - _rate(correct[a:min(b, a + drop_window)]))
        drops.append(drop)
        if len(inside):
            detected += 1
            latencies.append(int(inside[0] - a))
            false += len(inside) - 1
        else:
            missed += 1
            missed_drops.append(drop)

    summary = {
        'samples': total,
        'overall_accuracy': 100 * _rate(correct),
        'domain_accuracy': [100 * _rate(correct[a:b]) for a, b in spans],
        'domain_ids': [int(labels.domain_ids[a]) for a, _ in spans],
        'shifts': len(spans) - 1,
        'detected': detected,
        'missed': missed,
        'false_triggers': false,
        'latencies': latencies,
        'mean_latency': float(np.mean(latencies)) if latencies else float('nan'),
        'drops': drops,
        'missed_drops': missed_drops,
    }
    last = trace.iloc[-1]
    for column in COUNTER_COLUMNS:
        summary[column] = int(last[column]) if column in trace else 0
    summary['energy_proxy'] = summary['forward_sample_count'] + 3 * summary['backward_sample_count']
    return summary


def subset_scores(network: Network, task: TaskSpec, domains: Sequence[DomainSpec], subset_size: int = 200,
                  subsets_per_domain: int = 1, seed: int = 0) -> pd.DataFrame:
    """ Mean entropy and accuracy of the model on fresh subsets drawn from every domain. """
    rng = np.random.default_rng(seed)
    rows = []
    for domain in domains:
        for _ in range(subsets_per_domain):
            x, y = task.sample(subset_size, rng)
            logits, _ = network.forward(domain.apply(x, rng))
            _, entropy = softmax_entropy(logits)
            rows.append({'domain': domain.name, 'kind': domain.kind.value, 'severity': domain.severity,
                         'mean_entropy': float(entropy.mean()),
                         'accuracy': float((logits.argmax(axis=1) == y).mean())})
    return pd.DataFrame(rows)


def entropy_accuracy_correlation(scores: pd.DataFrame) -> float:
    r, _ = pearsonr(scores['mean_entropy'], scores['accuracy'])
    return float(r)
