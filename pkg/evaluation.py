import fire
from glob import glob
from os.path import join as pj

from tabulate import tabulate

from odtta.compute_metrics import evaluate
from odtta.config import ExperimentConfig
from odtta.harness import build_schedule
from odtta.stream import TaskSpec, materialize
from odtta.utils import load_trace, read_json, write_json


class RunEvaluation:

    def evaluate(
        self,
        result_dir: str = '',
        drop_window: int = 200
    ):
        """ Score `trace.csv` of a run directory against the labels regenerated from its `config.json`. """
        assert (
            result_dir
        ), "result_dir cannot be empty."
        config = ExperimentConfig.from_document(read_json(pj(result_dir, 'config.json')))
        task = TaskSpec.create(config.task.input_dim, config.task.class_count, config.task.noise_scale,
                               config.task.prototype_scale, config.task.seed)
        _, labels = materialize(build_schedule(config, task))
        summary = evaluate(load_trace(pj(result_dir, 'trace.csv')), labels, drop_window)
        summary['policy'] = config.policy.policy.value
        write_json(pj(result_dir, 'evaluation.json'), summary)
        print(tabulate([[k, v] for k, v in summary.items() if not isinstance(v, list)], headers=['metric', 'value']))
        return summary

    def report(
        self,
        results: str = './result*'
    ):
        """ One row per run directory holding a `summary.json`. """
        rows = []
        for path in sorted(glob(pj(results, 'summary.json'))):
            s = read_json(path)
            rows.append([path.rsplit('/', 2)[-2], s['policy'], round(s['overall_accuracy'], 2), s['detected'],
                         s['missed'], s['false_triggers'], s['forward_sample_count'], s['backward_sample_count'],
                         s['energy_proxy'], s['peak_retained_activations']])
        print(tabulate(rows, headers=['run', 'policy', 'acc', 'detected', 'missed', 'false', 'forward', 'backward',
                                      'energy proxy', 'peak retained']))
        return rows


if __name__ == "__main__":
    fire.Fire(RunEvaluation)
