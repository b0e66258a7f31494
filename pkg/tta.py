import os
from os.path import join as pj

import fire
import numpy as np
from loguru import logger
from tabulate import tabulate

from odtta.adapter import AdaptConfig, adapt
from odtta.config import ExperimentConfig, load_config
from odtta.detector import threshold_sweep
from odtta.domain_pool import CandidatePool, FeatureExtractor, add_progressive, select_candidate
from odtta.harness import (build_schedule, calibrate_detector, pilot_entropies, prepare_pool, resolve_grids,
                           run_experiment)
from odtta.network import BnMode
from odtta.stream import TaskSpec, dump_samples, load_samples, materialize
from odtta.trainer import load_source
from odtta.utils import save_result, write_json


def _config(config: str) -> ExperimentConfig:
    return load_config(config) if config else ExperimentConfig()


def _extractor(network, pool: CandidatePool, batch_size: int = 16, bn_mode: str = 'running'):
    return FeatureExtractor(network, pool.feature_layer, BnMode(bn_mode), batch_size)


class PoolCommands:

    def build(self, checkpoint_dir: str = './cp', config: str = None, output: str = './pool.json',
              m_clusters: int = None):
        """ Cluster the labeled training domains of the config into BN-only candidates plus the source model.

        @param m_clusters: Overrides `pool.m_clusters` of the config.
        """
        task, network = load_source(checkpoint_dir)
        cfg = _config(config)
        if m_clusters is not None:
            cfg.pool.m_clusters = m_clusters
        pc = cfg.pool
        pool = prepare_pool(cfg, task, network,
                            FeatureExtractor(network, pc.feature_layer, BnMode(pc.bn_mode), cfg.adapt.stats_batch))
        pool.save(output)
        logger.info(f'pool of {len(pool)} candidates saved at {output}')

    def inspect(self, pool: str = './pool.json'):
        candidates = CandidatePool.load(pool)
        rows = [[c.id, str(c.provenance), c.snap.nbytes, float(np.linalg.norm(c.feature.vector))] for c in candidates]
        print(f'fingerprint {candidates.fingerprint[:12]}, feature layer {candidates.feature_layer}, '
              f'capacity {candidates.capacity}')
        print(tabulate(rows, headers=['id', 'provenance', 'snapshot bytes', '|mu|']))

    def select(self, checkpoint_dir: str = './cp', pool: str = './pool.json', samples: str = None,
               batch_size: int = 16):
        assert samples, 'Please specify a --samples file'
        _, network = load_source(checkpoint_dir)
        candidates = CandidatePool.load(pool)
        feature = _extractor(network, candidates, batch_size).extract(load_samples(samples))
        chosen = select_candidate(candidates, feature)
        for c, d in zip(candidates, candidates.distances(feature)):
            print(f"{'*' if c.id == chosen.id else ' '} candidate {c.id:3d} {str(c.provenance):24s} distance {d:.6f}")
        return chosen.id


class StreamCommands:

    def dump(self, config: str = None, output: str = './stream.npz', with_labels: bool = False):
        """ Write the configured stream to a sample file, at the severity grids frozen in the config (see `grids`). """
        cfg = _config(config)
        task = TaskSpec.create(cfg.task.input_dim, cfg.task.class_count, cfg.task.noise_scale,
                               cfg.task.prototype_scale, cfg.task.seed)
        samples, labels = materialize(build_schedule(cfg, task))
        dump_samples(output, samples, labels if with_labels else None)
        logger.info(f'{len(samples)} samples written to {output}')


class TestTimeAdaptation:

    def __init__(self):
        self.pool = PoolCommands()
        self.stream = StreamCommands()

    def adapt(self, checkpoint_dir: str = './cp', pool: str = './pool.json', samples: str = None,
              output: str = './adapted.json', cache_size: int = 128, stats_batch: int = 16, param_batch: int = 1,
              lr: float = 1e-3, stats_momentum: float = 0.9, tau_coeff: float = 0.4, param_passes: int = 1,
              candidate: int = None, update_pool: bool = False):
        """ Adapt the source model to the first `cache_size` samples of a sample file. """
        assert samples, 'Please specify a --samples file'
        _, network = load_source(checkpoint_dir)
        candidates = CandidatePool.load(pool)
        cfg = AdaptConfig(cache_size, stats_batch, param_batch, lr, stats_momentum, tau_coeff, param_passes)
        adapted, report, new = adapt(network, candidates, load_samples(samples)[:cache_size], cfg,
                                     _extractor(network, candidates, stats_batch), candidate_id=candidate)
        adapted.save(output)
        if update_pool:
            add_progressive(candidates, new.snap, new.feature).save(pool)
        print(tabulate(list(report.to_dict().items()), headers=['field', 'value']))

    def run(self, config: str = None, policy: str = 'ondemand', out: str = './result'):
        """ Run one policy over the configured stream and write trace, summary and log into `out`. """
        cfg = _config(config)
        _, summary, _ = run_experiment(cfg, policy=policy, out_dir=out, disable_progress=False)
        save_result(pj(os.path.dirname(os.path.abspath(out)), 'runs.csv'),
                    {'out': out, 'policy': policy, 'accuracy': summary['overall_accuracy'],
                     'detected': summary['detected'], 'missed': summary['missed'],
                     'false': summary['false_triggers'], 'backward': summary['backward_sample_count'],
                     'energy_proxy': summary['energy_proxy']})

    def calibrate(self, checkpoint_dir: str = './cp', pool: str = './pool.json', config: str = None,
                  sweep: str = '0.01,0.02,0.04,0.06,0.1,0.2,0.3', output: str = None):
        """ Threshold from a clean pilot plus adapted pilots of the configured calibration domains, and trigger
        counts of candidate thresholds on the clean pilot. """
        task, network = load_source(checkpoint_dir)
        cfg = _config(config)
        dc = cfg.detector
        candidates = CandidatePool.load(pool)
        domains = [d.with_grid(resolve_grids(cfg, task, network)) for d in dc.domain_specs()]
        threshold = calibrate_detector(network, candidates, task, domains, cfg.adapt,
                                       _extractor(network, candidates, cfg.adapt.stats_batch, cfg.pool.bn_mode),
                                       dc.calibration_samples, cfg.schedule.seed + 1000, dc.calibration_safety,
                                       dc.momentum, dc.baseline_window)
        entropies = pilot_entropies(network, task, dc.calibration_samples, cfg.schedule.seed + 1000)
        sweep = sweep.split(',') if isinstance(sweep, str) else sweep
        rows = threshold_sweep(entropies, network.class_count, [float(v) for v in sweep], dc.momentum,
                               dc.baseline_window)
        print(tabulate(rows, headers='keys'))
        if output:
            write_json(output, {'threshold': threshold, 'sweep': rows})
        return threshold

    def grids(self, checkpoint_dir: str = './cp', config: str = None, output: str = './config.json'):
        """ Calibrate the severity grids of every kind the config applies and freeze them into `output`. """
        task, network = load_source(checkpoint_dir)
        cfg = _config(config)
        cfg.schedule.grids = resolve_grids(cfg, task, network)
        print(tabulate([[k] + list(v) for k, v in cfg.schedule.grids.items()],
                       headers=['kind'] + [f'severity {s}' for s in range(1, 6)]))
        write_json(output, cfg.to_document())
        return cfg.schedule.grids


if __name__ == '__main__':
    fire.Fire(TestTimeAdaptation)
