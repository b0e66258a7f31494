from .network import BnMode, CachePolicy, ModelSpec, Network, softmax_entropy, backward_bn_affine
from .batchnorm import BnLayerState, BnSnapshot, merge_stats, snapshot, restore
from .detector import ShiftDetector, DetectorState, ingest, reset_after_adaptation, calibrate_threshold
from .domain_pool import CandidatePool, FeatureExtractor, extract_feature, build_initial_pool, add_progressive, \
    select_candidate
from .adapter import AdaptConfig, adapt, stats_phase, param_phase
from .stream import TaskSpec, DomainSpec, StreamSchedule, generate, materialize, random_schedule
from .trainer import SourceTrainer, fit_source_model
from .config import ExperimentConfig, PolicyConfig, load_config
from .harness import run, run_experiment
from .compute_metrics import evaluate
