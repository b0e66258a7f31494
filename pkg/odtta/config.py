""" Experiment configuration: one dataclass per concern, loaded from a nested JSON document. """
import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Dict, List, Optional

from loguru import logger

from .adapter import AdaptConfig
from .detector import DEFAULT_BASELINE_WINDOW, DEFAULT_MOMENTUM, THRESHOLD_PRESETS
from .domain_pool import DEFAULT_CAPACITY, DEFAULT_FEATURE_LAYER
from .exceptions import ConfigError
from .stream import SCHEDULE_KINDS, DomainSpec

__all__ = ('Policy', 'TaskConfig', 'ModelConfig', 'ScheduleConfig', 'DetectorConfig', 'PoolConfig', 'PolicyConfig',
           'ExperimentConfig', 'load_config')


class Policy(str, Enum):
    SOURCE = 'source'
    CONTINUAL = 'continual'
    ONDEMAND = 'ondemand'


@dataclass
class TaskConfig:
    input_dim: int = 32
    class_count: int = 10
    noise_scale: float = 0.35
    prototype_scale: float = 1.0
    seed: int = 0


@dataclass
class ModelConfig:
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    eps: float = 1e-5
    epochs: int = 10
    lr: float = 0.1
    batch_size: int = 32
    train_size: int = 4000
    min_accuracy: float = 0.95
    seed: int = 0
    checkpoint_dir: Optional[str] = None


@dataclass
class ScheduleConfig:
    """ Explicit `domains` (DomainSpec documents) or, when empty, `random_domains` drawn with `seed` over `kinds`.

    Severities map to parameters through `grids` (kind -> five parameters); kinds without a grid are calibrated
    against the source model when `calibrate_grids` is set and use the static grid otherwise.
    """
    domains: List[dict] = field(default_factory=list)
    span: int = 2000
    random_domains: int = 8
    kinds: List[str] = field(default_factory=lambda: [k.value for k in SCHEDULE_KINDS])
    severities: List[int] = field(default_factory=lambda: [4, 5])
    grids: Dict[str, List[float]] = field(default_factory=dict)
    calibrate_grids: bool = True
    seed: int = 0

    def __post_init__(self):
        for kind, grid in self.grids.items():
            if len(grid) != 5:
                raise ConfigError(f'severity grid of {kind} needs five parameters, got {len(grid)}')

    def domain_specs(self) -> List[DomainSpec]:
        specs = []
        for n, document in enumerate(self.domains):
            document = dict(document)
            document.setdefault('domain_id', n)
            specs.append(DomainSpec.from_document(document))
        return specs


@dataclass
class DetectorConfig:
    """ `threshold` wins over `preset`; with neither, the threshold is calibrated on a clean pilot of the source
    model plus one pilot per `calibration_domains` entry seen through a model adapted to that domain. """
    threshold: Optional[float] = None
    preset: Optional[str] = None
    momentum: float = DEFAULT_MOMENTUM
    baseline_window: int = DEFAULT_BASELINE_WINDOW
    calibration_samples: int = 2000
    calibration_safety: float = 2.0
    calibration_domains: List[dict] = field(default_factory=lambda: [{'kind': 'gaussian_noise', 'severity': 3},
                                                                     {'kind': 'gaussian_noise', 'severity': 5}])

    def __post_init__(self):
        if self.preset is not None and self.preset not in THRESHOLD_PRESETS:
            raise ConfigError(f'unknown threshold preset {self.preset}, choose from {list(THRESHOLD_PRESETS)}')

    @property
    def fixed_threshold(self) -> Optional[float]:
        if self.threshold is not None:
            return self.threshold
        return THRESHOLD_PRESETS[self.preset] if self.preset is not None else None

    def domain_specs(self) -> List[DomainSpec]:
        return [DomainSpec.from_document(dict(d, domain_id=n)) for n, d in enumerate(self.calibration_domains)]


@dataclass
class PoolConfig:
    """ `m_clusters` >= 2 builds initial cluster candidates from `samples_per_domain` labeled samples of every
    domain in `train_domains` (clean data when empty); below 2 the pool starts with the source model only. """
    feature_layer: int = DEFAULT_FEATURE_LAYER
    bn_mode: str = 'running'
    capacity: Optional[int] = DEFAULT_CAPACITY
    m_clusters: int = 3
    train_domains: List[dict] = field(default_factory=lambda: [{'kind': 'identity'},
                                                               {'kind': 'brightness', 'parameter': 2.5},
                                                               {'kind': 'brightness', 'parameter': -2.5}])
    samples_per_domain: int = 1000
    supervised_epochs: int = 2
    lr: float = 0.01
    seed: int = 0

    def domain_specs(self) -> List[DomainSpec]:
        return [DomainSpec.from_document(dict(d, domain_id=n)) for n, d in enumerate(self.train_domains)]


@dataclass
class PolicyConfig:
    policy: Policy = Policy.ONDEMAND
    continual_batch: int = 16
    seed: int = 0

    def __post_init__(self):
        try:
            self.policy = Policy(self.policy)
        except ValueError:
            raise ConfigError(f'unknown policy {self.policy}, choose from {[p.value for p in Policy]}')
        if self.continual_batch < 1:
            raise ConfigError(f'continual_batch must be positive, got {self.continual_batch}')


def _section(cls, document: Optional[dict]):
    document = document or {}
    names = {f.name for f in fields(cls)}
    unknown = set(document) - names
    if unknown:
        raise ConfigError(f'unknown key(s) {sorted(unknown)} in section {cls.__name__}')
    return cls(**document)


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    SECTIONS = {'task': TaskConfig, 'model': ModelConfig, 'schedule': ScheduleConfig, 'detector': DetectorConfig,
                'adapt': AdaptConfig, 'pool': PoolConfig, 'policy': PolicyConfig}

    @classmethod
    def from_document(cls, document: dict):
        unknown = set(document) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f'unknown section(s) {sorted(unknown)}')
        return cls(**{name: _section(section, document.get(name)) for name, section in cls.SECTIONS.items()})

    def to_document(self) -> dict:
        document = {name: asdict(getattr(self, name)) for name in self.SECTIONS}
        document['policy']['policy'] = self.policy.policy.value
        return document

    def log(self):
        logger.info('hyperparameters')
        for name in self.SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                logger.info(f'\t * {name}.{k}: {str(v)[:min(100, len(str(v)))]}')


def load_config(path: str) -> ExperimentConfig:
    with open(path, 'r') as f:
        return ExperimentConfig.from_document(json.load(f))
