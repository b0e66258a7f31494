""" Synthetic classification task, corruption domains and domain-sequenced streams with a ground-truth schedule. """
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError

__all__ = ('CorruptionKind', 'SEVERITY_GRIDS', 'PARAMETER_RANGES', 'SCHEDULE_KINDS', 'TaskSpec', 'DomainSpec',
           'StreamSchedule', 'StreamEvent', 'LabelChannel', 'generate', 'split_channels', 'materialize',
           'random_schedule', 'dump_samples', 'load_samples')


class CorruptionKind(str, Enum):
    IDENTITY = 'identity'
    GAUSSIAN_NOISE = 'gaussian_noise'
    BRIGHTNESS = 'brightness'
    CONTRAST = 'contrast'
    OCCLUSION = 'occlusion'
    PERMUTE = 'permute'


# severity 1..5 -> kind parameter, every grid monotone in effect size. Pilot calibration against a fitted source
# model (harness.calibrate_severity_grids) replaces these per model; the values here target the default task.
SEVERITY_GRIDS = {
    CorruptionKind.GAUSSIAN_NOISE: (0.4, 0.8, 1.2, 1.6, 2.0),  # noise sigma
    CorruptionKind.BRIGHTNESS: (0.3, 0.6, 0.9, 1.2, 1.5),  # additive offset
    CorruptionKind.CONTRAST: (0.8, 0.6, 0.45, 0.35, 0.28),  # multiplicative factor
    CorruptionKind.OCCLUSION: (0.2, 0.4, 0.55, 0.7, 0.8),  # zeroed fraction of coordinates
    CorruptionKind.PERMUTE: (0.1, 0.2, 0.3, 0.4, 0.5),  # fraction of shuffled coordinates
}

# (mildest, most severe) parameter searched by grid calibration
PARAMETER_RANGES = {
    CorruptionKind.GAUSSIAN_NOISE: (0.0, 6.0),
    CorruptionKind.BRIGHTNESS: (0.0, 6.0),
    CorruptionKind.CONTRAST: (1.0, 0.02),
    CorruptionKind.OCCLUSION: (0.0, 0.95),
    CorruptionKind.PERMUTE: (0.0, 1.0),
}

# default kinds of random schedules: shifts whose damage BN statistics can undo
SCHEDULE_KINDS = (CorruptionKind.CONTRAST, CorruptionKind.OCCLUSION)


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """ C Gaussian classes around fixed prototypes in R^d. """
    input_dim: int
    class_count: int
    prototypes: np.ndarray
    noise_scale: float
    seed: int

    @classmethod
    def create(cls, input_dim: int = 32, class_count: int = 10, noise_scale: float = 0.35,
               prototype_scale: float = 1.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        prototypes = prototype_scale * rng.standard_normal((class_count, input_dim))
        return cls(input_dim, class_count, prototypes, noise_scale, seed)

    def sample(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, self.class_count, size=n)
        x = self.prototypes[labels] + self.noise_scale * rng.standard_normal((n, self.input_dim))
        return x, labels

    def to_document(self) -> dict:
        return {'input_dim': self.input_dim, 'class_count': self.class_count, 'noise_scale': self.noise_scale,
                'seed': self.seed}


@dataclass(frozen=True)
class DomainSpec:
    """ One corruption at a severity (0 = identity); `parameter` overrides the severity grid. """
    kind: CorruptionKind = CorruptionKind.IDENTITY
    severity: int = 0
    domain_id: int = 0
    parameter: float = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'kind', CorruptionKind(self.kind))
        if not 0 <= self.severity <= 5:
            raise ConfigError(f'severity must lie in 0..5, got {self.severity}')

    @property
    def is_identity(self) -> bool:
        return self.kind is CorruptionKind.IDENTITY or (self.severity == 0 and self.parameter is None)

    @property
    def value(self) -> float:
        if self.parameter is not None:
            return float(self.parameter)
        if self.is_identity:
            return None
        return SEVERITY_GRIDS[self.kind][self.severity - 1]

    @property
    def name(self) -> str:
        if self.is_identity:
            return 'identity'
        return f'{self.kind.value}-{self.severity}' if self.severity else f'{self.kind.value}({self.value})'

    def with_grid(self, grids: Mapping[CorruptionKind, Sequence[float]] = None) -> 'DomainSpec':
        """ Pin the severity to the parameter of a calibrated grid; explicit parameters and missing kinds stay. """
        if not grids or self.parameter is not None or self.is_identity:
            return self
        grid = {CorruptionKind(k): v for k, v in grids.items()}.get(self.kind)
        return self if grid is None else replace(self, parameter=float(grid[self.severity - 1]))

    def permutation(self, input_dim: int) -> np.ndarray:
        """ Fixed index shuffle moving `value` of the coordinates, derived from the domain seed. """
        rng = np.random.default_rng(self.seed)
        index = np.arange(input_dim)
        chosen = np.sort(rng.choice(input_dim, size=max(2, int(round(self.value * input_dim))), replace=False))
        index[chosen] = np.roll(chosen, 1)
        return index

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.is_identity:
            return x.copy()
        v = self.value
        if self.kind is CorruptionKind.GAUSSIAN_NOISE:
            return x + v * rng.standard_normal(x.shape)
        if self.kind is CorruptionKind.BRIGHTNESS:
            return x + v
        if self.kind is CorruptionKind.CONTRAST:
            return v * x
        if self.kind is CorruptionKind.OCCLUSION:
            return x * (rng.random(x.shape) >= v)
        return x[:, self.permutation(x.shape[1])]

    def to_document(self) -> dict:
        return {'kind': self.kind.value, 'severity': self.severity, 'domain_id': self.domain_id,
                'parameter': self.parameter, 'seed': self.seed}

    @classmethod
    def from_document(cls, document: dict):
        return cls(**document)


@dataclass(frozen=True, eq=False)
class StreamSchedule:
    """ Ordered (domain, length) segments over one task. """
    task: TaskSpec
    segments: Tuple[Tuple[DomainSpec, int], ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'segments', tuple((d, int(n)) for d, n in self.segments))
        if len(self.segments) == 0:
            raise ConfigError('schedule has no segments')
        if any(n < 1 for _, n in self.segments):
            raise ConfigError('every segment needs at least one sample')

    @property
    def total_length(self) -> int:
        return sum(n for _, n in self.segments)

    @property
    def boundaries(self) -> List[int]:
        """ Start index of every segment. """
        return np.cumsum([0] + [n for _, n in self.segments[:-1]]).tolist()

    @property
    def domains(self) -> List[DomainSpec]:
        return [d for d, _ in self.segments]


@dataclass(frozen=True, eq=False)
class StreamEvent:
    index: int
    sample: np.ndarray
    label: int
    domain_id: int


@dataclass(eq=False)
class LabelChannel:
    """ Hidden ground truth of a stream; only evaluation reads it. """
    labels: np.ndarray
    domain_ids: np.ndarray
    boundaries: List[int] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def generate(schedule: StreamSchedule) -> Iterator[StreamEvent]:
    """ Deterministic stream of events for a schedule. """
    rng = np.random.default_rng(schedule.seed)
    index = 0
    for domain, length in schedule.segments:
        x, y = schedule.task.sample(length, rng)
        x = domain.apply(x, rng)
        for sample, label in zip(x, y):
            yield StreamEvent(index, sample, int(label), domain.domain_id)
            index += 1


def split_channels(events, boundaries: Sequence[int] = ()) -> Tuple[np.ndarray, LabelChannel]:
    """ Separate the input channel (samples) from the label channel (labels, domain ids). """
    events = list(events)
    samples = np.stack([e.sample for e in events])
    labels = LabelChannel(np.array([e.label for e in events]), np.array([e.domain_id for e in events]),
                          list(boundaries))
    return samples, labels


def materialize(schedule: StreamSchedule) -> Tuple[np.ndarray, LabelChannel]:
    return split_channels(generate(schedule), schedule.boundaries)


def random_schedule(task: TaskSpec,
                    n_domains: int = 8,
                    span: int = 2000,
                    kinds: Sequence[CorruptionKind] = SCHEDULE_KINDS,
                    severities: Sequence[int] = (4, 5),
                    start_clean: bool = True,
                    seed: int = 0,
                    grids: Mapping[CorruptionKind, Sequence[float]] = None) -> StreamSchedule:
    """ Random domain order; consecutive domains never share a corruption kind.

    @param grids: Calibrated severity grids per kind, the static ones for kinds left out.
    """
    if len(set(CorruptionKind(k) for k in kinds)) < 2:
        raise ConfigError(f'random schedules alternate kinds, need at least two, got {list(kinds)}')
    rng = np.random.default_rng(seed)
    segments, previous = [], None
    if start_clean:
        segments.append((DomainSpec(domain_id=0), span))
    while len(segments) < n_domains:
        options = [k for k in kinds if CorruptionKind(k) is not previous]
        kind = CorruptionKind(options[rng.integers(len(options))])
        severity = int(severities[rng.integers(len(severities))])
        domain = DomainSpec(kind, severity, domain_id=len(segments), seed=seed + len(segments)).with_grid(grids)
        segments.append((domain, span))
        previous = kind
    return StreamSchedule(task, tuple(segments), seed)


def dump_samples(path: str, samples: np.ndarray, labels: LabelChannel = None):
    """ Write a sample file (`.npz`); labels are stored for offline scoring only. """
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    arrays = {'samples': samples}
    if labels is not None:
        arrays.update(labels=labels.labels, domain_ids=labels.domain_ids, boundaries=np.array(labels.boundaries))
    np.savez(path, **arrays)


def load_samples(path: str) -> np.ndarray:
    """ Read only the input channel of a sample file. """
    with np.load(path) as data:
        return data['samples'].astype(np.float64)
