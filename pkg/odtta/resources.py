""" Operation counters standing in for latency, energy and peak memory. """
from dataclasses import asdict, dataclass

from .network import ActivationCache, CachePolicy

__all__ = ('BACKWARD_COST', 'ResourceCounters')

# one backward pass costs about two forward passes plus the update
BACKWARD_COST = 3


@dataclass
class ResourceCounters:
    forward_sample_count: int = 0
    backward_sample_count: int = 0
    peak_retained_activations: int = 0
    adaptations_triggered: int = 0
    samples_cached: int = 0
    backward_caches: int = 0

    def record_forward(self, cache: ActivationCache, samples: int = None):
        self.forward_sample_count += cache.batch_size if samples is None else samples
        self.peak_retained_activations = max(self.peak_retained_activations, cache.retained_count())
        if cache.policy is CachePolicy.FOR_BACKWARD:
            self.backward_caches += 1

    def record_backward(self, samples: int):
        self.backward_sample_count += samples

    @property
    def energy_proxy(self) -> int:
        """ forward + 3 x backward sample count; a relative proxy, not joules. """
        return self.forward_sample_count + BACKWARD_COST * self.backward_sample_count

    def to_dict(self) -> dict:
        return asdict(self)

    def delta(self, before: dict) -> dict:
        """ Change of every additive counter since `before` (peak is reported as the current value). """
        now = self.to_dict()
        return {k: (v if k == 'peak_retained_activations' else v - before[k]) for k, v in now.items()}
