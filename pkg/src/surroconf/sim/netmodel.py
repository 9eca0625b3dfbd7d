"""Per-link delay sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LinkJitterModel:
    """Base latency plus truncated normal jitter plus optional uniform spikes.

    ``spike_prob`` is the chance a packet picks up an extra U(0, spike_max_ms)
    delay; injected jitter uses probability 1.
    """

    base_ms: float
    sigma_ms: float = 0.0
    spike_max_ms: float = 0.0
    spike_prob: float = 0.0
    loss_prob: float = 0.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        d = np.full(n, self.base_ms, dtype=float)
        if self.sigma_ms > 0:
            d += rng.normal(0.0, self.sigma_ms, n)
            np.maximum(d, 0.0, out=d)
        if self.spike_max_ms > 0 and self.spike_prob > 0:
            u = rng.uniform(0.0, self.spike_max_ms, n)
            if self.spike_prob < 1:
                u *= rng.random(n) < self.spike_prob
            d += u
        return d

    def lost(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.loss_prob <= 0:
            return np.zeros(n, dtype=bool)
        return rng.random(n) < self.loss_prob

    @property
    def mean_ms(self) -> float:
        return self.base_ms + self.spike_prob * self.spike_max_ms / 2
