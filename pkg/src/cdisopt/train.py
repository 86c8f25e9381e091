"""Class-balancing sample weights and the cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


class ImbalanceError(ValueError):
    pass


def sample_weights(labels: Sequence[int]) -> list[float]:
    """Inverse class-frequency weights for a weighted random sampler.

    Each sample weighs ``1 / count(its class)``, so every class carries a
    total weight of 1.
    """
    labels = list(labels)
    if any(v not in (0, 1) or isinstance(v, bool) for v in labels):
        raise ValueError("labels must be 0 or 1")
    counts = {0: labels.count(0), 1: labels.count(1)}
    if 0 in counts.values():
        raise ImbalanceError(f"both classes must be present, got counts {counts}")
    return [1.0 / counts[v] for v in labels]


@dataclass(frozen=True)
class ScheduleSpec:
    total_steps: int
    eta_max: float = 1e-3
    eta_min: float = 0.0

    def __post_init__(self):
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ValueError("total_steps must be an integer >= 1")
        if not self.eta_max > 0:
            raise ValueError("eta_max must be positive")
        if not 0 <= self.eta_min < self.eta_max:
            raise ValueError("need 0 <= eta_min < eta_max")


def cosine_lr(step: int, spec: ScheduleSpec) -> float:
    """Single-cycle cosine annealing from ``eta_max`` at step 0 to ``eta_min`` at step T."""
    if int(step) != step or not 0 <= step <= spec.total_steps:
        raise ValueError(f"step must be an integer in [0, {spec.total_steps}], got {step!r}")
    if step == 0:
        return spec.eta_max
    if step == spec.total_steps:
        return spec.eta_min
    lr = spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (1 + math.cos(math.pi * step / spec.total_steps))
    # eta_min + (eta_max - eta_min) can round past eta_max; keep the schedule monotone.
    return min(spec.eta_max, max(spec.eta_min, lr))


def schedule_table(spec: ScheduleSpec) -> list[tuple[int, float]]:
    return [(t, cosine_lr(t, spec)) for t in range(spec.total_steps + 1)]
