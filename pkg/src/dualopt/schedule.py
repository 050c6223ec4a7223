"""Which objective supplies the gradient at step ``t``, and the learning rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

FORGET = 0
RETAIN = 1

OBJECTIVE_NAMES = {FORGET: "forget", RETAIN: "retain"}


@dataclass(frozen=True)
class CyclicSchedule:
    """Round-robin over ``len(frequencies)`` objectives.

    Objective ``i`` owns ``frequencies[i]`` consecutive steps of every period.
    Steps are 1-indexed.
    """

    frequencies: Tuple[int, ...]
    total_steps: int

    def __post_init__(self):
        freqs = tuple(int(f) for f in self.frequencies)
        object.__setattr__(self, "frequencies", freqs)
        if not freqs:
            raise ValueError("at least one objective frequency is required")
        if freqs[0] < 1:
            raise ValueError(f"first frequency must be >= 1, got {freqs[0]}")
        if any(f < 0 for f in freqs):
            raise ValueError(f"frequencies must be nonnegative, got {freqs}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")

    @property
    def period(self) -> int:
        return sum(self.frequencies)

    @property
    def n_objectives(self) -> int:
        return len(self.frequencies)

    def objective_at(self, t: int) -> int:
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside 1..{self.total_steps}")
        r = (t - 1) % self.period
        for i, f in enumerate(self.frequencies):
            if r < f:
                return i
            r -= f
        raise AssertionError("unreachable")

    def is_period_end(self, t: int) -> bool:
        return t % self.period == 0

    def objectives(self) -> list:
        return [self.objective_at(t) for t in range(1, self.total_steps + 1)]


class AlternationSchedule(CyclicSchedule):
    """Forget for ``forget_frequency`` steps, then retain for ``retain_frequency``.

    The forget test is ``(t - 1) mod (F_f + F_r) < F_f``, which gives exactly
    ``F_f`` forget steps per period. ``retain_frequency=0`` means forget-only.
    """

    def __init__(self, forget_frequency: int = 1, retain_frequency: int = 5, total_steps: int = 300):
        super().__init__((forget_frequency, retain_frequency), total_steps)

    @property
    def forget_frequency(self) -> int:
        return self.frequencies[0]

    @property
    def retain_frequency(self) -> int:
        return self.frequencies[1]

    def __repr__(self):
        return (
            f"AlternationSchedule(forget_frequency={self.forget_frequency}, "
            f"retain_frequency={self.retain_frequency}, total_steps={self.total_steps})"
        )


def objective_at(schedule: CyclicSchedule, t: int) -> int:
    return schedule.objective_at(t)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up to ``peak_lr`` over ``warmup_steps``, then linear decay to 0.

    ``lr_at(warmup_steps) == peak_lr`` and ``lr_at(total_steps) == 0`` unless the
    warm-up covers every step, in which case the ramp ends at the peak.
    """

    peak_lr: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.peak_lr < 0:
            raise ValueError(f"peak_lr must be nonnegative, got {self.peak_lr}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"warmup_steps must lie in 0..{self.total_steps}, got {self.warmup_steps}"
            )

    def lr_at(self, t: int) -> float:
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside 1..{self.total_steps}")
        w, n = self.warmup_steps, self.total_steps
        if t <= w:
            return self.peak_lr * (t / w)
        start = max(w, 1)
        if n == start:
            return self.peak_lr
        return self.peak_lr * ((n - t) / (n - start))


def lr_at(schedule: LrSchedule, t: int) -> float:
    return schedule.lr_at(t)


def default_warmup(total_steps: int, num_epochs: Optional[int]) -> int:
    """Warm-up length covering the first of ``num_epochs`` equal epochs."""
    if not num_epochs:
        return 0
    return total_steps // int(num_epochs)


def make_schedule(frequencies: Sequence[int], total_steps: int) -> CyclicSchedule:
    if len(frequencies) == 2:
        return AlternationSchedule(frequencies[0], frequencies[1], total_steps)
    return CyclicSchedule(tuple(frequencies), total_steps)
