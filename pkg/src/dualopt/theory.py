"""Closed-form limits of the base and delta states under periodic
forget/retain streams, and a direct simulation to check them against.

With forget gradients of mean ``m*G`` for ``F_f`` steps followed by retain
gradients of mean ``n*G`` for ``F_r`` steps, the states sampled at period ends
converge to::

    B   = (b^Fr (1 - b^Ff) m + (1 - b^Fr) n) / (1 - b^(Ff+Fr)) * G
    D_f = Ff b^(Ff-1) (1-b) (1 - b^Fr) / ((1 - b^Ff)(1 - b^(Ff+Fr))) * (m - n) G
    D_r = Fr b^(Fr-1) (1-b) (1 - b^Ff) / ((1 - b^Fr)(1 - b^(Ff+Fr))) * (n - m) G
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np


@dataclass(frozen=True)
class GradientDynamics:
    m: float
    n: float
    G: float = 1.0
    beta: float = 0.9
    forget_freq: int = 1
    retain_freq: int = 5

    def __post_init__(self):
        if not (-1.0 <= self.m <= 1.0 and -1.0 <= self.n <= 1.0):
            raise ValueError(f"m and n must lie in [-1, 1], got m={self.m}, n={self.n}")
        if self.G < 0:
            raise ValueError(f"G must be nonnegative, got {self.G}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.forget_freq < 1 or self.retain_freq < 1:
            raise ValueError("forget_freq and retain_freq must be positive")

    @property
    def period(self) -> int:
        return self.forget_freq + self.retain_freq


@dataclass(frozen=True)
class StateLimits:
    B_inf: float
    Delta_f_inf: float
    Delta_r_inf: float

    def as_tuple(self):
        return (self.B_inf, self.Delta_f_inf, self.Delta_r_inf)


def closed_form_limits(d: GradientDynamics) -> StateLimits:
    b, ff, fr = d.beta, d.forget_freq, d.retain_freq
    bf, br, bp = b**ff, b**fr, b ** (ff + fr)
    B = (br * (1 - bf) * d.m + (1 - br) * d.n) / (1 - bp) * d.G
    if b == 0.0:
        # 0**0 == 1 in the b^(F-1) factor: only an F == 1 run keeps a residual
        pf = (1.0 if ff == 1 else 0.0)
        pr = (1.0 if fr == 1 else 0.0)
    else:
        pf = ff * b ** (ff - 1)
        pr = fr * b ** (fr - 1)
    Df = pf * (1 - b) * (1 - br) / ((1 - bf) * (1 - bp)) * (d.m - d.n) * d.G
    Dr = pr * (1 - b) * (1 - bf) / ((1 - br) * (1 - bp)) * (d.n - d.m) * d.G
    return StateLimits(float(B), float(Df), float(Dr))


def negative_boundary_m(n: float, beta: float, forget_freq: int, retain_freq: int) -> float:
    """The ``m`` that drives the base limit to zero for a given ``n``."""
    br = beta**retain_freq
    bf = beta**forget_freq
    return -(1 - br) / (br * (1 - bf)) * n


@dataclass
class Trajectory:
    """Period-end samples; arrays have shape ``(periods, *coords)``."""

    B: np.ndarray
    Delta_f: np.ndarray
    Delta_r: np.ndarray

    def final(self):
        return self.B[-1], self.Delta_f[-1], self.Delta_r[-1]

    def time_average(self, burn_in: int = 0):
        return (
            self.B[burn_in:].mean(axis=0),
            self.Delta_f[burn_in:].mean(axis=0),
            self.Delta_r[burn_in:].mean(axis=0),
        )


def simulate_states(
    d: GradientDynamics,
    periods: int,
    stochastic: bool = False,
    seed: int = 0,
    noise: float = 0.1,
    m=None,
    n=None,
) -> Trajectory:
    """Run the base/delta recursions step by step, scalar per coordinate.

    Forget steps come first in each period. Each step updates the active
    delta against the bias-corrected base from the end of the previous step
    (``B_{t-1} / (1 - b^(t-1))``, zero at ``t = 1``) and then updates the base.
    ``m``/``n`` may be arrays to simulate independent coordinates at once;
    ``stochastic`` adds i.i.d. uniform noise of half-width ``noise * G``.
    """
    if periods < 1:
        raise ValueError(f"periods must be >= 1, got {periods}")
    m = np.asarray(d.m if m is None else m, dtype=np.float64)
    n = np.asarray(d.n if n is None else n, dtype=np.float64)
    shape = np.broadcast(m, n).shape
    mean_f = np.broadcast_to(m * d.G, shape)
    mean_r = np.broadcast_to(n * d.G, shape)
    b = d.beta
    rng = np.random.default_rng(seed) if stochastic else None
    B = np.zeros(shape)
    Df = np.zeros(shape)
    Dr = np.zeros(shape)
    out_B = np.empty((periods,) + shape)
    out_f = np.empty((periods,) + shape)
    out_r = np.empty((periods,) + shape)
    t = 0
    bt = 1.0  # b**t, carried to avoid recomputing powers
    for T in range(periods):
        for k in range(d.period):
            forget = k < d.forget_freq
            g = mean_f if forget else mean_r
            if rng is not None:
                g = g + rng.uniform(-noise * d.G, noise * d.G, size=shape)
            B_hat = B if t == 0 else B / (1.0 - bt)
            if forget:
                Df = b * Df + (1 - b) * (g - B_hat)
            else:
                Dr = b * Dr + (1 - b) * (g - B_hat)
            B = b * B + (1 - b) * g
            t += 1
            bt *= b
        out_B[T] = B
        out_f[T] = Df
        out_r[T] = Dr
    return Trajectory(out_B, out_f, out_r)


def boundary_classifier(d: GradientDynamics, tol: float) -> str:
    """``alternate_like`` if both delta limits vanish, ``dualoptim_like`` if the base does."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    lim = closed_form_limits(d)
    if abs(lim.Delta_f_inf) < tol * d.G and abs(lim.Delta_r_inf) < tol * d.G:
        return "alternate_like"
    if abs(lim.B_inf) < tol * d.G:
        return "dualoptim_like"
    return "intermediate"


def limit_error(simulated: float, expected: float, G: float = 1.0, zero_floor: float = 1e-8) -> float:
    """Relative error, falling back to absolute error (in units of G) for zero limits."""
    scale = abs(expected)
    if scale < zero_floor * max(G, 1e-300):
        return abs(simulated - expected) / max(G, 1e-300)
    return abs(simulated - expected) / scale


# -- the verification grid --------------------------------------------------

DEFAULT_BETAS = (0.5, 0.9, 0.99)
DEFAULT_FREQS = ((1, 1), (1, 5), (2, 3))
DEFAULT_MN = ((1.0, 0.0), (0.3, -0.8))


def default_grid() -> List[GradientDynamics]:
    """18 generic points plus one point on each boundary (20 in total)."""
    grid = [
        GradientDynamics(m, n, 1.0, b, ff, fr)
        for b, (ff, fr), (m, n) in itertools.product(DEFAULT_BETAS, DEFAULT_FREQS, DEFAULT_MN)
    ]
    grid.append(GradientDynamics(0.5, 0.5, 1.0, 0.9, 1, 5))
    nb = 0.4
    grid.append(GradientDynamics(negative_boundary_m(nb, 0.9, 2, 3), nb, 1.0, 0.9, 2, 3))
    return grid


def periods_needed(d: GradientDynamics, base_periods: int = 10_000, target: float = 1e-12) -> int:
    """``base_periods``, raised if the geometric rate b^P is too slow to reach ``target``."""
    rate = d.beta**d.period
    if rate <= 0.0:
        return base_periods
    need = int(np.ceil(np.log(target) / np.log(rate))) + 1
    return max(base_periods, need)


@dataclass
class GridResult:
    dynamics: GradientDynamics
    periods: int
    expected: StateLimits
    simulated: tuple
    errors: tuple
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def verify_grid(
    grid: Optional[Iterable[GradientDynamics]] = None,
    periods: int = 10_000,
    tolerance: float = 1e-6,
) -> List[GridResult]:
    results = []
    for d in grid if grid is not None else default_grid():
        P = periods_needed(d, periods)
        traj = simulate_states(d, P)
        sim = tuple(float(x) for x in traj.final())
        exp = closed_form_limits(d)
        errs = tuple(limit_error(s, e, d.G) for s, e in zip(sim, exp.as_tuple()))
        results.append(GridResult(d, P, exp, sim, errs, tolerance))
    return results


GRID_COLUMNS = (
    "beta", "forget_freq", "retain_freq", "m", "n", "G", "periods",
    "B_expected", "B_simulated", "Delta_f_expected", "Delta_f_simulated",
    "Delta_r_expected", "Delta_r_simulated", "max_error", "passed",
)


def grid_csv(results: List[GridResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    for r in results:
        d = r.dynamics
        e = r.expected.as_tuple()
        s = r.simulated
        w.writerow([
            repr(d.beta), d.forget_freq, d.retain_freq, repr(d.m), repr(d.n), repr(d.G), r.periods,
            f"{e[0]:.17g}", f"{s[0]:.17g}", f"{e[1]:.17g}", f"{s[1]:.17g}",
            f"{e[2]:.17g}", f"{s[2]:.17g}", f"{r.max_error:.17g}", int(r.passed),
        ])
    return buf.getvalue()
