"""Reference updating schemes: Joint, Alternate, DualOptim and the
base/delta rules borrowed from federated learning (SCAFFOLD/MIME, FedCM,
Local Adam) adapted to alternating objectives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import (
    AdamW,
    AdamWParams,
    AdamWState,
    MomentState,
    Muon,
    MuonParams,
    Optimizer,
    adamw_direction,
    adamw_step,
    bias_correct,
    ema_update,
    muon_step,
)
from .numkit import as_buffer, check_finite, check_same_shape

METHODS = ("joint", "alternate", "dualoptim", "dualoptim_plus", "scaffold", "fedcm", "local_adam")
FL_KINDS = ("scaffold", "fedcm", "local_adam")


# -- Joint ------------------------------------------------------------------


def joint_step(theta, g_f, g_r, state: AdamWState, p: AdamWParams, forget_weight: float = 1.0):
    """A single AdamW step on ``forget_weight * g_f + g_r``. Returns ``(theta, state)``."""
    g_f = as_buffer(g_f)
    g_r = as_buffer(g_r)
    check_same_shape(g_f, g_r, "joint_step")
    t = state.t + 1
    theta, m, v = adamw_step(theta, forget_weight * g_f + g_r, state.m, state.v, p, t)
    return theta, AdamWState(m, v, t)


class Joint(Optimizer):
    """Sums every objective's gradient and feeds one shared optimizer.

    ``step`` takes a sequence of per-objective gradients; ``weights`` scales
    each of them (default all ones).
    """

    def __init__(self, shape, mode="adamw", params=None, weights: Optional[Sequence[float]] = None):
        self.inner = Muon(shape, params or MuonParams()) if mode == "muon" else AdamW(shape, params or AdamWParams())
        self.params = self.inner.params
        self.weights = None if weights is None else tuple(float(w) for w in weights)
        super().__init__(self.inner.state)

    def combine(self, grads) -> np.ndarray:
        grads = [as_buffer(g) for g in grads]
        for g in grads[1:]:
            check_same_shape(grads[0], g, "joint gradients")
        weights = self.weights or (1.0,) * len(grads)
        if len(weights) != len(grads):
            raise ValueError(f"got {len(grads)} gradients for {len(weights)} weights")
        total = weights[0] * grads[0]
        for w, g in zip(weights[1:], grads[1:]):
            total = total + w * g
        return total

    def _advance(self, state, theta, grads, objective, lr):
        return self.inner._advance(state, theta, self.combine(grads), 0, lr)


# -- Alternate --------------------------------------------------------------


def alternate_step(theta, g, objective: int, state: AdamWState, p: AdamWParams):
    """Shared AdamW state fed the active objective's gradient; ``objective`` is ignored."""
    t = state.t + 1
    theta, m, v = adamw_step(theta, g, state.m, state.v, p, t)
    return theta, AdamWState(m, v, t)


class Alternate(Optimizer):
    def __init__(self, shape, n_objectives: int = 2, mode="adamw", params=None):
        self.n_objectives = n_objectives
        self.inner = Muon(shape, params or MuonParams()) if mode == "muon" else AdamW(shape, params or AdamWParams())
        self.params = self.inner.params
        super().__init__(self.inner.state)

    def _advance(self, state, theta, g, objective, lr):
        self.check_objective(objective)
        return self.inner._advance(state, theta, g, objective, lr)


# -- DualOptim --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecoupledState:
    """One independent optimizer state per objective (``v`` is None for Muon)."""

    m: Tuple[MomentState, ...]
    v: Optional[Tuple[MomentState, ...]]
    counters: Tuple[int, ...]

    @classmethod
    def zeros(cls, shape, n_objectives, beta1, beta2=None):
        m = tuple(MomentState.zeros(shape, beta1) for _ in range(n_objectives))
        v = None if beta2 is None else tuple(MomentState.zeros(shape, beta2) for _ in range(n_objectives))
        return cls(m, v, (0,) * n_objectives)


def dualoptim_step(theta, g, objective: int, state: DecoupledState, p: AdamWParams):
    """AdamW against ``objective``'s own state; other objectives' states are untouched."""
    if not 0 <= objective < len(state.m):
        raise ValueError(f"unknown objective id {objective!r}")
    t = state.counters[objective] + 1
    theta, m, v = adamw_step(theta, g, state.m[objective], state.v[objective], p, t)
    return theta, _set(state, objective, m, v, t)


def _set(state: DecoupledState, i: int, m, v, t) -> DecoupledState:
    ms = list(state.m)
    ms[i] = m
    counters = list(state.counters)
    counters[i] = t
    vs = state.v
    if v is not None:
        vs = list(vs)
        vs[i] = v
        vs = tuple(vs)
    return DecoupledState(tuple(ms), vs, tuple(counters))


class DualOptim(Optimizer):
    def __init__(self, shape, n_objectives: int = 2, mode="adamw", params=None):
        self.n_objectives = n_objectives
        self.mode = mode
        if mode == "muon":
            self.params = params or MuonParams()
            state = DecoupledState.zeros(shape, n_objectives, self.params.momentum)
        else:
            self.params = params or AdamWParams()
            state = DecoupledState.zeros(shape, n_objectives, self.params.beta1, self.params.beta2)
        super().__init__(state)

    def _advance(self, state, theta, g, objective, lr):
        self.check_objective(objective)
        p = self.params if lr is None else replace(self.params, lr=lr)
        if self.mode == "muon":
            t = state.counters[objective] + 1
            theta, m = muon_step(theta, g, state.m[objective], p)
            return theta, _set(state, objective, m, None, t), m.value
        theta, state = dualoptim_step(theta, g, objective, state, p)
        t = state.counters[objective]
        direction = bias_correct(state.m[objective], t)
        return theta, state, direction


# -- FL-adapted variants ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class FLState:
    """Base + per-objective deltas with a periodic merge into the base."""

    base_m: MomentState
    base_v: MomentState
    delta_m: Tuple[MomentState, ...]
    delta_v: Tuple[MomentState, ...]
    counters: Tuple[int, ...]
    t: int = 0
    merges: int = 0

    @classmethod
    def zeros(cls, shape, n_objectives, beta1, beta2):
        return cls(
            MomentState.zeros(shape, beta1),
            MomentState.zeros(shape, beta2),
            tuple(MomentState.zeros(shape, beta1) for _ in range(n_objectives)),
            tuple(MomentState.zeros(shape, beta2) for _ in range(n_objectives)),
            (0,) * n_objectives,
        )


def _hat(state: MomentState, counter: int) -> np.ndarray:
    return state.value if counter == 0 else bias_correct(state, counter)


def _fl_delta_step(theta, g, objective, state: FLState, p: AdamWParams, kind: str, period: int):
    n = len(state.delta_m)
    counters = list(state.counters)
    counters[objective] += 1
    dm, dv = list(state.delta_m), list(state.delta_v)
    if kind == "scaffold":
        dm[objective] = ema_update(dm[objective], g - state.base_m.value)
        dv[objective] = ema_update(dv[objective], g * g - state.base_v.value)
    else:
        dm[objective] = ema_update(dm[objective], g)
        dv[objective] = ema_update(dv[objective], g * g)
    k = counters[objective]
    m = state.base_m.value + bias_correct(dm[objective], k)
    v = state.base_v.value + bias_correct(dv[objective], k)
    direction = adamw_direction(m, v, p.eps)
    theta = theta - p.lr * p.weight_decay * theta
    theta = theta - p.lr * direction
    t = state.t + 1
    base_m, base_v, merges = state.base_m, state.base_v, state.merges
    if t % period == 0:
        mean_m = sum(_hat(dm[i], counters[i]) for i in range(n)) / n
        mean_v = sum(_hat(dv[i], counters[i]) for i in range(n)) / n
        base_m = replace(base_m, value=base_m.value + mean_m, steps=base_m.steps + 1)
        base_v = replace(base_v, value=base_v.value + mean_v, steps=base_v.steps + 1)
        merges += 1
    new_state = FLState(base_m, base_v, tuple(dm), tuple(dv), tuple(counters), t, merges)
    return theta, new_state, m


@dataclass(frozen=True, eq=False)
class LocalAdamState:
    """Per-objective AdamW states plus the global step used to find period ends."""

    m: Tuple[MomentState, ...]
    v: Tuple[MomentState, ...]
    counters: Tuple[int, ...]
    t: int = 0

    @classmethod
    def zeros(cls, shape, n_objectives, beta1, beta2):
        d = DecoupledState.zeros(shape, n_objectives, beta1, beta2)
        return cls(d.m, d.v, d.counters, 0)


def _local_adam_step(theta, g, objective, state: LocalAdamState, p: AdamWParams, period: int):
    theta, d = dualoptim_step(theta, g, objective, DecoupledState(state.m, state.v, state.counters), p)
    direction = bias_correct(d.m[objective], d.counters[objective])
    m, v = d.m, d.v
    t = state.t + 1
    if t % period == 0:
        n = len(m)
        mean_m = sum(s.value for s in m) / n
        mean_v = sum(s.value for s in v) / n
        m = tuple(replace(s, value=mean_m.copy()) for s in m)
        v = tuple(replace(s, value=mean_v.copy()) for s in v)
    return theta, LocalAdamState(m, v, d.counters, t), direction


def fl_adapted_step(theta, g, objective: int, state, kind: str, period: int, p: AdamWParams):
    """One step of an FL-adapted variant. Returns ``(theta, state)``.

    ``scaffold``: ``delta <- beta delta + (1 - beta)(g - base)``;
    ``fedcm``: ``delta <- beta delta + (1 - beta) g``. Both merge
    ``base <- base + mean_i(delta_hat_i)`` once per period and update with
    ``(base + delta_hat) / (sqrt(|v_base + v_delta_hat|) + eps)``.
    ``local_adam``: per-objective AdamW states (a ``LocalAdamState``)
    averaged at each period end.
    """
    theta, state, _ = _fl_step(theta, g, objective, state, kind, period, p)
    return theta, state


def _fl_step(theta, g, objective, state, kind, period, p):
    if kind not in FL_KINDS:
        raise ValueError(f"unknown FL-adapted kind {kind!r}; expected one of {FL_KINDS}")
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    theta = as_buffer(theta)
    g = as_buffer(g)
    check_same_shape(theta, g, kind)
    check_finite(g, "gradient")
    n = len(state.m) if kind == "local_adam" else len(state.delta_m)
    if not 0 <= objective < n:
        raise ValueError(f"unknown objective id {objective!r} (have {n})")
    if kind == "local_adam":
        theta, new_state, direction = _local_adam_step(theta, g, objective, state, p, period)
    else:
        theta, new_state, direction = _fl_delta_step(theta, g, objective, state, p, kind, period)
    check_finite(theta, f"parameters after {kind} step")
    return theta, new_state, direction


class FLAdapted(Optimizer):
    def __init__(self, shape, kind: str, period: int, n_objectives: int = 2, params=None):
        if kind not in FL_KINDS:
            raise ValueError(f"unknown FL-adapted kind {kind!r}; expected one of {FL_KINDS}")
        self.kind = kind
        self.period = int(period)
        self.n_objectives = n_objectives
        self.params = params or AdamWParams()
        b1, b2 = self.params.beta1, self.params.beta2
        if kind == "local_adam":
            state = LocalAdamState.zeros(shape, n_objectives, b1, b2)
        else:
            state = FLState.zeros(shape, n_objectives, b1, b2)
        super().__init__(state)

    def _advance(self, state, theta, g, objective, lr):
        self.check_objective(objective)
        p = self.params if lr is None else replace(self.params, lr=lr)
        return _fl_step(theta, g, objective, state, self.kind, self.period, p)
