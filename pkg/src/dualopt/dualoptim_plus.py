"""Shared base state plus per-objective delta states.

The base state is an EMA of every incoming gradient regardless of which
objective produced it. Each objective keeps a delta state: an EMA of the
residual between its gradient and the bias-corrected base. The update for
objective ``i`` is reconstructed from ``base_hat + delta_hat[i]``.

Default step order is delta update, parameter update, base update, so the
base seen by the deltas and by the parameter update always lags by one step.

AdamW mode keeps first- and second-moment base/delta pairs; the second-moment
delta tracks a signed residual and may go negative, so the denominator uses
``sqrt(|v_base_hat + v_delta_hat|)``. Muon mode keeps raw heavy-ball momenta
(no ``1 - beta`` factor, no bias correction) and orthogonalizes
``base + delta[i]`` with Newton-Schulz.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import numpy as np

from .core import (
    AdamWParams,
    MomentState,
    MuonParams,
    Optimizer,
    accumulate,
    adamw_direction,
    bias_correct,
    ema_update,
    newton_schulz5,
)
from .numkit import ShapeMismatchError, as_buffer, check_finite, check_same_shape

BASE_TIMINGS = ("before_delta", "after_delta", "after_param")
BASE_INPUTS = ("grad", "grad_minus_delta")


@dataclass(frozen=True, eq=False)
class DualState:
    mode: str
    params: Union[AdamWParams, MuonParams]
    base_m: MomentState
    base_v: Optional[MomentState]
    delta_m: Tuple[MomentState, ...]
    delta_v: Optional[Tuple[MomentState, ...]]
    counters: Tuple[int, ...]
    t: int = 0
    base_update_timing: str = "after_param"
    base_update_input: str = "grad"

    @property
    def n_objectives(self) -> int:
        return len(self.delta_m)

    @property
    def shape(self):
        return self.base_m.shape

    # Base only changes inside base_update, so the bias-corrected base as of
    # the last completed base update is a pure function of (base, t).
    @property
    def cached_base_m_hat(self) -> np.ndarray:
        if self.mode == "muon" or self.t == 0:
            return self.base_m.value
        return bias_correct(self.base_m, self.t)

    @property
    def cached_base_v_hat(self) -> Optional[np.ndarray]:
        if self.base_v is None:
            return None
        if self.t == 0:
            return self.base_v.value
        return bias_correct(self.base_v, self.t)

    def delta_m_hat(self, objective: int) -> np.ndarray:
        return _corrected(self.delta_m[objective], self.counters[objective], self.mode)

    def delta_v_hat(self, objective: int) -> np.ndarray:
        return _corrected(self.delta_v[objective], self.counters[objective], self.mode)


def _corrected(state: MomentState, counter: int, mode: str) -> np.ndarray:
    if mode == "muon" or counter == 0:
        return state.value
    return bias_correct(state, counter)


def init_dual_state(
    shape,
    n_objectives: int = 2,
    mode: str = "adamw",
    params=None,
    base_betas=None,
    delta_betas=None,
    base_update_timing: str = "after_param",
    base_update_input: str = "grad",
) -> DualState:
    """Zero-initialized state for ``n_objectives`` objectives.

    ``base_betas``/``delta_betas`` override the betas of ``params`` for the base
    or delta states separately (``(beta1, beta2)`` in AdamW mode, a single
    momentum in Muon mode).
    """
    if mode not in ("adamw", "muon"):
        raise ValueError(f"mode must be 'adamw' or 'muon', got {mode!r}")
    if n_objectives < 1:
        raise ValueError(f"n_objectives must be >= 1, got {n_objectives}")
    if base_update_timing not in BASE_TIMINGS:
        raise ValueError(f"base_update_timing must be one of {BASE_TIMINGS}, got {base_update_timing!r}")
    if base_update_input not in BASE_INPUTS:
        raise ValueError(f"base_update_input must be one of {BASE_INPUTS}, got {base_update_input!r}")
    shape = tuple(shape)
    if mode == "muon":
        params = params or MuonParams()
        if len(shape) != 2:
            raise ShapeMismatchError(f"Muon mode needs a 2-D parameter, got shape {shape}")
        bb = params.momentum if base_betas is None else float(np.atleast_1d(base_betas)[0])
        db = params.momentum if delta_betas is None else float(np.atleast_1d(delta_betas)[0])
        return DualState(
            mode, params,
            MomentState.zeros(shape, bb), None,
            tuple(MomentState.zeros(shape, db) for _ in range(n_objectives)), None,
            (0,) * n_objectives, 0, base_update_timing, base_update_input,
        )
    params = params or AdamWParams()
    bb1, bb2 = base_betas if base_betas is not None else (params.beta1, params.beta2)
    db1, db2 = delta_betas if delta_betas is not None else (params.beta1, params.beta2)
    return DualState(
        mode, params,
        MomentState.zeros(shape, bb1), MomentState.zeros(shape, bb2),
        tuple(MomentState.zeros(shape, db1) for _ in range(n_objectives)),
        tuple(MomentState.zeros(shape, db2) for _ in range(n_objectives)),
        (0,) * n_objectives, 0, base_update_timing, base_update_input,
    )


def _check_objective(state: DualState, objective: int) -> None:
    if not (isinstance(objective, (int, np.integer)) and 0 <= objective < state.n_objectives):
        raise ValueError(f"unknown objective id {objective!r} (have {state.n_objectives})")


def base_update(state: DualState, g, objective: Optional[int] = None) -> DualState:
    """Fold ``g`` into the base state and advance the global counter.

    With ``base_update_input='grad_minus_delta'`` the input is ``g`` minus the
    active objective's bias-corrected delta, which needs ``objective``.
    """
    g = as_buffer(g)
    check_same_shape(state.base_m.value, g, "base_update")
    g_m = g
    g_v = g * g
    if state.base_update_input == "grad_minus_delta":
        if objective is None:
            raise ValueError("base_update_input='grad_minus_delta' needs the active objective")
        _check_objective(state, objective)
        g_m = g - state.delta_m_hat(objective)
        if state.mode == "adamw":
            g_v = g_v - state.delta_v_hat(objective)
    if state.mode == "muon":
        return replace(state, base_m=accumulate(state.base_m, g_m), t=state.t + 1)
    return replace(
        state,
        base_m=ema_update(state.base_m, g_m),
        base_v=ema_update(state.base_v, g_v),
        t=state.t + 1,
    )


def delta_update(state: DualState, objective: int, g) -> DualState:
    """EMA of the residual ``g - base_hat`` into ``objective``'s delta state."""
    _check_objective(state, objective)
    g = as_buffer(g)
    check_same_shape(state.base_m.value, g, "delta_update")
    counters = list(state.counters)
    counters[objective] += 1
    dm = list(state.delta_m)
    if state.mode == "muon":
        dm[objective] = accumulate(dm[objective], g - state.base_m.value)
        return replace(state, delta_m=tuple(dm), counters=tuple(counters))
    dv = list(state.delta_v)
    dm[objective] = ema_update(dm[objective], g - state.cached_base_m_hat)
    dv[objective] = ema_update(dv[objective], g * g - state.cached_base_v_hat)
    return replace(state, delta_m=tuple(dm), delta_v=tuple(dv), counters=tuple(counters))


def reconstructed_momentum(state: DualState, objective: int) -> np.ndarray:
    """``base_hat + delta_hat[objective]``: the momentum the update is built from."""
    return state.cached_base_m_hat + state.delta_m_hat(objective)


def update_direction(state: DualState, objective: int) -> np.ndarray:
    """Pre-learning-rate update direction for ``objective`` (decay excluded)."""
    m = reconstructed_momentum(state, objective)
    if state.mode == "muon":
        p = state.params
        return newton_schulz5(m, p.ns_iterations, p.ns_coefficients)
    v = state.cached_base_v_hat + state.delta_v_hat(objective)
    return adamw_direction(m, v, state.params.eps)


def parameter_update(theta, state: DualState, objective: int, lr: Optional[float] = None) -> np.ndarray:
    """Apply the reconstructed update for ``objective`` to ``theta``."""
    _check_objective(state, objective)
    theta = as_buffer(theta)
    check_same_shape(state.base_m.value, theta, "parameter_update")
    if state.counters[objective] == 0:
        raise ValueError("parameter_update before any delta_update for this objective")
    lr = state.params.lr if lr is None else lr
    if state.mode == "adamw":
        theta = theta - lr * state.params.weight_decay * theta
    new_theta = theta - lr * update_direction(state, objective)
    check_finite(new_theta, f"parameters after step (t={state.t}, objective={objective})")
    return new_theta


def dualoptim_plus_step(theta, g, objective: int, state: DualState, lr: Optional[float] = None):
    """One full step. Returns ``(theta, state)``; inputs are never modified.

    The order of the three sub-updates follows ``state.base_update_timing``:
    ``after_param`` (default) is delta, parameter, base; ``before_delta`` is
    base, delta, parameter; ``after_delta`` is delta, base, parameter.
    """
    theta, state, _ = _step(theta, g, objective, state, lr)
    return theta, state


def _step(theta, g, objective, state, lr):
    _check_objective(state, objective)
    theta = as_buffer(theta)
    g = as_buffer(g)
    check_same_shape(theta, g, "dualoptim_plus_step")
    check_finite(g, "gradient")
    timing = state.base_update_timing
    if timing == "before_delta":
        state = base_update(state, g, objective)
        state = delta_update(state, objective, g)
    elif timing == "after_delta":
        state = delta_update(state, objective, g)
        state = base_update(state, g, objective)
    else:
        state = delta_update(state, objective, g)
    direction = reconstructed_momentum(state, objective)
    theta = parameter_update(theta, state, objective, lr)
    if timing == "after_param":
        state = base_update(state, g, objective)
    return theta, state, direction


class DualOptimPlus(Optimizer):
    """Stateful front end over :func:`dualoptim_plus_step`.

    ``last_direction`` holds the reconstructed momentum the last parameter
    update was built from; ``last_update`` the applied parameter change.
    """

    def __init__(self, shape, n_objectives: int = 2, mode: str = "adamw", params=None, **kwargs):
        self.n_objectives = n_objectives
        super().__init__(init_dual_state(shape, n_objectives, mode, params, **kwargs))

    @property
    def params(self):
        return self.state.params

    def _advance(self, state, theta, g, objective, lr):
        return _step(theta, g, objective, state, lr)
