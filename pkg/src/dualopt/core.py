"""EMA state machinery and the single-state optimizers (AdamW, SGD-momentum, Muon).

Every step function is functional: it returns new arrays and new
``MomentState`` objects, leaving its inputs untouched. That makes rejected
steps trivially transactional.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Tuple

import numpy as np

from .numkit import ShapeMismatchError, as_buffer, check_finite, check_same_shape

NS_COEFFICIENTS = (3.4445, -4.7750, 2.0315)
NS_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class MomentState:
    """One exponential moving average and the number of updates it has seen."""

    value: np.ndarray
    beta: float
    steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")

    @classmethod
    def zeros(cls, shape, beta: float) -> "MomentState":
        return cls(np.zeros(shape, dtype=np.float64), float(beta), 0)

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True)
class AdamWParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"Invalid learning rate: {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"Invalid {name}: {b}")
        if self.eps <= 0:
            raise ValueError(f"Invalid epsilon value: {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"Invalid weight_decay value: {self.weight_decay}")


@dataclass(frozen=True)
class MuonParams:
    lr: float = 2e-2
    momentum: float = 0.95
    ns_iterations: int = 5
    ns_coefficients: Tuple[float, float, float] = field(default=NS_COEFFICIENTS)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"Invalid learning rate: {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"Invalid momentum: {self.momentum}")
        if self.ns_iterations < 1:
            raise ValueError(f"ns_iterations must be >= 1, got {self.ns_iterations}")
        if len(self.ns_coefficients) != 3:
            raise ValueError("ns_coefficients must be a triple (a, b, c)")


def ema_update(state: MomentState, g) -> MomentState:
    """``value <- beta * value + (1 - beta) * g``; ``steps`` advances by one."""
    g = as_buffer(g)
    check_same_shape(state.value, g, "ema_update")
    b = state.beta
    return replace(state, value=b * state.value + (1.0 - b) * g, steps=state.steps + 1)


def accumulate(state: MomentState, g) -> MomentState:
    """Heavy-ball accumulation ``value <- beta * value + g`` (no ``1 - beta`` factor)."""
    g = as_buffer(g)
    check_same_shape(state.value, g, "accumulate")
    return replace(state, value=state.beta * state.value + g, steps=state.steps + 1)


def bias_correct(state: MomentState, counter: int) -> np.ndarray:
    """Return ``value / (1 - beta**counter)``."""
    if counter < 1:
        raise ValueError(f"bias correction needs counter >= 1, got {counter}")
    return state.value / (1.0 - state.beta**counter)


def adamw_direction(m_hat: np.ndarray, v_hat: np.ndarray, eps: float) -> np.ndarray:
    """Preconditioned direction ``m_hat / (sqrt(|v_hat|) + eps)``.

    The absolute value only matters when ``v_hat`` is a reconstructed,
    possibly negative, second moment; for plain AdamW it is a no-op.
    """
    return m_hat / (np.sqrt(np.abs(v_hat)) + eps)


def adamw_step(theta, g, m: MomentState, v: MomentState, p: AdamWParams, t: int):
    """One decoupled-weight-decay Adam step. Returns ``(theta, m, v)``.

    ``m`` and ``v`` carry their own betas; ``p.beta1``/``p.beta2`` are only
    used when building fresh states. Decay is applied before the moment step.
    """
    theta = as_buffer(theta)
    g = as_buffer(g)
    check_same_shape(theta, g, "adamw_step")
    check_finite(g, "gradient")
    if t < 1:
        raise ValueError(f"step counter must be >= 1, got {t}")
    m = ema_update(m, g)
    v = ema_update(v, g * g)
    theta = theta - p.lr * p.weight_decay * theta
    theta = theta - p.lr * adamw_direction(bias_correct(m, t), bias_correct(v, t), p.eps)
    check_finite(theta, "parameters after adamw_step")
    return theta, m, v


def sgd_momentum_step(theta, g, momentum: MomentState, lr: float, weight_decay: float = 0.0):
    """Heavy-ball SGD: ``buf <- beta * buf + g``; ``theta <- theta - lr * buf``."""
    theta = as_buffer(theta)
    g = as_buffer(g)
    check_same_shape(theta, g, "sgd_momentum_step")
    check_finite(g, "gradient")
    momentum = accumulate(momentum, g)
    theta = theta - lr * weight_decay * theta - lr * momentum.value
    return theta, momentum


def newton_schulz5(M, iterations: int = 5, coeffs=NS_COEFFICIENTS) -> np.ndarray:
    """Approximate the orthogonal polar factor ``U V^T`` of ``M``.

    ``X <- M / ||M||_F`` and then ``X <- a X + b X (X^T X) + c X (X^T X)^2``
    for ``iterations`` rounds. The quintic is tuned for speed, not exactness:
    singular values land roughly in [0.7, 1.2] rather than at 1.
    A matrix with Frobenius norm below 1e-12 maps to zeros.
    """
    M = as_buffer(M)
    if M.ndim != 2:
        raise ShapeMismatchError(f"newton_schulz5 needs a matrix, got shape {M.shape}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    a, b, c = coeffs
    norm = np.linalg.norm(M)
    if norm < NS_EPS:
        return np.zeros_like(M)
    # work on the wide orientation so the Gram matrix is the small one
    transposed = M.shape[0] > M.shape[1]
    X = (M.T if transposed else M) / norm
    for _ in range(iterations):
        A = X @ X.T
        B = b * A + c * (A @ A)
        X = a * X + B @ X
    return X.T if transposed else X


def muon_step(theta, g, momentum: MomentState, p: MuonParams):
    """``buf <- beta * buf + g``; ``theta <- theta - lr * NS5(buf)``. Returns ``(theta, buf)``."""
    theta = as_buffer(theta)
    g = as_buffer(g)
    if theta.ndim != 2:
        raise ShapeMismatchError(f"Muon only updates 2-D parameters, got shape {theta.shape}")
    check_same_shape(theta, g, "muon_step")
    check_finite(g, "gradient")
    momentum = accumulate(momentum, g)
    o = newton_schulz5(momentum.value, p.ns_iterations, p.ns_coefficients)
    theta = theta - p.lr * o
    check_finite(theta, "parameters after muon_step")
    return theta, momentum


def moment_items(state) -> dict:
    """Flat ``name -> MomentState`` view of a state dataclass.

    Tuple-valued fields expand to ``"field.i"`` names.
    """
    out = {}
    for f in fields(state):
        v = getattr(state, f.name)
        if isinstance(v, MomentState):
            out[f.name] = v
        elif isinstance(v, tuple) and v and all(isinstance(x, MomentState) for x in v):
            for i, x in enumerate(v):
                out[f"{f.name}.{i}"] = x
    return out


def replace_moments(state, mapping: dict):
    """Inverse of :func:`moment_items`: swap in new MomentStates by name."""
    changes = {}
    for name, ms in mapping.items():
        base, _, idx = name.partition(".")
        if idx:
            cur = list(changes.get(base, getattr(state, base)))
            cur[int(idx)] = ms
            changes[base] = tuple(cur)
        else:
            changes[base] = ms
    return replace(state, **changes)


class Optimizer:
    """Stateful wrapper over a pure ``_advance`` transition.

    Subclasses implement ``_advance(state, theta, g, objective, lr)`` returning
    ``(theta, state, direction)`` without mutating anything; ``step`` commits
    the new state only when the transition succeeds.
    """

    n_objectives = 1

    def __init__(self, state):
        self.state = state
        self.last_direction = None
        self.last_update = None

    def _advance(self, state, theta, g, objective, lr):
        raise NotImplementedError

    def step(self, theta, g, objective: int = 0, lr=None):
        new_theta, new_state, direction = self._advance(self.state, theta, g, objective, lr)
        self.state = new_state
        self.last_direction = direction
        self.last_update = as_buffer(theta) - new_theta
        return new_theta

    def check_objective(self, objective: int) -> None:
        if not 0 <= objective < self.n_objectives:
            raise ValueError(f"unknown objective id {objective!r} (have {self.n_objectives})")


@dataclass(frozen=True, eq=False)
class AdamWState:
    m: MomentState
    v: MomentState
    t: int = 0

    @classmethod
    def zeros(cls, shape, beta1: float, beta2: float) -> "AdamWState":
        return cls(MomentState.zeros(shape, beta1), MomentState.zeros(shape, beta2), 0)


@dataclass(frozen=True, eq=False)
class MuonState:
    m: MomentState
    t: int = 0


class AdamW(Optimizer):
    """Plain AdamW with a single state, fed whatever gradient arrives."""

    def __init__(self, shape, params: AdamWParams = AdamWParams()):
        self.params = params
        super().__init__(AdamWState.zeros(shape, params.beta1, params.beta2))

    def _advance(self, state, theta, g, objective, lr):
        p = self.params if lr is None else replace(self.params, lr=lr)
        t = state.t + 1
        theta, m, v = adamw_step(theta, g, state.m, state.v, p, t)
        direction = adamw_direction(bias_correct(m, t), bias_correct(v, t), p.eps)
        return theta, AdamWState(m, v, t), direction


class Muon(Optimizer):
    def __init__(self, shape, params: MuonParams = MuonParams()):
        self.params = params
        super().__init__(MuonState(MomentState.zeros(shape, params.momentum), 0))

    def _advance(self, state, theta, g, objective, lr):
        p = self.params if lr is None else replace(self.params, lr=lr)
        theta, m = muon_step(theta, g, state.m, p)
        return theta, MuonState(m, state.t + 1), m.value
