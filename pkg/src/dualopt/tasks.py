"""Desk-scale forget/retain problems with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

TASK_KINDS = ("conflicting_quadratic", "logistic_forget_retain", "three_task", "synthetic_stream")


def clip_to_radius(g: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if radius > 0 and norm > radius:
        return g * (radius / norm)
    return g


@dataclass
class ToyTask:
    """Objectives over a parameter of fixed ``shape``.

    ``grad(i, theta, t)`` may depend on the step ``t`` (only the synthetic
    stream does). Objective 0 is the forget objective on two-objective tasks.
    """

    kind: str
    shape: Tuple[int, ...]
    objective_names: Tuple[str, ...]
    theta0: np.ndarray
    loss_fns: Sequence[Callable]
    grad_fns: Sequence[Callable]
    info: dict = field(default_factory=dict)

    @property
    def n_objectives(self) -> int:
        return len(self.objective_names)

    def loss(self, i: int, theta) -> float:
        return float(self.loss_fns[i](np.asarray(theta)))

    def losses(self, theta) -> np.ndarray:
        return np.array([self.loss(i, theta) for i in range(self.n_objectives)])

    def grad(self, i: int, theta, t: int = 0) -> np.ndarray:
        return self.grad_fns[i](np.asarray(theta), t)


def _shape(dim, shape) -> Tuple[int, ...]:
    if shape is not None:
        return tuple(int(s) for s in shape)
    return (int(dim),)


def conflicting_quadratic(seed: int = 0, dim: int = 64, shape=None, clip_radius: float = 10.0,
                          separation: float = 1.0) -> ToyTask:
    """Retain: ``0.5 ||theta - a||^2``. Forget: ``-0.5 ||theta - b||^2`` (ascent away from ``b``).

    The forget loss is continued linearly beyond ``||theta - b|| = clip_radius``,
    so its gradient never exceeds the radius in norm. The joint minimizer of
    ``L_r + w L_f`` for ``w < 1`` inside the radius is ``(a - w b) / (1 - w)``.
    """
    shape = _shape(dim, shape)
    rng = np.random.default_rng(seed)
    a = rng.normal(size=shape)
    direction = rng.normal(size=shape)
    direction /= np.linalg.norm(direction)
    b = a + separation * direction
    theta0 = a + 0.1 * rng.normal(size=shape)
    R = float(clip_radius)

    def loss_f(theta):
        r = float(np.linalg.norm(theta - b))
        if R > 0 and r > R:
            return -(R * r - 0.5 * R * R)
        return -0.5 * r * r

    def grad_f(theta, t):
        return clip_to_radius(-(theta - b), R)

    def loss_r(theta):
        return 0.5 * float(np.sum((theta - a) ** 2))

    def grad_r(theta, t):
        return theta - a

    return ToyTask(
        "conflicting_quadratic", shape, ("forget", "retain"), theta0,
        (loss_f, loss_r), (grad_f, grad_r), {"a": a, "b": b, "clip_radius": R},
    )


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_forget_retain(seed: int = 0, dim: int = 8, samples: int = 64, clip_radius: float = 10.0) -> ToyTask:
    """Two-cluster logistic regression; forgetting ascends the loss on cluster F.

    ``theta`` holds ``dim`` weights plus a bias. Labels come from one shared
    ground-truth separator, so both clusters start well fit.
    """
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=dim + 1)
    center = rng.normal(size=dim)
    center *= 2.0 / np.linalg.norm(center)

    def cluster(mu):
        X = mu + rng.normal(size=(samples, dim))
        X = np.hstack([X, np.ones((samples, 1))])
        y = (rng.uniform(size=samples) < _sigmoid(X @ w_true)).astype(np.float64)
        return X, y

    XF, yF = cluster(center)
    XR, yR = cluster(-center)
    R = float(clip_radius)

    def ce(X, y, theta):
        z = X @ theta
        return float(np.mean(_log1pexp(z) - y * z))

    def ce_grad(X, y, theta):
        return X.T @ (_sigmoid(X @ theta) - y) / len(y)

    return ToyTask(
        "logistic_forget_retain", (dim + 1,), ("forget", "retain"), w_true.copy(),
        (lambda th: -ce(XF, yF, th), lambda th: ce(XR, yR, th)),
        (lambda th, t: clip_to_radius(-ce_grad(XF, yF, th), R), lambda th, t: ce_grad(XR, yR, th)),
        {"XF": XF, "yF": yF, "XR": XR, "yR": yR},
    )


def three_task(seed: int = 0, dim: int = 16, shape=None) -> ToyTask:
    """Three quadratic objectives ``0.5 ||theta - c_i||^2`` minimized together."""
    shape = _shape(dim, shape)
    rng = np.random.default_rng(seed)
    centers = [rng.normal(size=shape) for _ in range(3)]

    def make(c):
        return (lambda th: 0.5 * float(np.sum((th - c) ** 2))), (lambda th, t: th - c)

    pairs = [make(c) for c in centers]
    theta0 = np.zeros(shape)
    return ToyTask(
        "three_task", shape, ("task0", "task1", "task2"), theta0,
        tuple(p[0] for p in pairs), tuple(p[1] for p in pairs), {"centers": centers},
    )


@dataclass
class SyntheticStream:
    """Gradient streams whose per-coordinate time means are ``m G`` and ``n G``.

    Each gradient is ``mean + drift(t) + noise``. The drift is a component
    shared by both objectives that rotates in a random plane with period
    ``drift_period``; it averages to zero. The noise is i.i.d. uniform in
    ``[-noise G, noise G]``. ``max(|m|, |n|) + drift + noise <= 1`` keeps
    every entry within ``[-G, G]``.
    """

    m: np.ndarray
    n: np.ndarray
    G: float = 1.0
    noise: float = 0.0
    drift: float = 0.0
    drift_period: int = 50
    seed: int = 0

    def __post_init__(self):
        self.m = np.atleast_1d(np.asarray(self.m, dtype=np.float64))
        self.n = np.atleast_1d(np.asarray(self.n, dtype=np.float64))
        self.m, self.n = np.broadcast_arrays(self.m, self.n)
        self.m, self.n = self.m.copy(), self.n.copy()
        peak = float(max(np.max(np.abs(self.m)), np.max(np.abs(self.n))))
        if peak + self.drift + self.noise > 1.0 + 1e-12:
            raise ValueError(
                f"max(|m|,|n|) + drift + noise = {peak + self.drift + self.noise:.3g} exceeds 1; "
                "entries would leave [-G, G]"
            )
        rng = np.random.default_rng(self.seed)
        d = self.m.size
        basis, _ = np.linalg.qr(rng.normal(size=(d, 2))) if d >= 2 else (np.ones((1, 2)), None)
        # scale so the rotating component is at most ``drift`` per coordinate
        scale = np.max(np.hypot(basis[:, 0], basis[:, 1]))
        self._plane = basis / scale
        self._noise_seed = int(rng.integers(2**31))

    @property
    def dimension(self) -> int:
        return self.m.size

    def drift_at(self, t: int) -> np.ndarray:
        if self.drift == 0.0:
            return np.zeros(self.dimension)
        ph = 2.0 * np.pi * t / self.drift_period
        return self.drift * (np.cos(ph) * self._plane[:, 0] + np.sin(ph) * self._plane[:, 1])

    def gradient(self, objective: int, t: int) -> np.ndarray:
        mean = self.m if objective == 0 else self.n
        g = mean * self.G + self.drift_at(t) * self.G
        if self.noise > 0:
            rng = np.random.default_rng((self._noise_seed, int(t), int(objective)))
            g = g + rng.uniform(-self.noise * self.G, self.noise * self.G, size=self.dimension)
        return g


def conflicting_stream(seed: int = 0, dim: int = 16, noise: float = 0.1, drift: float = 0.45,
                       drift_period: int = 50) -> SyntheticStream:
    """Opposed objective-specific means plus a shared rotating component."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=dim)
    u *= 0.45 / np.max(np.abs(u))
    return SyntheticStream(u, -u, 1.0, noise, drift, drift_period, seed)


def synthetic_stream_task(seed: int = 0, dim: int = 16, noise: float = 0.1, drift: float = 0.45,
                          drift_period: int = 50) -> ToyTask:
    """The conflicting stream as a task: losses are linear in ``theta``."""
    stream = conflicting_stream(seed, dim, noise, drift, drift_period)
    mf, mr = stream.m * stream.G, stream.n * stream.G
    return ToyTask(
        "synthetic_stream", (stream.dimension,), ("forget", "retain"), np.zeros(stream.dimension),
        (lambda th: float(mf @ th), lambda th: float(mr @ th)),
        (lambda th, t: stream.gradient(0, t), lambda th, t: stream.gradient(1, t)),
        {"stream": stream},
    )


def make_task(kind: str, seed: int = 0, dim: Optional[int] = None, shape=None, clip_radius: float = 10.0,
              noise: float = 0.1, drift: float = 0.45, drift_period: int = 50) -> ToyTask:
    if kind == "conflicting_quadratic":
        return conflicting_quadratic(seed, dim or 64, shape, clip_radius)
    if kind == "logistic_forget_retain":
        return logistic_forget_retain(seed, dim or 8, clip_radius=clip_radius)
    if kind == "three_task":
        return three_task(seed, dim or 16, shape)
    if kind == "synthetic_stream":
        return synthetic_stream_task(seed, dim or 16, noise, drift, drift_period)
    raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
