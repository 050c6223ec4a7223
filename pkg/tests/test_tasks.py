import numpy as np
import pytest

from dualopt.core import AdamW, AdamWParams
from dualopt.harness import RunConfig, build_optimizer
from dualopt.schedule import AlternationSchedule, LrSchedule
from dualopt.tasks import (
    SyntheticStream,
    conflicting_quadratic,
    conflicting_stream,
    logistic_forget_retain,
    make_task,
    three_task,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("kind", ["conflicting_quadratic", "logistic_forget_retain", "three_task", "synthetic_stream"])
def test_gradients_match_losses(kind, rng):
    task = make_task(kind, seed=3, dim=6)
    theta = task.theta0 + 0.3 * rng.normal(size=task.shape)
    for i in range(task.n_objectives):
        if kind == "synthetic_stream":
            # the loss is linear in the mean gradient; sampled gradients add drift and noise
            stream = task.info["stream"]
            expected = stream.m if i == 0 else stream.n
        else:
            expected = task.grad(i, theta, 0)
        np.testing.assert_allclose(expected, numeric_grad(lambda th: task.loss(i, th), theta), atol=1e-6)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_task("mnist", 0)


def test_quadratic_trust_region():
    task = conflicting_quadratic(0, 8, clip_radius=2.0)
    b = task.info["b"]
    far = b + 10 * np.ones(8)
    assert np.linalg.norm(task.grad(0, far)) == pytest.approx(2.0)
    r = np.linalg.norm(far - b)
    assert task.loss(0, far) == pytest.approx(-(2.0 * r - 2.0))
    np.testing.assert_allclose(task.grad(0, far), numeric_grad(lambda th: task.loss(0, th), far), atol=1e-5)


@pytest.mark.parametrize("w", [0.0, 0.3, 0.6])
def test_quadratic_joint_minimizer(w):
    task = conflicting_quadratic(1, 8)
    a, b = task.info["a"], task.info["b"]
    star = (a - w * b) / (1 - w)
    g = task.grad(1, star) + w * task.grad(0, star)
    assert np.max(np.abs(g)) < 1e-12


def test_aligned_quadratic_alternating_methods_converge():
    # a = b: the retain minimizer is the only stable point for the alternating schemes.
    # Joint's two gradients cancel exactly here and FedCM's merged base keeps growing; see the notes.
    task = conflicting_quadratic(0, 64, separation=0.0)
    a = task.info["a"]
    start = np.linalg.norm(task.theta0 - a)
    for method in ("alternate", "dualoptim", "dualoptim_plus", "scaffold", "local_adam"):
        opt = build_optimizer(RunConfig(method=method), task.shape, 2)
        sched, lrs = AlternationSchedule(1, 5, 300), LrSchedule(1e-2, 300, 60)
        theta = task.theta0.copy()
        for t in range(1, 301):
            o = sched.objective_at(t)
            theta = opt.step(theta, task.grad(o, theta), o, lrs.lr_at(t))
        assert np.linalg.norm(theta - a) < 0.1 * start, method


def test_logistic_retain_only_monotone():
    task = logistic_forget_retain(0)
    opt = AdamW(task.shape, AdamWParams(lr=1e-3))
    theta = task.theta0.copy()
    losses = [task.loss(1, theta)]
    for _ in range(300):
        theta = opt.step(theta, task.grad(1, theta))
        losses.append(task.loss(1, theta))
    assert np.all(np.diff(losses) <= 0)


def test_logistic_forget_is_negated_cluster_loss():
    task = logistic_forget_retain(0)
    XF, yF = task.info["XF"], task.info["yF"]
    z = XF @ task.theta0
    ce = np.mean(np.logaddexp(0, z) - yF * z)
    assert task.loss(0, task.theta0) == pytest.approx(-ce)


def test_three_task_shape():
    task = three_task(0, 16)
    assert task.n_objectives == 3 and task.shape == (16,)
    assert task.objective_names == ("task0", "task1", "task2")


def test_stream_means_and_bounds():
    m = np.linspace(-0.4, 0.4, 8)
    s = SyntheticStream(m, -m, G=2.0, noise=0.1, drift=0.5, drift_period=50, seed=0)
    gf = np.array([s.gradient(0, t) for t in range(1, 20_001)])
    gr = np.array([s.gradient(1, t) for t in range(1, 20_001)])
    assert np.all(np.abs(gf) <= 2.0) and np.all(np.abs(gr) <= 2.0)
    np.testing.assert_allclose(gf.mean(axis=0), 2.0 * m, atol=0.01)
    np.testing.assert_allclose(gr.mean(axis=0), -2.0 * m, atol=0.01)


def test_stream_rejects_unbounded_mix():
    with pytest.raises(ValueError):
        SyntheticStream(np.ones(3), np.zeros(3), noise=0.1)


def test_stream_is_deterministic_and_shared_drift():
    s1, s2 = conflicting_stream(5), conflicting_stream(5)
    assert np.array_equal(s1.gradient(0, 17), s2.gradient(0, 17))
    s = conflicting_stream(5, noise=0.0)
    # with no noise the two objectives differ only by their fixed means
    np.testing.assert_allclose(s.gradient(0, 9) - s.gradient(1, 9), s.m - s.n)
