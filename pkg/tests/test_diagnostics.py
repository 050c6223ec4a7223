import numpy as np
import pytest

from dualopt.baselines import Alternate, DualOptim
from dualopt.diagnostics import SimilarityTrace, StepRecord, gradient_ema_similarity, traces_csv, update_similarity
from dualopt.dualoptim_plus import DualOptimPlus
from dualopt.schedule import AlternationSchedule
from dualopt.tasks import SyntheticStream


def run_trace(cls, stream, steps=1200, ff=1, fr=5):
    opt = cls((stream.dimension,), 2)
    sched = AlternationSchedule(ff, fr, steps)
    theta = np.zeros(stream.dimension)
    records = []
    for t in range(1, steps + 1):
        o = sched.objective_at(t)
        theta = opt.step(theta, stream.gradient(o, t), o, 1e-3)
        records.append(StepRecord(t, o, np.array(opt.last_direction), opt.last_update.copy()))
    return update_similarity(records)


def test_transition_pairs_only():
    recs = [StepRecord(t, o, np.array([1.0, float(t)])) for t, o in enumerate([0, 1, 1, 1, 0, 1], start=1)]
    tr = update_similarity(recs)
    assert tr.steps == [2, 5, 6]
    assert all(-1 <= v <= 1 for v in tr.values)


def test_requires_two_objectives():
    with pytest.raises(ValueError):
        update_similarity([StepRecord(1, 0, np.ones(2)), StepRecord(2, 0, np.ones(2))])
    with pytest.raises(ValueError):
        update_similarity([StepRecord(1, 0, np.ones(2)), StepRecord(2, 1, np.ones(2))], use="grad")


def test_alternate_equal_means_is_one():
    s = SyntheticStream(np.full(8, 0.5), np.full(8, 0.5))
    assert run_trace(Alternate, s).mean_after(200) == pytest.approx(1.0, abs=1e-12)


def test_dualoptim_opposed_means_is_minus_one():
    s = SyntheticStream(np.ones(8), -np.ones(8))
    assert run_trace(DualOptim, s).mean_after(200) == pytest.approx(-1.0, abs=1e-12)


def test_dualoptim_plus_between_on_forget_only_signal():
    # m=0.9, n=0 with noise; the noiseless m=1 stream ties DualOptim+ and DualOptim at exactly 0
    s = SyntheticStream(np.full(16, 0.9), np.zeros(16), noise=0.1, seed=0)
    alt, do, dop = (run_trace(c, s).mean_after(200) for c in (Alternate, DualOptim, DualOptimPlus))
    assert alt > dop > do


def test_gradient_ema_examples():
    rng = np.random.default_rng(0)
    g = [rng.normal(size=4) for _ in range(20)]
    assert np.allclose(gradient_ema_similarity(g, g).values, 1.0)
    assert np.allclose(gradient_ema_similarity(g, [-x for x in g]).values, -1.0)


def test_gradient_ema_rotating_crosses_zero():
    steps = np.arange(1, 401)
    w = 2 * np.pi / 100
    gf = [np.array([np.cos(w * t), np.sin(w * t)]) for t in steps]
    gr = [np.array([np.cos(w * t + np.pi / 2), np.sin(w * t + np.pi / 2)]) for t in steps]
    # a phase offset in time rather than in space: the second stream lags the first
    gr_lag = [np.array([np.cos(w * t) * np.cos(w * t), np.sin(w * t)]) for t in steps]
    vals = np.array(gradient_ema_similarity(gf, gr).values)
    assert np.allclose(vals[50:], 0.0, atol=1e-9)
    lag = np.array(gradient_ema_similarity(gf, gr_lag).values)
    assert lag.max() > 0.5 and lag.min() < 0 and np.any(np.diff(np.sign(lag)) != 0)


def test_trace_mean_and_csv():
    tr = SimilarityTrace("x")
    for t, v in [(100, 0.0), (250, 0.5), (300, -0.25)]:
        tr.append(t, v)
    assert tr.mean_after(200) == pytest.approx(0.125)
    assert np.isnan(tr.mean_after(400))
    text = traces_csv([tr])
    assert text.splitlines()[0] == "step,series,cosine"
    assert text.splitlines()[2] == "250,x,0.5"
