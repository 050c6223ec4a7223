from dataclasses import replace

import numpy as np
import pytest

from dualopt.core import AdamW, AdamWParams, MomentState, MuonParams, moment_items, newton_schulz5
from dualopt.diagnostics import StepRecord, update_similarity
from dualopt.dualoptim_plus import (
    DualOptimPlus,
    base_update,
    delta_update,
    dualoptim_plus_step,
    init_dual_state,
    parameter_update,
    reconstructed_momentum,
)
from dualopt.numkit import NonFiniteError, ShapeMismatchError
from dualopt.schedule import AlternationSchedule
from dualopt.theory import GradientDynamics, closed_form_limits

NO_DECAY = AdamWParams(lr=1e-3, weight_decay=0.0)


def feed(opt, grads_by_objective, ff, fr, periods, lr=1e-3):
    """Step through whole periods with gradients that ignore theta."""
    sched = AlternationSchedule(ff, fr, periods * (ff + fr))
    theta = np.zeros(opt.state.shape)
    for t in range(1, periods * (ff + fr) + 1):
        o = sched.objective_at(t)
        theta = opt.step(theta, grads_by_objective[o], o, lr)
    return theta


def test_base_update_first_call():
    s = base_update(init_dual_state((1,)), np.array([1.0]))
    assert s.base_m.value[0] == pytest.approx(0.1)
    assert s.cached_base_m_hat[0] == pytest.approx(1.0)
    assert s.t == 1


def test_base_limit_alternating_signs():
    opt = DualOptimPlus((1,), 2, params=NO_DECAY)
    feed(opt, [np.array([1.0]), np.array([-1.0])], 1, 1, 5000)
    assert opt.state.base_m.value[0] == pytest.approx((0.09 - 0.1) / 0.19, abs=1e-10)


def test_base_decays_under_zero_gradient():
    s = base_update(init_dual_state((2,)), np.array([1.0, -2.0]))
    for _ in range(400):
        s = base_update(s, np.zeros(2))
    assert np.all(np.abs(s.base_m.value) < 1e-15)


def test_delta_first_step_uses_zero_base():
    s = delta_update(init_dual_state((1,)), 0, np.array([2.0]))
    assert s.delta_m[0].value[0] == pytest.approx(0.2)
    assert s.counters == (1, 0) and s.t == 0


def test_unknown_objective_rejected():
    s = init_dual_state((1,))
    for bad in (-1, 2, 0.5):
        with pytest.raises(ValueError):
            delta_update(s, bad, np.ones(1))


def test_identical_streams_deltas_vanish():
    g = np.array([0.7, -0.3, 1.5])
    opt = DualOptimPlus((3,), 2, params=NO_DECAY)
    feed(opt, [g, g], 1, 5, 500)
    for d in opt.state.delta_m:
        assert np.all(np.abs(d.value) <= 1e-6 * np.abs(g))
    np.testing.assert_allclose(opt.state.cached_base_m_hat, g, rtol=1e-9)


def test_delta_limits_match_closed_form():
    # the optimizer's own states reproduce the closed-form limits (beta = beta1 = 0.9)
    opt = DualOptimPlus((1,), 2, params=replace(NO_DECAY, beta1=0.9))
    feed(opt, [np.array([1.0]), np.array([0.0])], 1, 5, 2000)
    lim = closed_form_limits(GradientDynamics(1.0, 0.0, 1.0, 0.9, 1, 5))
    assert opt.state.base_m.value[0] == pytest.approx(lim.B_inf, rel=1e-9)
    assert opt.state.delta_m[0].value[0] == pytest.approx(lim.Delta_f_inf, rel=1e-9)
    assert opt.state.delta_m[1].value[0] == pytest.approx(lim.Delta_r_inf, rel=1e-9)
    # with n = 0 and F_f = 1 the forget reconstruction is exact: B + Delta_f = m G
    assert lim.B_inf + lim.Delta_f_inf == pytest.approx(1.0, abs=1e-15)
    assert lim.Delta_r_inf == pytest.approx(-0.170966, abs=1e-6)


def test_first_parameter_update():
    p = AdamWParams(lr=0.05, weight_decay=0.0)
    theta, _ = dualoptim_plus_step(np.zeros(1), np.array([3.0]), 0, init_dual_state((1,), params=p))
    assert theta[0] == pytest.approx(-0.05 * 3 / (3 + 1e-8), rel=1e-14)


def test_parameter_update_needs_delta_first():
    with pytest.raises(ValueError):
        parameter_update(np.zeros(1), init_dual_state((1,)), 0)


def test_negative_second_moment_sum_uses_abs():
    s = init_dual_state((2,), params=replace(NO_DECAY, lr=0.1))
    s = base_update(s, np.array([1.0, 1.0]))
    s = delta_update(s, 1, np.array([1.0, 1.0]))
    s = replace(s, delta_v=(s.delta_v[0], replace(s.delta_v[1], value=np.array([-50.0, -0.5]))))
    v = s.cached_base_v_hat + s.delta_v_hat(1)
    assert v[0] < 0
    theta = parameter_update(np.zeros(2), s, 1)
    assert np.all(np.isfinite(theta))
    expected = -0.1 * reconstructed_momentum(s, 1) / (np.sqrt(np.abs(v)) + 1e-8)
    np.testing.assert_allclose(theta, expected, rtol=1e-14)


def test_default_order_uses_stale_base():
    s = init_dual_state((1,), params=NO_DECAY)
    theta = np.zeros(1)
    theta, s = dualoptim_plus_step(theta, np.array([1.0]), 0, s)
    stale = s.cached_base_m_hat.copy()
    g = np.array([-2.0])
    theta2, s2 = dualoptim_plus_step(theta, g, 1, s)
    expected = (1 - 0.9) * (g - stale)
    np.testing.assert_allclose(s2.delta_m[1].value, expected, rtol=1e-15)
    # and the base this step produced is not the one the update used
    assert not np.allclose(s2.cached_base_m_hat, stale)


def test_timing_variants_change_order():
    g1, g2 = np.array([1.0]), np.array([-3.0])
    results = {}
    for timing in ("before_delta", "after_delta", "after_param"):
        s = init_dual_state((1,), params=NO_DECAY, base_update_timing=timing)
        th, s = dualoptim_plus_step(np.zeros(1), g1, 0, s)
        th, s = dualoptim_plus_step(th, g2, 1, s)
        results[timing] = (th[0], s.delta_m[1].value[0])
    # after_delta and after_param share delta inputs but differ in the base used by the update
    assert results["after_delta"][1] == results["after_param"][1]
    assert results["after_delta"][0] != results["after_param"][0]
    assert results["before_delta"][1] != results["after_param"][1]


def test_base_input_grad_minus_delta():
    s = init_dual_state((1,), params=NO_DECAY, base_update_input="grad_minus_delta")
    s = delta_update(s, 0, np.array([2.0]))
    s2 = base_update(s, np.array([2.0]), 0)
    assert s2.base_m.value[0] == pytest.approx(0.1 * (2.0 - s.delta_m_hat(0)[0]))
    with pytest.raises(ValueError):
        base_update(s, np.array([2.0]))


def test_three_objectives_counter_invariant():
    opt = DualOptimPlus((2,), 3, params=NO_DECAY)
    theta = np.zeros(2)
    rng = np.random.default_rng(0)
    for t in range(1, 61):
        o = (t - 1) % 3
        theta = opt.step(theta, rng.normal(size=2), o)
        assert opt.state.t == sum(opt.state.counters)
    assert opt.state.counters == (20, 20, 20)
    assert len(opt.state.delta_m) == len(opt.state.delta_v) == 3


def test_single_objective_converges_to_adamw():
    g = np.array([0.8, -1.2])
    do = DualOptimPlus((2,), 1, params=NO_DECAY)
    ad = AdamW((2,), NO_DECAY)
    th_do = th_ad = np.zeros(2)
    diffs = []
    for t in range(1, 1001):
        new_do = do.step(th_do, g, 0)
        new_ad = ad.step(th_ad, g, 0)
        diffs.append(np.max(np.abs((new_do - th_do) - (new_ad - th_ad))))
        th_do, th_ad = new_do, new_ad
    assert diffs[1] > 1e-6  # early steps provably differ
    assert diffs[-1] < 1e-6


def test_second_step_reconstruction():
    s = init_dual_state((1,), n_objectives=1, params=NO_DECAY)
    g = np.array([1.0])
    _, s = dualoptim_plus_step(np.zeros(1), g, 0, s)
    s = delta_update(s, 0, g)
    assert reconstructed_momentum(s, 0)[0] == pytest.approx((1 + 2 * 0.9) / (1 + 0.9), rel=1e-14)


def test_rejected_step_is_transactional():
    opt = DualOptimPlus((3,), 2, params=NO_DECAY)
    theta = opt.step(np.zeros(3), np.ones(3), 0)
    snap = {k: (v.value.copy(), v.steps) for k, v in _moments(opt.state).items()}
    counters, t, state_obj = opt.state.counters, opt.state.t, opt.state
    for bad_g, bad_obj, exc in [
        (np.array([1.0, np.nan, 0.0]), 1, NonFiniteError),
        (np.ones(3), 5, ValueError),
        (np.ones(2), 1, ShapeMismatchError),
    ]:
        with pytest.raises(exc):
            opt.step(theta, bad_g, bad_obj)
        assert opt.state is state_obj
        assert opt.state.counters == counters and opt.state.t == t
        for k, v in _moments(opt.state).items():
            assert np.array_equal(v.value, snap[k][0]) and v.steps == snap[k][1]


def test_overflowing_update_rejected_without_mutation():
    opt = DualOptimPlus((1,), 2, params=AdamWParams(lr=1e308, weight_decay=0.0))
    theta = np.array([1e308])
    state = opt.state
    with pytest.raises(NonFiniteError, match="parameters"):
        with np.errstate(over="ignore"):
            opt.step(theta, np.array([-1.0]), 0)
    assert opt.state is state


def _moments(state):
    return moment_items(state)


def test_muon_mode_step_by_hand(rng):
    p = MuonParams(lr=0.1, momentum=0.9)
    s = init_dual_state((3, 3), mode="muon", params=p)
    g1, g2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    th, s = dualoptim_plus_step(np.zeros((3, 3)), g1, 0, s)
    np.testing.assert_allclose(th, -0.1 * newton_schulz5(g1), atol=1e-15)
    np.testing.assert_allclose(s.base_m.value, g1)
    th2, s = dualoptim_plus_step(th, g2, 1, s)
    delta_r = g2 - g1
    np.testing.assert_allclose(s.delta_m[1].value, delta_r)
    np.testing.assert_allclose(th2, th - 0.1 * newton_schulz5(g1 + delta_r), atol=1e-14)
    np.testing.assert_allclose(s.base_m.value, 0.9 * g1 + g2)
    with pytest.raises(ShapeMismatchError):
        init_dual_state((4,), mode="muon")


def test_muon_base_accumulates_raw():
    s = init_dual_state((2, 2), mode="muon", params=MuonParams(momentum=0.9))
    g = np.ones((2, 2))
    s = base_update(base_update(s, g), g)
    np.testing.assert_allclose(s.base_m.value, 1.9 * g)
    np.testing.assert_allclose(s.cached_base_m_hat, 1.9 * g)


def test_beta_overrides():
    s = init_dual_state((1,), base_betas=(0.99, 0.999), delta_betas=(0.9, 0.95))
    assert (s.base_m.beta, s.base_v.beta) == (0.99, 0.999)
    assert (s.delta_m[0].beta, s.delta_v[1].beta) == (0.9, 0.95)


@pytest.mark.parametrize("m,n,check", [(0.5, 0.5, lambda c: c > 0.999), (1.0, -1.0, lambda c: c < 0)])
def test_reconstructed_similarity_brackets(m, n, check):
    opt = DualOptimPlus((8,), 2, params=NO_DECAY)
    sched = AlternationSchedule(1, 1, 600)
    theta = np.zeros(8)
    records = []
    for t in range(1, 601):
        o = sched.objective_at(t)
        theta = opt.step(theta, np.full(8, m if o == 0 else n), o)
        records.append(StepRecord(t, o, opt.last_direction.copy()))
    assert check(update_similarity(records).mean_after(200))


def test_state_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        base_update(init_dual_state((2,)), np.ones(3))
    assert isinstance(MomentState.zeros((2,), 0.5), MomentState)
