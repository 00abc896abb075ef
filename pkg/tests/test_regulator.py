import math
from dataclasses import replace

import numpy as np
import pytest

from robustreg import aircraft as ac
from robustreg.analysis import find_equilibrium
from robustreg.forwarding import extended_lyapunov, psi
from robustreg.model import ContractViolation, ProcessModel, eval_model
from robustreg.observer import observer_rhs
from robustreg.regulator import (ClosedLoopState, LevelSetEstimate, OutputFeedbackRegulator,
                                 batched, closed_loop_rhs, estimate_level_sets, psi_sat)
from robustreg.scenario import double_integrator_setup
from robustreg.simulate import IntegratorConfig, integrate


def di_regulator(v2=5.0, ell=5.0):
    model, ia, design, chart = double_integrator_setup({})
    rng = np.random.default_rng(0)
    xs = rng.uniform(-5, 5, (3000, 2))
    zs = rng.uniform(-20, 20, (3000, 1))
    with pytest.warns(RuntimeWarning):
        lv = estimate_level_sets(xs, zs, batched(lambda x, z: extended_lyapunov(design, x, z)),
                                 batched(lambda x, z: psi(design, model, x, z)),
                                 batched(lambda x: 0.0), v2=v2)
    return OutputFeedbackRegulator(model=model, design=design, ia=ia, chart=chart, levels=lv, ell=ell)


def test_level_set_ordering_enforced():
    with pytest.raises(ContractViolation):
        LevelSetEstimate(1.0, 0.9, 0.5, 1.0, 1.0)


def test_level_sets_scalar_toy_converges_to_one():
    # V_e = x^2 + z^2/2 with O_mod = {|x| <= 1}: v_infty = 1
    Ve = lambda xs, zs: xs[:, 0] ** 2 + 0.5 * zs[:, 0] ** 2
    h2 = lambda xs: (np.abs(xs[:, 0]) > 1.0).astype(float)
    ps = lambda xs, zs: -xs
    est = []
    for n in (101, 1001, 10001):
        x = np.linspace(-2, 2, n)[:, None]
        est.append(estimate_level_sets(x, np.zeros_like(x), Ve, ps, h2).v_infty)
    assert all(e >= 1.0 for e in est)
    assert est[0] >= est[1] >= est[2] and est[2] - 1.0 < 1e-3


def test_level_sets_vacuous_branch():
    rng = np.random.default_rng(0)
    xs = rng.uniform(-1, 1, (500, 1))
    zs = rng.uniform(-1, 1, (500, 1))
    Ve = lambda x, z: x[:, 0] ** 2 + z[:, 0] ** 2
    ps = lambda x, z: 3 * x
    h2 = lambda x: np.zeros(len(x))
    with pytest.warns(RuntimeWarning):
        with pytest.raises(ContractViolation):
            estimate_level_sets(xs, zs, Ve, ps, h2)
    with pytest.warns(RuntimeWarning):
        lv = estimate_level_sets(xs, zs, Ve, ps, h2, varsigma=0.05, v2=0.25)
    inside = Ve(xs, zs) <= 0.25
    assert lv.v_infty == math.inf and lv.coverage_warning
    assert lv.mu == pytest.approx(1.05 * 3 * np.abs(xs[inside]).max())


def test_level_sets_monotone_refinement():
    rng = np.random.default_rng(1)
    xs = rng.uniform(-1, 1, (4000, 2))
    zs = rng.uniform(-1, 1, (4000, 1))
    Ve = lambda x, z: (x ** 2).sum(1) + z[:, 0] ** 2
    ps = lambda x, z: x @ np.array([[1.0], [2.0]])
    h2 = lambda x: (np.abs(x).max(1) > 0.9).astype(float)
    prev = (0.0, 0.0)
    for n in (500, 1000, 2000, 4000):
        lv = estimate_level_sets(xs[:n], zs[:n], Ve, ps, h2, v2=0.5)
        assert lv.mu >= prev[0] and lv.xbar >= prev[1]
        prev = (lv.mu, lv.xbar)


def test_aircraft_level_sets_baseline(levels):
    # seed 0, 200k samples, bisection refinement: regression baselines
    assert levels.v_infty == pytest.approx(0.00657094113885577, rel=1e-9)
    assert levels.v2 == pytest.approx(0.8 * levels.v_infty, rel=1e-12)
    assert levels.mu == pytest.approx(5.250038516883867, rel=1e-9)
    assert levels.xbar == pytest.approx(14.48020696591735, rel=1e-9)


def test_psi_sat_examples():
    reg = di_regulator()
    lv = reg.levels
    assert np.array_equal(psi_sat(reg.design, lv, reg.model, [0.0, 0.0], [0.0]), [0.0])
    x = np.array([0.01, 0.0])
    assert psi_sat(reg.design, lv, reg.model, x, [0.0]) == pytest.approx(psi(reg.design, reg.model, x, [0.0]))
    big = psi_sat(reg.design, lv, reg.model, [1e3, 1e3], [0.0])
    assert np.abs(big).max() <= lv.mu


def test_closed_loop_equilibrium_and_process_equivalence():
    reg = di_regulator()
    assert np.array_equal(closed_loop_rhs(reg.model, reg, np.zeros(5)), np.zeros(5))
    proc = ProcessModel.from_model(reg.model)
    rng = np.random.default_rng(2)
    for s in rng.normal(size=(20, 5)):
        assert np.array_equal(closed_loop_rhs(reg.model, reg, s), closed_loop_rhs(proc, reg, s))


def test_closed_loop_composition():
    reg = di_regulator()
    s = np.array([0.4, -0.3, 0.2, 0.1, 0.5])
    st = ClosedLoopState.from_flat(s, 2, 1)
    u = psi_sat(reg.design, reg.levels, reg.model, st.xhat, st.z)
    expect = np.concatenate([eval_model(reg.model, st.x, u),
                             reg.ia.k(None, st.x[:1]) + reg.ia.antiwindup(st.xhat, st.z),
                             observer_rhs(reg.chart, reg.model, st.xhat, st.x[:1], u, reg.ell)])
    assert np.allclose(closed_loop_rhs(reg.model, reg, st), expect, rtol=0, atol=1e-15)
    assert np.array_equal(st.flat(), s)


def test_output_feedback_regulates_and_input_bounded():
    reg = di_regulator()
    proc = ProcessModel(xi=lambda x, u: np.array([x[1], u[0] + 0.2]), zeta=lambda x, u: np.array([x[0]]),
                        base=reg.model)
    tr = integrate(lambda t, s: closed_loop_rhs(proc, reg, s), [1.0, 0.0, 0.0, 0.0, 0.0],
                   IntegratorConfig(t_end=30.0, dt=1e-2, record_every=10),
                   diagnostics=lambda t, s: {"u": reg.control(s[3:5], s[2:3])[0]})
    assert abs(tr["x0"][-1]) < 1e-2
    assert np.abs(tr["u"]).max() <= reg.levels.mu
    eq = find_equilibrium(lambda s: closed_loop_rhs(proc, reg, s), tr.matrix()[-1, 1:6],
                          regulated=lambda s: s[0])
    assert abs(eq.regulated[0]) <= 1e-8 and eq.stable


def test_aircraft_compiled_rhs_matches_generic(loop, s0, params, levels):
    reg = loop.regulator(levels)
    plant = loop.process()
    assert np.allclose(loop.rhs(s0), closed_loop_rhs(plant, reg, s0), rtol=1e-12, atol=1e-12)
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 20:
        s = s0 + rng.normal(size=7) * np.array([5.0, 0.05, 0.05, 10.0, 5.0, 0.05, 0.05])
        if not reg.chart.O_membership(s[4:]):
            continue
        checked += 1
        assert np.allclose(loop.rhs(s), closed_loop_rhs(plant, reg, s), rtol=1e-10, atol=1e-10)
    # estimate on an active barrier level, perturbed plant, state feedback
    xh = ac.start_on_barrier_level(params, 0.3, rng)
    s = np.concatenate([s0[:4], xh])
    for fam, d in (("lift-scale", 0.02), ("theta-bias", 0.01), ("thrust-offset", 0.3)):
        lp = replace(loop, family=fam, delta=d, feedback_source="state")
        assert np.allclose(lp.rhs(s), closed_loop_rhs(lp.process(), lp.regulator(levels), s),
                           rtol=1e-10, atol=1e-10)
