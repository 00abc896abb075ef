import math

import numpy as np
import pytest

from robustreg import aircraft as ac
from robustreg.model import ControlAffineModel, DesignError, DomainError, double_integrator
from robustreg.observer import (ObserverChart, build_h2_quadratic, chain_matrices, check_barrier,
                                contraction_rate, o3_margin, observer_lyapunov, observer_rhs,
                                riccati_design, tau_floor, transform_B, verify_chart)
from robustreg.simulate import IntegratorConfig, integrate

from conftest import envelope_points


def chain_chart(n=2, nu=1.0, membership=lambda x: True):
    A, C, Lf, Mf, Nf = chain_matrices(n)
    P, K = riccati_design(A, C, nu)
    return ObserverChart(Phi=lambda x: np.asarray(x, dtype=float), dPhi=lambda x: np.eye(n), C=C,
                         A_of_u=lambda u: A, K_of_u=lambda u: K, P=P, L_of_ell=Lf, M_of_ell=Mf,
                         N_of_ell=Nf, nu=nu, O_membership=membership, Phi_inv=lambda p: p)


def pendulum_chain():
    """x1' = x2, x2' = sin(x1) + u: a chain with globally Lipschitz b."""
    return ControlAffineModel(n=2, m=1, p=1, f=lambda x: np.array([x[1], math.sin(x[0])]),
                              g=lambda x: np.array([[0.0], [1.0]]), h=lambda x: np.array([x[0]]),
                              r_indices=(0,))


def test_riccati_design_satisfies_o3():
    A, C, *_ = chain_matrices(3)
    P, K = riccati_design(A, C, nu=1.0)
    assert np.allclose(P, P.T)
    assert np.linalg.eigvalsh(P).min() > 0
    assert o3_margin(P, A, K, C, 1.0) >= 0


def test_transform_B_chain():
    m = pendulum_chain()
    ch = chain_chart()
    x = np.array([0.7, -0.2])
    assert np.allclose(transform_B(ch, m, x, [0.0]), [0.0, math.sin(0.7)], atol=1e-15)


def test_transform_B_aircraft(params):
    ch = ac.aircraft_chart(params)
    m = ac.aircraft_model(params)
    x = np.array([12.0, 0.08, 0.03])
    u = np.array([0.7, -0.1])
    B = transform_B(ch, m, x, u)
    v, gam, th = params.to_physical(x)
    gd = ac.gamma_dot(params, v, gam, th)
    dv, dg, dt = ac.gamma_dot_grad(params, v, gam, th)
    third = dt * u[1] + dv * (u[0] - params.g * math.sin(gam)) + dg * gd
    assert B[0] == u[1]
    assert B[1] == 0.0
    assert abs(B[2] - third) <= 1e-9


def test_transform_B_outside_O(params):
    ch = ac.aircraft_chart(params)
    with pytest.raises(DomainError):
        transform_B(ch, ac.aircraft_model(params), np.array([0.0, 1.6, 0.0]), np.zeros(2))


def test_observer_copy_dynamics(params):
    ch = ac.aircraft_chart(params)
    m = ac.aircraft_model(params)
    xh = np.array([3.0, 0.02, -0.01])
    u = np.array([0.3, 0.05])
    rhs = observer_rhs(ch, m, xh, m.h(xh), u, 10.0, ac.aircraft_barrier(params))
    assert np.array_equal(rhs, m.f(xh) + m.g(xh) @ u)


def test_observer_chain_classical_form():
    m = pendulum_chain()
    ch = chain_chart()
    ell = 7.0
    xh = np.array([0.2, -0.4])
    y = np.array([0.9])
    rhs = observer_rhs(ch, m, xh, y, [0.0], ell)
    K = ch.K_of_u(None)
    classical = np.array([xh[1], math.sin(xh[0])]) + np.diag([ell, ell ** 2]) @ K @ (y - xh[:1])
    assert np.allclose(rhs, classical, rtol=1e-14, atol=1e-14)


def test_innovation_lipschitz():
    m = pendulum_chain()
    ch = chain_chart()
    ell = 5.0
    xh = np.array([0.1, 0.3])
    L = np.linalg.norm(ch.innovation_gain(ell, None), 2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        ya, yb = rng.normal(size=1), rng.normal(size=1)
        d = np.linalg.norm(observer_rhs(ch, m, xh, ya, [0.0], ell) - observer_rhs(ch, m, xh, yb, [0.0], ell))
        assert d <= L * np.linalg.norm(ya - yb) * (1 + 1e-12)


def test_barrier_inner_product_sign(params):
    """(Phi(xh) - Phi(x))' dPhi(xh)^-T grad h2 h2 >= 0 with h2(xh) = 0.4, h2(x) = 0."""
    ch = ac.aircraft_chart(params)
    bar = ac.aircraft_barrier(params)
    rng = np.random.default_rng(5)
    inner = [ac.start_on_barrier_level(params, 0.4, rng) for _ in range(20)]
    zero = [x for x in (params.to_deviation(p) for p in envelope_points(params, 400))
            if bar.h2(x) == 0.0][:20]
    assert len(zero) == 20
    for xh in inner:
        assert bar.h2(xh) == pytest.approx(0.4, rel=1e-9)
        c = np.linalg.solve(ch.dPhi(xh).T, bar.grad_h2(xh)) * bar.h2(xh)
        for x in zero:
            assert (ch.Phi(xh) - ch.Phi(x)) @ c >= 0


def test_barrier_term_vanishes_where_h2_zero(params):
    ch = ac.aircraft_chart(params)
    m = ac.aircraft_model(params)
    xh = np.array([1.0, 0.01, 0.01])
    y = np.array([0.05, -0.03])
    u = np.array([1.0, 0.1])
    assert ac.aircraft_barrier(params).h2(xh) == 0.0
    with_b = observer_rhs(ch, m, xh, y, u, 10.0, ac.aircraft_barrier(params))
    assert np.array_equal(with_b, observer_rhs(ch, m, xh, y, u, 10.0))


def test_tau_floor_edges_and_golden(params):
    ch = ac.aircraft_chart(params)
    m = ac.aircraft_model(params)
    bar = ac.aircraft_barrier(params)
    inside = np.array([1.0, 0.01, 0.01])
    assert tau_floor(ch, m, bar, inside, np.zeros(2), m.h(inside), 10.0) == 0.0
    xh = ac.start_on_barrier_level(params, 0.3, np.random.default_rng(0))
    assert bar.h2(xh) == pytest.approx(0.3, rel=1e-9)
    # R < 0 (estimate heading inwards) clamps the floor at zero
    f_out = tau_floor(ch, m, bar, xh, np.zeros(2), m.h(xh) + np.array([0.5, 0.5]), 10.0)
    f_in = tau_floor(ch, m, bar, xh, np.zeros(2), m.h(xh) - np.array([0.5, 0.5]), 10.0)
    assert min(f_out, f_in) >= 0.0 and max(f_out, f_in) > 0.0
    u = np.array([0.0, -0.5])
    golden = tau_floor(ch, m, bar, xh, u, m.h(xh), 10.0)
    # independent evaluation of 8 h2^2 R / |(M P^-1)^(1/2) L' dPhi^-T grad|^2
    grad = bar.grad_h2(xh)
    R = float(grad @ (m.f(xh) + m.g(xh) @ u))
    q = ch.L_of_ell(10.0).T @ np.linalg.solve(ch.dPhi(xh).T, grad)
    _, MPinv = ch.gain_matrices(10.0)
    assert golden == pytest.approx(8 * 0.3 ** 2 * R / float(q @ MPinv @ q), rel=1e-9)
    assert golden == pytest.approx(GOLDEN_TAU_FLOOR, rel=1e-8)


# seed-0 point on the h2 = 0.3 level, u = (0, -0.5), y = h(xh); first computed value
GOLDEN_TAU_FLOOR = 2.863303487500227e-06


def test_observer_lyapunov_values():
    ch = chain_chart()
    x = np.array([0.4, -1.0])
    assert observer_lyapunov(ch, x, x, 3.0) == 0.0
    rng = np.random.default_rng(3)
    for _ in range(20):
        xa, xb = rng.normal(size=2), rng.normal(size=2)
        U = observer_lyapunov(ch, xa, xb, 4.0)
        G, _ = ch.gain_matrices(4.0)
        ev = np.linalg.eigvalsh(np.linalg.inv(G))
        e2 = float((xa - xb) @ (xa - xb))
        assert 0.5 * ev.min() * e2 * (1 - 1e-12) <= U <= 0.5 * ev.max() * e2 * (1 + 1e-12)
        assert U > 0


def test_observer_lyapunov_scalar_toy():
    ch = ObserverChart(Phi=lambda x: np.asarray(x), dPhi=lambda x: np.eye(1), C=np.eye(1),
                       A_of_u=lambda u: np.zeros((1, 1)), K_of_u=lambda u: np.eye(1), P=np.eye(1),
                       L_of_ell=lambda l: np.eye(1), M_of_ell=lambda l: l * np.eye(1),
                       N_of_ell=lambda l: np.eye(1), nu=1.0)
    assert observer_lyapunov(ch, [1.0], [0.2], 4.0) == pytest.approx(0.64 / 8.0)


def test_verify_chart_chain_all_pass():
    m = pendulum_chain()
    ch = chain_chart()
    rng = np.random.default_rng(0)
    rep = verify_chart(ch, m, [2.0, 5.0, 10.0, 20.0], rng.uniform(-2, 2, (200, 2)),
                       np.array([[-1.0], [0.0], [1.0]]))
    assert rep["ok"]
    c = rep["O7"]["c_ell"]
    # at least 1/ell decay along the ladder
    assert all(b * lb <= a * la * (1 + 1e-9) for (a, la), (b, lb) in
               zip(zip(c, [2, 5, 10, 20]), zip(c[1:], [5, 10, 20])))


def test_verify_chart_aircraft_o3_exact(params):
    ch = ac.aircraft_chart(params)
    m = ac.aircraft_model(params)
    pts = np.array([params.to_deviation(p) for p in envelope_points(params, 200)])
    rep = verify_chart(ch, m, [1.0, 2.0, 5.0, 10.0, 50.0], pts, np.zeros((1, 2)))
    assert rep["O3"]["commutation"] == 0.0 and rep["O3"]["output_identity"] == 0.0
    assert rep["O3"]["lmi_margin"] >= 0
    assert rep["O1"]["ok"] and rep["O2"]["ok"] and rep["O4"]["ok"]
    for ell in (1.0, 10.0):
        A = ch.A_of_u(None)
        lhs = A @ ch.L_of_ell(ell)
        assert np.count_nonzero(lhs) == 1 and lhs[1, 2] == ell


def test_verify_chart_flags_output_identity():
    m = pendulum_chain()
    base = chain_chart()
    bad = ObserverChart(**{**base.__dict__, "L_of_ell": lambda l: np.diag([l, l])})
    rep = verify_chart(bad, m, [2.0, 5.0], np.zeros((3, 2)) + 0.1, np.zeros((1, 1)))
    assert not rep["O3"]["ok"]
    assert rep["O3"]["violating_entry"] == (0, 0)


def test_verify_chart_rejects_unsorted_ladder():
    with pytest.raises(ValueError):
        verify_chart(chain_chart(), pendulum_chain(), [5.0, 2.0], np.zeros((2, 2)), np.zeros((1, 1)))


def test_build_h2_quadratic():
    ch = chain_chart()
    bar = build_h2_quadratic(ch, np.eye(2), 4.0, 0.25, check_states=np.random.default_rng(0).uniform(-3, 3, (300, 2)))
    assert bar.h2(np.array([0.5, 0.5])) == 0.0
    assert np.array_equal(bar.grad_h2(np.array([0.5, 0.5])), np.zeros(2))
    # C1 across the activation sphere |phi|^2 = 1
    for r in (1.0 - 1e-7, 1.0 + 1e-7):
        assert np.linalg.norm(bar.grad_h2(np.array([r, 0.0]))) < 1e-6
    rep = check_barrier(bar, ch, np.random.default_rng(1).uniform(-3, 3, (300, 2)))
    assert rep["H3"]["ok"] and rep["H3"]["worst_excess"] <= 1e-9


def test_build_h2_quadratic_spot_check_failure():
    ch = chain_chart(membership=lambda x: float(x @ x) < 0.5)
    with pytest.raises(DesignError, match="H1"):
        build_h2_quadratic(ch, np.eye(2), 100.0, 0.25,
                           check_states=np.random.default_rng(0).uniform(-3, 3, (300, 2)))


def test_check_barrier_aircraft(params):
    ch = ac.aircraft_chart(params)
    bar = ac.aircraft_barrier(params)
    rng = np.random.default_rng(0)
    phys = np.column_stack([rng.uniform(0.3, 2.0, 3000) * params.v0, rng.uniform(-1.7, 1.7, 3000),
                            rng.uniform(-1.7, 1.7, 3000)])
    states = np.array([params.to_deviation(p) for p in phys])
    rep = check_barrier(bar, ch, states, h1_level=0.5, segments=300)
    assert rep["ok"], rep


def test_barrier_keeps_chain_estimate_inside():
    """Forward invariance of {h2 <= 1/2} under a persistent outward innovation."""
    m = pendulum_chain()
    ch = chain_chart()
    bar = build_h2_quadratic(ch, np.eye(2), 4.0, 0.25)
    # |phi|^2 / 4 - 0.25 = sqrt(0.45) on the start circle
    r = math.sqrt(4.0 * (0.25 + math.sqrt(0.45)))
    x0 = np.array([r, 0.0])
    assert bar.h2(x0) == pytest.approx(0.45)
    rhs = lambda t, xh: observer_rhs(ch, m, xh, np.array([10.0 + math.sin(7 * t)]),
                                     np.array([2.0 * math.cos(3 * t)]), 5.0, bar)
    tr = integrate(rhs, x0, IntegratorConfig(t_end=1.0, method="rk45", rtol=1e-8, atol=1e-11),
                   diagnostics=lambda t, xh: {"h2": bar.h2(xh)})
    assert tr.status == "ok"
    assert tr["h2"].max() <= 0.5 + 1e-6
    free = integrate(lambda t, xh: observer_rhs(ch, m, xh, np.array([10.0 + math.sin(7 * t)]),
                                                np.array([2.0 * math.cos(3 * t)]), 5.0),
                     x0, IntegratorConfig(t_end=1.0, dt=1e-3),
                     diagnostics=lambda t, xh: {"h2": bar.h2(xh)})
    assert free["h2"].max() > 0.5


def test_contraction_rate_ladder_and_bound():
    m = double_integrator()
    ch = chain_chart()
    rates = []
    for ell in (2.0, 5.0, 10.0):
        fit = contraction_rate(ch, m, [1.0, 0.0], [0.0, 0.0], lambda t: [math.sin(t)], ell, 3.0)
        assert fit.status == "ok" and fit.r2 >= 0.95
        # lower bound nu lambda_min(P) lambda_min(M P^-1) / 2, with 20% fitting slack
        _, MPinv = ch.gain_matrices(ell)
        bound = ch.nu * np.linalg.eigvalsh(ch.P).min() * np.linalg.eigvalsh(MPinv).min() / 2
        assert fit.rate >= 0.8 * bound
        rates.append(fit.rate)
    assert rates[0] < rates[1] < rates[2]


def test_contraction_rate_converged_status():
    fit = contraction_rate(chain_chart(), double_integrator(), [1.0, 0.0], [1.0, 0.0],
                           lambda t: [0.0], 5.0, 1.0)
    assert fit.status == "converged" and fit.rate is None
