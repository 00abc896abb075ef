"""High-gain observer written in the original coordinates, with an optional
barrier correction keeping the estimate inside the observability region."""

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_continuous_are, sqrtm

from .model import ContractViolation, DesignError, DomainError, _vec, eval_model

COND_WARN = 1e10


@dataclass(frozen=True)
class ObserverChart:
    """Coordinates phi = Phi(x) in which the model reads
    phidot = A(u) phi + B(phi, u), y = C phi."""

    Phi: Callable
    dPhi: Callable
    C: np.ndarray
    A_of_u: Callable
    K_of_u: Callable
    P: np.ndarray
    L_of_ell: Callable
    M_of_ell: Callable
    N_of_ell: Callable
    nu: float
    O_membership: Callable = lambda x: True
    Phi_inv: Optional[Callable] = None
    name: str = ""

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def Pinv(self):
        return np.linalg.inv(self.P)

    def gain_matrices(self, ell):
        """(L M P^-1 L^T, M P^-1) at gain ell."""
        L = self.L_of_ell(ell)
        M = self.M_of_ell(ell)
        MPinv = M @ self.Pinv
        return L @ MPinv @ L.T, MPinv

    def innovation_gain(self, ell, u):
        L = self.L_of_ell(ell)
        return L @ self.M_of_ell(ell) @ self.K_of_u(u) @ self.N_of_ell(ell)


def chain_matrices(n):
    """A, C and gain scalings of an n-th order single-output chain."""
    A = np.eye(n, k=1)
    C = np.zeros((1, n))
    C[0, 0] = 1.0
    return (A, C, lambda ell: np.diag(ell ** np.arange(n, dtype=float)),
            lambda ell: ell * np.eye(n), lambda ell: np.eye(1))


def riccati_design(A, C, nu=1.0, Q=None, nu_k=1.0):
    """P and K = nu_k P^-1 C^T with P(A - KC) + (.)^T P <= -2 nu P.

    Sigma solves (A + nu I) Sigma + Sigma (A + nu I)^T - Sigma C^T C Sigma + Q = 0
    and P = Sigma^-1; with nu_k >= 1/2 the inequality holds strictly.
    """
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    sigma = solve_continuous_are((A + nu * np.eye(n)).T, C.T, Q, np.eye(C.shape[0]))
    sigma = 0.5 * (sigma + sigma.T)
    P = np.linalg.inv(sigma)
    P = 0.5 * (P + P.T)
    return P, nu_k * sigma @ C.T


def o3_margin(P, A, K, C, nu):
    """lambda_min of -2 nu P - [P(A-KC) + (A-KC)^T P]; >= 0 means satisfied."""
    F = A - K @ C
    X = -2.0 * nu * P - (P @ F + F.T @ P)
    return float(np.linalg.eigvalsh(0.5 * (X + X.T)).min())


def _checked_dphi(chart, x):
    d = np.atleast_2d(chart.dPhi(x))
    cond = np.linalg.cond(d)
    if not np.isfinite(cond):
        raise np.linalg.LinAlgError(f"dPhi is singular at x = {x}")
    if cond > COND_WARN:
        warnings.warn(f"dPhi is ill-conditioned at x = {x} (cond {cond:.3g})", RuntimeWarning)
    return d


def transform_B(chart, model, x, u):
    """L_f Phi + L_g Phi u - A(u) Phi, i.e. the part of phidot not linear in phi."""
    x = _vec(x)
    if not chart.O_membership(x):
        raise DomainError(f"x = {x} is outside the observability region")
    return chart.dPhi(x) @ eval_model(model, x, u) - chart.A_of_u(u) @ _vec(chart.Phi(x))


@dataclass(frozen=True)
class BarrierOutput:
    h2: Callable
    grad_h2: Callable
    name: str = ""

    def in_O_mod(self, x):
        return self.h2(x) == 0.0

    def in_C_hat(self, x):
        return self.h2(x) <= 0.5


def _barrier_parts(chart, barrier, xhat, base_rhs, ell, d):
    hv = float(barrier.h2(xhat))
    grad = _vec(barrier.grad_h2(xhat))
    G, MPinv = chart.gain_matrices(ell)
    R = float(grad @ base_rhs)
    c = np.linalg.solve(d.T, grad)
    q = chart.L_of_ell(ell).T @ c
    den = float(q @ MPinv @ q)
    return hv, R, c, den, G


def tau_floor(chart, model, barrier, xhat, u, y, ell):
    """Smallest admissible barrier gain at x_hat, clamped at zero."""
    xhat = _vec(xhat)
    d = _checked_dphi(chart, xhat)
    base = _observer_base(chart, model, xhat, y, u, ell, d)
    hv, R, _, den, _ = _barrier_parts(chart, barrier, xhat, base, ell, d)
    if hv <= 0.0:
        return 0.0
    if den < 1e-14:
        raise DesignError(f"degenerate barrier gradient at x_hat = {xhat}")
    return max(8.0 * hv * hv * R / den, 0.0)


def _observer_base(chart, model, xhat, y, u, ell, d):
    innov = _vec(y) - _vec(model.h(xhat))
    corr = np.linalg.solve(d, chart.innovation_gain(ell, u) @ innov)
    return eval_model(model, xhat, u) + corr


def observer_rhs(chart, model, xhat, y, u, ell, barrier=None, tau_margin=1.0, tau_scale=1.0):
    """Copy of the model plus innovation term, plus the barrier correction
    E = -tau dPhi^-1 L M P^-1 L^T dPhi^-T grad h2^T h2 when a barrier is given.

    The deployed gain is ``tau_scale * floor + tau_margin``; any
    ``tau_scale >= 1`` is admissible.
    """
    xhat = _vec(xhat)
    if not chart.O_membership(xhat):
        raise DomainError(f"x_hat = {xhat} is outside the observability region")
    d = _checked_dphi(chart, xhat)
    rhs = _observer_base(chart, model, xhat, y, u, ell, d)
    if barrier is None:
        return rhs
    hv, R, c, den, G = _barrier_parts(chart, barrier, xhat, rhs, ell, d)
    if hv <= 0.0:
        return rhs
    tau = tau_margin
    if den > 1e-300:
        tau += tau_scale * max(8.0 * hv * hv * R / den, 0.0)
    return rhs - tau * hv * np.linalg.solve(d, G @ c)


def observer_lyapunov(chart, x, xhat, ell):
    """U = 1/2 e^T (L M P^-1 L^T)^-1 e with e = Phi(x) - Phi(x_hat)."""
    e = _vec(chart.Phi(x)) - _vec(chart.Phi(xhat))
    G, _ = chart.gain_matrices(ell)
    return 0.5 * float(e @ np.linalg.solve(G, e))


def verify_chart(chart, model, gain_ladder, states, inputs, pair_count=200, seed=0, tol=1e-12):
    """Sampled checks of the chart conditions O1-O7.

    ``states`` sample the compact of interest and ``inputs`` the admissible
    input set. Returns a dict keyed by item with ``ok`` flags and margins.
    """
    ladder = [float(l) for l in gain_ladder]
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ContractViolation("gain ladder must be increasing")
    states = np.atleast_2d(states)
    inputs = np.atleast_2d(inputs)
    n = chart.n
    rep = {}

    phi0 = np.abs(_vec(chart.Phi(np.zeros(n)))).max()
    dets = [abs(np.linalg.det(np.atleast_2d(chart.dPhi(x)))) for x in states]
    rep["O1"] = {"phi0": float(phi0), "min_abs_det": float(min(dets)),
                 "ok": phi0 <= tol and min(dets) > 0}

    c = np.atleast_2d(chart.C)
    o2 = max(float(np.abs(c @ _vec(chart.Phi(x)) - _vec(model.h(x))).max()) for x in states)
    rep["O2"] = {"max_residual": o2, "ok": o2 <= tol}

    comm = 0.0
    outc = 0.0
    worst_entry = None
    margin = np.inf
    for u in inputs:
        A = np.atleast_2d(chart.A_of_u(u))
        margin = min(margin, o3_margin(chart.P, A, np.atleast_2d(chart.K_of_u(u)), c, chart.nu))
        for ell in ladder:
            L, M, N = chart.L_of_ell(ell), chart.M_of_ell(ell), np.atleast_2d(chart.N_of_ell(ell))
            comm = max(comm, float(np.abs(A @ L - L @ M @ A).max()))
            diff = N @ c @ L - c
            if np.abs(diff).max() > outc:
                outc = float(np.abs(diff).max())
                worst_entry = tuple(int(i) for i in np.unravel_index(np.abs(diff).argmax(), diff.shape))
    rep["O3"] = {"commutation": comm, "output_identity": outc, "violating_entry": worst_entry,
                 "lmi_margin": margin, "ok": comm <= tol and outc <= tol and margin >= 0}

    lam = []
    sym = 0.0
    lam_big = []
    for ell in ladder:
        G, MPinv = chart.gain_matrices(ell)
        sym = max(sym, float(np.abs(MPinv - MPinv.T).max()))
        ev = np.linalg.eigvalsh(0.5 * (MPinv + MPinv.T))
        gv = np.linalg.eigvalsh(0.5 * (G + G.T))
        lam.append(float(ev.min()))
        lam_big.append((float(gv.min()), float(gv.max())))
    increasing = all(b > a for a, b in zip(lam, lam[1:]))
    rep["O4"] = {"lambda_min_MPinv": lam, "asymmetry": sym,
                 "ok": sym <= 1e-9 * max(1.0, max(lam)) and increasing}

    d_needed = 0.0
    usable = 0
    for lm, (gmin, gmax) in zip(lam, lam_big):
        if lm <= 1.0:
            continue
        usable += 1
        d_needed = max(d_needed, np.log(gmax) / np.log(lm), -np.log(gmin) / np.log(lm))
    rep["O5"] = {"d": float(d_needed), "rungs_used": usable, "ok": usable > 0}

    rng = np.random.default_rng(seed)
    Ph = np.real(sqrtm(chart.P))
    cl = []
    for ell in ladder:
        L = chart.L_of_ell(ell)
        Linv = np.linalg.inv(L)
        Minv = np.linalg.inv(chart.M_of_ell(ell))
        best = 0.0
        for _ in range(pair_count):
            xa = states[rng.integers(len(states))]
            xb = states[rng.integers(len(states))]
            u = inputs[rng.integers(len(inputs))]
            dphi = _vec(chart.Phi(xa)) - _vec(chart.Phi(xb))
            den = np.linalg.norm(Ph @ Linv @ dphi)
            if den < 1e-12:
                continue
            dB = transform_B(chart, model, xa, u) - transform_B(chart, model, xb, u)
            best = max(best, float(np.linalg.norm(Ph @ Minv @ Linv @ dB) / den))
        cl.append(best)
    rep["O6"] = {"ok": all(b < a or b == 0.0 for a, b in zip(cl, cl[1:]))}
    rep["O7"] = {"c_ell": cl, "ok": all(np.isfinite(cl))}
    rep["ok"] = all(item["ok"] for key, item in rep.items() if key.startswith("O"))
    return rep


def build_h2_quadratic(chart, Q, varrho, eps, check_states=None):
    """h2 = max{Phi' Q Phi / varrho - eps, 0}^2, optionally spot-checked."""
    Q = np.asarray(Q, dtype=float)
    if not 0.0 < eps < 1.0:
        raise ContractViolation("eps must lie in (0, 1)")

    def h2(x):
        phi = _vec(chart.Phi(x))
        t = float(phi @ Q @ phi) / varrho - eps
        return t * t if t > 0 else 0.0

    def grad_h2(x):
        phi = _vec(chart.Phi(x))
        t = float(phi @ Q @ phi) / varrho - eps
        if t <= 0:
            return np.zeros(chart.n)
        return 2.0 * t * (2.0 * phi @ Q @ np.atleast_2d(chart.dPhi(x))) / varrho

    barrier = BarrierOutput(h2, grad_h2, name="quadratic")
    if check_states is not None:
        rep = check_barrier(barrier, chart, check_states)
        for item in ("H1", "H2", "H4", "H5"):
            if not rep[item]["ok"]:
                raise DesignError(f"barrier check {item} failed: {rep[item]}")
    return barrier


def check_barrier(barrier, chart, states, h1_level=1.0, segments=1000, seed=0, tol=1e-9):
    """Spot checks of H1-H5 on sampled states (which should cover more than O).

    H3 needs ``chart.Phi_inv``; without it the item is reported as skipped.
    """
    states = np.atleast_2d(states)
    hv = np.array([barrier.h2(x) for x in states])
    inside = np.array([bool(chart.O_membership(x)) for x in states])
    rep = {}
    bad = (hv < h1_level) & ~inside
    rep["H1"] = {"level": h1_level, "violations": int(bad.sum()), "ok": not bad.any()}
    pos = hv > 0
    gmin = min((np.linalg.norm(barrier.grad_h2(x)) for x in states[pos & inside]), default=np.inf)
    rep["H2"] = {"min_grad_where_positive": float(gmin), "ok": gmin > 0}
    if chart.Phi_inv is None:
        rep["H3"] = {"skipped": True, "ok": True}
    else:
        rng = np.random.default_rng(seed)
        worst = -np.inf
        cand = states[inside & (hv <= 0.5)]
        checked = 0
        for _ in range(segments if len(cand) > 1 else 0):
            xa = cand[rng.integers(len(cand))]
            xb = cand[rng.integers(len(cand))]
            lvl = max(barrier.h2(xa), barrier.h2(xb))
            lam = rng.random()
            x = chart.Phi_inv(lam * _vec(chart.Phi(xa)) + (1 - lam) * _vec(chart.Phi(xb)))
            if x is None or not np.all(np.isfinite(x)):
                worst = np.inf
                continue
            checked += 1
            worst = max(worst, barrier.h2(x) - lvl)
        rep["H3"] = {"segments": checked, "worst_excess": float(worst), "ok": worst <= tol}
    zero = np.zeros(chart.n)
    ball = zero + 1e-3 * np.random.default_rng(seed + 1).normal(size=(200, chart.n))
    ball_max = max(barrier.h2(x) for x in ball)
    rep["H4"] = {"h2_at_origin": float(barrier.h2(zero)), "h2_near_origin": float(ball_max),
                 "ok": barrier.h2(zero) == 0.0 and ball_max == 0.0}
    chat = hv <= 0.5
    rep["H5"] = {"outside_O": int((chat & ~inside).sum()), "samples_in_C_hat": int(chat.sum()),
                 "ok": not (chat & ~inside).any() and chat.any()}
    rep["ok"] = all(rep[k]["ok"] for k in ("H1", "H2", "H3", "H4", "H5"))
    return rep


def contraction_rate(chart, model, x0, xhat0, u_of_t, ell, t_end, dt=1e-3, floor=1e-16):
    """Fitted exponential rate of U along a plant/observer run with the open-loop
    input ``u_of_t(t)``; see :func:`robustreg.analysis.fit_contraction`."""
    from .analysis import fit_contraction
    from .simulate import IntegratorConfig, integrate

    n = model.n

    def rhs(t, s):
        x, xh = s[:n], s[n:]
        u = _vec(u_of_t(t))
        return np.concatenate([eval_model(model, x, u),
                               observer_rhs(chart, model, xh, _vec(model.h(x)), u, ell)])

    tr = integrate(rhs, np.concatenate([_vec(x0), _vec(xhat0)]),
                   IntegratorConfig(t_end=t_end, dt=dt),
                   diagnostics=lambda t, s: {"U_ell": observer_lyapunov(chart, s[:n], s[n:], ell)})
    return fit_contraction(tr, floor=floor)
