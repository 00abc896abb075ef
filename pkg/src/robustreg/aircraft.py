"""Longitudinal aircraft reference system.

Physical state is ``(v, gamma, theta)`` with inputs ``u = (e, q)``: thrust
per unit mass and pitch rate. The generic model, chart and regulator objects
work in deviation coordinates ``(v - v0, gamma, theta - theta_star)`` so the
trim point sits at the origin. The measured output is ``(theta -
theta_star, gamma)`` and the regulated output is ``gamma``.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels as K
from .forwarding import ForwardingDesign, IntegralAction, sat_array
from .model import ContractViolation, ControlAffineModel, DomainError, ProcessModel, _vec
from .observer import BarrierOutput, ObserverChart, riccati_design
from .regulator import LevelSetEstimate, OutputFeedbackRegulator
from .simulate import IntegratorConfig, Trace, integrate

TRACE_COLUMNS = ("v", "gamma", "theta", "z", "vhat", "gammahat", "thetahat",
                 "e", "q", "y_theta", "y_gamma", "V_e", "U_ell", "h2hat")
FAMILIES = ("lift-scale", "theta-bias", "thrust-offset")


def _default_lift(g, v0, trim=0.05):
    return g / (v0 * v0 * math.sin(trim))


@dataclass(frozen=True)
class AircraftParams:
    g: float = 9.81
    v0: float = 200.0
    pounds: Optional[float] = None
    k1: float = 1.0
    k2: float = 5.0
    k3: float = 30.0
    k4: float = 0.5
    k_e: float = 5.0
    k_q: float = 0.5
    eps1: float = 0.25
    eps2: float = 0.25
    eps3: float = 10.0
    eps4: float = 0.04
    eps5: float = 0.5
    gamma_dot_max: float = -1.0
    c3: float = 30.0
    sing_tol: float = 1e-4
    varsigma: float = 0.05

    def __post_init__(self):
        if self.pounds is None:
            object.__setattr__(self, "pounds", _default_lift(self.g, self.v0))
        ratio = self.g / (self.pounds * self.v0 ** 2)
        if not 0.0 < ratio < 1.0:
            raise ContractViolation(f"g/(lift v0^2) = {ratio} must lie in (0, 1)")
        for name in ("k1", "k2", "k3", "k4", "k_e", "k_q", "c3", "sing_tol", "varsigma"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")
        if self.gamma_dot_max == 0:
            raise ContractViolation("gamma_dot_max must be non-zero")

    @property
    def theta_star(self):
        return math.asin(self.g / (self.pounds * self.v0 ** 2))

    def as_array(self):
        return np.array([self.g, self.pounds, self.v0, self.theta_star,
                         self.k1, self.k2, self.k3, self.k4, self.k_e, self.k_q, self.sing_tol,
                         self.eps1, self.eps2, self.eps3, self.eps4, self.eps5,
                         self.gamma_dot_max, self.varsigma, self.c3])

    def trim(self):
        """Physical trim point (v0, 0, theta_star)."""
        return np.array([self.v0, 0.0, self.theta_star])

    def to_deviation(self, x):
        x = _vec(x)
        return np.array([x[0] - self.v0, x[1], x[2] - self.theta_star])

    def to_physical(self, xt):
        xt = _vec(xt)
        return np.array([xt[0] + self.v0, xt[1], xt[2] + self.theta_star])


def _check_v(v):
    if not v > 0:
        raise DomainError(f"speed must be strictly positive, got v = {v}")


def aircraft_dynamics(params, x, u, lift=None):
    v, gam, th = _vec(x)
    _check_v(v)
    e, q = _vec(u)
    pr = params.as_array()
    return np.array(K.dynamics(pr, params.pounds if lift is None else lift, 0.0, v, gam, th, e, q))


def gamma_dot(params, v, gam, th):
    _check_v(v)
    return K.gamma_dot(params.pounds, params.g, v, gam, th)


def gamma_dot_grad(params, v, gam, th):
    """Partials of gamma_dot in (v, gamma, theta)."""
    return np.array(K.gamma_dot_grad(params.pounds, params.g, v, gam, th))


def phugoid_invariant(params, v, gam):
    _check_v(v)
    r = v / params.v0
    return r ** 3 / 3.0 - r * math.cos(gam)


def aircraft_lyapunov(params, z, v, gam, th):
    _check_v(v)
    return K.lyapunov(params.as_array(), z, v, gam, th)


def aircraft_lyapunov_grad(params, z, v, gam, th):
    """Gradient in (z, v, gamma, theta)."""
    return np.array(K.lyapunov_grad(params.as_array(), z, v, gam, th))


def aircraft_feedback(params, z, v, gam, th, saturate_q=False):
    """(e, q); ``saturate_q`` adds the k_q saturation used with the observer."""
    _check_v(v)
    return K.feedback(params.as_array(), z, v, gam, th, saturate_q)


def aircraft_h2(params, x):
    """Barrier value and gradient at physical ``x = (v, gamma, theta)``."""
    v, gam, th = _vec(x)
    grad = np.empty(3)
    val = K.h2_terms(params.as_array(), v, gam, th, grad)
    return val, grad


def in_O(params, x):
    v, gam, th = _vec(x)
    return bool(K.in_observability_region(params.as_array(), v, gam, th))


def aircraft_model(params):
    """Design model in deviation coordinates."""
    g, v0, a, lift = params.g, params.v0, params.theta_star, params.pounds

    def f(x):
        v = x[0] + v0
        return np.array([-g * math.sin(x[1]), K.gamma_dot(lift, g, v, x[1], x[2] + a), 0.0])

    gmat = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    return ControlAffineModel(n=3, m=2, p=2, f=f, g=lambda x: gmat,
                              h=lambda x: np.array([x[2], x[1]]), r_indices=(1,), name="aircraft")


def aircraft_process(params, family=None, delta=0.0):
    """True plant: the model, or one of the named perturbation families."""
    model = aircraft_model(params)
    if family is None or delta == 0.0:
        return ProcessModel.from_model(model, "nominal")
    if family not in FAMILIES:
        raise ContractViolation(f"unknown perturbation family {family!r}")
    g, v0, a = params.g, params.v0, params.theta_star
    lift = params.pounds * (1.0 + delta) if family == "lift-scale" else params.pounds
    thrust = delta if family == "thrust-offset" else 0.0
    bias = delta if family == "theta-bias" else 0.0

    def xi(x, u):
        v = x[0] + v0
        return np.array([u[0] - g * math.sin(x[1]) + thrust,
                         K.gamma_dot(lift, g, v, x[1], x[2] + a), u[1]])

    def zeta(x, u):
        return np.array([x[2] + bias, x[1]])

    return ProcessModel(xi, zeta, base=model, label=f"{family}={delta}")


def chart_inverse(params, phi):
    """(v - v0, gamma, theta - theta_star) from (theta - theta_star, gamma, gamma_dot);
    None outside the image of the chart."""
    th = phi[0] + params.theta_star
    gam = phi[1]
    gd = phi[2]
    s = th - gam
    c = params.g * math.cos(gam)
    disc = gd * gd + 4.0 * params.pounds * math.sin(s) * c
    if disc < 0 or abs(th) >= math.pi / 2 or abs(gam) >= math.pi / 2:
        return None
    den = gd - math.sqrt(disc)
    if den >= 0:
        return None
    v = -2.0 * c / den
    if not v > 0:
        return None
    return np.array([v - params.v0, gam, phi[0]])


def aircraft_chart(params, nu=1.0, Q=None, nu_k=1.0):
    """Observer chart Phi = (theta - theta_star, gamma, gamma_dot), in deviation
    coordinates, with L = diag(1, 1, ell), M = ell I, N = I."""
    A = np.zeros((3, 3))
    A[1, 2] = 1.0
    C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    P, Kg = riccati_design(A, C, nu, Q, nu_k)
    g, v0, a, lift = params.g, params.v0, params.theta_star, params.pounds

    def Phi(x):
        return np.array([x[2], x[1], K.gamma_dot(lift, g, x[0] + v0, x[1], x[2] + a)])

    def dPhi(x):
        d0, d1, d2 = K.gamma_dot_grad(lift, g, x[0] + v0, x[1], x[2] + a)
        return np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [d0, d1, d2]])

    return ObserverChart(
        Phi=Phi, dPhi=dPhi, C=C, A_of_u=lambda u: A, K_of_u=lambda u: Kg, P=P,
        L_of_ell=lambda ell: np.diag([1.0, 1.0, float(ell)]),
        M_of_ell=lambda ell: float(ell) * np.eye(3),
        N_of_ell=lambda ell: np.eye(2), nu=nu,
        O_membership=lambda x: in_O(params, params.to_physical(x)),
        Phi_inv=lambda phi: chart_inverse(params, phi), name="aircraft")


def aircraft_barrier(params):
    def h2(x):
        return aircraft_h2(params, params.to_physical(x))[0]

    def grad(x):
        return aircraft_h2(params, params.to_physical(x))[1]

    return BarrierOutput(h2, grad, name="aircraft")


def aircraft_integral_action(params, omega, zbar):
    """k(x, y_r) = v sin(y_r); the anti-windup bounds z - H(x), the forwarding
    coordinate, with H(x) = -(v^2 - v0^2)/(2 g)."""
    v0, g = params.v0, params.g
    return IntegralAction(
        k=lambda x, y: np.array([(v0 + x[0]) * math.sin(y[0])]),
        omega=omega, zbar=zbar,
        H_for_windup=lambda x: np.array([((x[0] + v0) ** 2 - v0 * v0) / (2.0 * g)]),
        L_k=lambda x: abs(v0 + x[0]), margin=params.varsigma)


def aircraft_design(params, saturate_q=True):
    """Explicit forwarding design: the (e, q) law and the Lyapunov function,
    both as maps of deviation coordinates."""
    def psi_fn(x, z):
        xp = params.to_physical(x)
        return np.array(aircraft_feedback(params, z[0], *xp, saturate_q=saturate_q))

    def lyap(x, z):
        xp = params.to_physical(x)
        return aircraft_lyapunov(params, z[0], *xp)

    def beta(x):
        return psi_fn(x, np.zeros(1))

    return ForwardingDesign(beta=beta, variant="explicit", psi_fn=psi_fn, lyapunov_fn=lyap)


def aircraft_level_sets(params, zbar, n_samples=200_000, seed=0, fractions=(0.5, 0.8),
                        refine=64, saturate_q=True):
    """Level sets and saturations on a sampled flight envelope.

    Samples (z, v, gamma, theta) uniformly on |z| <= 2 zbar, v in [0.25, 2] v0,
    |gamma|, |theta| < pi/2, plus Gaussian clouds around trim. The smallest
    V_e among samples outside the barrier's zero set is sharpened by bisecting
    towards trim along the ``refine`` best segments.
    """
    pr = params.as_array()
    rng = np.random.default_rng(seed)
    half = 0.5 * math.pi
    nu = n_samples // 2
    uni = np.column_stack([
        rng.uniform(-2 * zbar, 2 * zbar, nu), rng.uniform(0.25, 2.0, nu) * params.v0,
        rng.uniform(-half, half, nu), rng.uniform(-half, half, nu)])
    trim4 = np.array([0.0, params.v0, 0.0, params.theta_star])
    clouds = []
    per = (n_samples - nu) // 4
    for scale in (0.01, 0.03, 0.1, 0.3):
        sd = scale * np.array([zbar, params.v0, 1.0, 1.0])
        clouds.append(trim4 + rng.normal(size=(per, 4)) * sd)
    pts = np.vstack([uni] + clouds)
    pts = pts[(pts[:, 1] > 0) & (np.abs(pts[:, 2]) < half) & (np.abs(pts[:, 3]) < half)]
    V = K.batch_lyapunov(pr, pts)
    h = K.batch_h2(pr, pts[:, 1:])
    outside = h > 0
    v_inf = float(V[outside].min()) if outside.any() else np.inf
    if outside.any() and refine:
        idx = np.argsort(np.where(outside, V, np.inf))[:refine]
        for i in idx:
            lo, hi = 0.0, 1.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                p = trim4 + mid * (pts[i] - trim4)
                if K.batch_h2(pr, p[None, 1:])[0] > 0:
                    hi = mid
                else:
                    lo = mid
            p = trim4 + hi * (pts[i] - trim4)
            v_inf = min(v_inf, float(K.lyapunov(pr, *p)))
    v1, v2 = fractions[0] * v_inf, fractions[1] * v_inf
    inside = V <= v2
    u = np.empty(inside.sum())
    sel = pts[inside]
    u = K.batch_feedback_norm(pr, sel, saturate_q)
    dev = np.column_stack([sel[:, 1] - params.v0, sel[:, 2], sel[:, 3] - params.theta_star])
    mu = (1.0 + params.varsigma) * float(u.max())
    xbar = (1.0 + params.varsigma) * float(np.linalg.norm(dev, axis=1).max())
    return LevelSetEstimate(v_inf, v1, v2, mu, xbar, len(pts), int(inside.sum()))


@dataclass(frozen=True)
class AircraftLoop:
    """The aircraft closed loop with its fast compiled integration paths.

    ``feedback_source`` is ``"estimate"`` (output feedback) or ``"state"``;
    ``family``/``delta`` select the process perturbation.
    """

    params: AircraftParams = field(default_factory=AircraftParams)
    ell: float = 10.0
    omega: float = 10.0
    zbar: float = 3000.0
    mu: float = 5.25
    xbar: float = 30.0
    tau_margin: float = 1e-6
    tau_scale: float = 2.0
    barrier: bool = True
    feedback_source: str = "estimate"
    saturate_q: bool = True
    family: Optional[str] = None
    delta: float = 0.0
    nu: float = 1.0
    nu_k: float = 1.0
    pin_thrust: Optional[float] = None
    feedback_scale: float = 1.0

    def __post_init__(self):
        if self.feedback_source not in ("estimate", "state"):
            raise ContractViolation("feedback_source must be 'estimate' or 'state'")
        if self.family is not None and self.family not in FAMILIES:
            raise ContractViolation(f"unknown perturbation family {self.family!r}")
        if self.tau_scale < 1.0:
            raise ContractViolation("tau_scale below 1 violates the barrier gain floor")

    def with_levels(self, levels):
        return replace(self, mu=levels.mu, xbar=levels.xbar)

    def chart(self):
        return aircraft_chart(self.params, self.nu, nu_k=self.nu_k)

    def matrices(self):
        """(L M K N, L M P^-1 L^T, M P^-1, (L M P^-1 L^T)^-1) at this gain."""
        ch = self.chart()
        G, MPinv = ch.gain_matrices(self.ell)
        return (np.ascontiguousarray(ch.innovation_gain(self.ell, None)), G, MPinv,
                np.linalg.inv(G))

    def loop_config(self):
        pert = [0.0, 0.0, 0.0]
        if self.family is not None:
            pert[FAMILIES.index(self.family)] = self.delta
        return np.array([
            self.ell, self.mu, self.xbar, self.omega, self.zbar, self.tau_margin,
            1.0 if self.barrier else 0.0, 1.0 if self.feedback_source == "state" else 0.0,
            *pert, 1.0 if self.saturate_q else 0.0, self.tau_scale,
            np.nan if self.pin_thrust is None else self.pin_thrust, self.feedback_scale])

    def _args(self):
        lmk, G, MPinv, Ginv = self.matrices()
        return self.params.as_array(), self.loop_config(), lmk, G, MPinv, Ginv

    def initial_state(self, x_phys, z, xhat_phys):
        p = self.params
        return np.concatenate([p.to_deviation(x_phys), [float(z)], p.to_deviation(xhat_phys)])

    def rhs(self, s):
        """Stacked field at flat state ``s`` (compiled path)."""
        pr, lc, lmk, G, MPinv, _ = self._args()
        out = np.empty(K.NSTATE)
        K.loop_rhs(pr, lc, lmk, G, MPinv, np.asarray(s, dtype=float), out)
        return out

    def control(self, s):
        u = np.empty(2)
        K.loop_inputs(self.params.as_array(), self.loop_config(), np.asarray(s, dtype=float), u)
        return u

    def simulate(self, s0, t_end=60.0, dt=1e-3, stride=100):
        """Fixed-step RK4 of the closed loop; the trace columns are in
        deviation coordinates (see ``TRACE_COLUMNS``)."""
        pr, lc, lmk, G, MPinv, Ginv = self._args()
        nsteps = int(round(t_end / dt))
        rec, count, status = K.integrate_loop_rk4(pr, lc, lmk, G, MPinv, Ginv,
                                                  np.asarray(s0, dtype=float), dt, nsteps, stride)
        cols = {name: rec[:, i + 1].copy() for i, name in enumerate(TRACE_COLUMNS)}
        names = {K.STATUS_OK: "ok", K.STATUS_NONFINITE: "non-finite state",
                 K.STATUS_LEFT_O: "estimate left the observability region",
                 K.STATUS_BAD_PLANT: "plant speed became non-positive"}
        meta = {"method": "rk4", "dt": dt, "t_end": t_end, "stride": stride,
                "coordinates": "deviation from trim (v - v0, gamma, theta - theta_star)"}
        return Trace(rec[:, 0].copy(), cols, names[status], [], meta)

    def observer_run(self, xhat0, signal, t_end=2.0, rtol=1e-7, atol=1e-10, h0=1e-4,
                     max_steps=5_000_000):
        """Observer alone, driven by injected y(t), u(t); adaptive Dormand-Prince.

        Returns a trace with column ``h2hat`` at accepted steps.
        """
        pr, lc, lmk, G, MPinv, _ = self._args()
        out, count, status = K.integrate_observer_adaptive(
            pr, lc, lmk, G, MPinv, signal.as_tuple(), np.asarray(xhat0, dtype=float),
            t_end, rtol, atol, h0, max_steps)
        st = {K.STATUS_OK: "ok", K.STATUS_LEFT_O: "estimate left the observability region"}.get(
            status, "step size underflow")
        if status == K.STATUS_OK and out[-1, 0] < t_end * (1 - 1e-12):
            st = "max_steps"
        return Trace(out[:, 0].copy(), {"h2hat": out[:, 1].copy()}, st, [],
                     {"method": "dopri5", "rtol": rtol, "atol": atol})

    def regulator(self, levels=None):
        """Generic composition matching the compiled loop (for cross-checks)."""
        p = self.params
        if levels is None:
            levels = LevelSetEstimate(np.inf, 0.0, 1.0, self.mu, self.xbar)
        return OutputFeedbackRegulator(
            model=aircraft_model(p), design=aircraft_design(p, self.saturate_q),
            ia=aircraft_integral_action(p, self.omega, self.zbar), chart=self.chart(),
            levels=levels, ell=self.ell, barrier=aircraft_barrier(p) if self.barrier else None,
            tau_margin=self.tau_margin, tau_scale=self.tau_scale, varsigma=p.varsigma,
            feedback_source=self.feedback_source)

    def process(self):
        return aircraft_process(self.params, self.family, self.delta)


@dataclass(frozen=True)
class Injection:
    """y(t), u(t) = base + sum_k amp sin(freq t + phase), per channel."""

    y_amp: np.ndarray
    y_freq: np.ndarray
    y_phase: np.ndarray
    y_base: np.ndarray
    u_amp: np.ndarray
    u_freq: np.ndarray
    u_phase: np.ndarray
    u_base: np.ndarray

    def as_tuple(self):
        f = lambda a: np.ascontiguousarray(np.atleast_2d(a), dtype=float)
        return (f(self.y_amp), f(self.y_freq), f(self.y_phase), f(self.y_base).reshape(2, 1),
                f(self.u_amp), f(self.u_freq), f(self.u_phase), f(self.u_base).reshape(2, 1))

    @classmethod
    def constant(cls, y, u):
        z = np.zeros((2, 1))
        return cls(z, z, z, _vec(y), z, z, z, _vec(u))

    @classmethod
    def random(cls, rng, y_center, y_spread, u_levels, terms=3, max_freq=20.0):
        """Bounded random sinusoids: |y - y_center| <= 2 y_spread and
        |u_i| <= u_levels[i]."""
        y_center = _vec(y_center)
        u_levels = _vec(u_levels)
        ya = rng.uniform(0, y_spread / terms, (2, terms))
        yb = y_center + rng.uniform(-y_spread, y_spread, 2)
        ua = rng.uniform(0, 1.0 / terms, (2, terms)) * u_levels[:, None]
        return cls(ya, rng.uniform(0.1, max_freq, (2, terms)), rng.uniform(0, 2 * np.pi, (2, terms)),
                   yb, ua, rng.uniform(0.1, max_freq, (2, terms)),
                   rng.uniform(0, 2 * np.pi, (2, terms)), np.zeros(2))


def start_on_barrier_level(params, target, rng, spread=(150.0, 1.2, 1.2), max_tries=1000):
    """Random deviation-coordinate point with h2 = target, found by bisection
    along a random ray from trim that stays in the observability region."""
    pr = params.as_array()
    a, v0 = params.theta_star, params.v0

    def h2(x):
        return K.batch_h2(pr, np.array([[x[0] + v0, x[1], x[2] + a]]))[0]

    def ok(x):
        return K.in_observability_region(pr, x[0] + v0, x[1], x[2] + a)

    for _ in range(max_tries):
        d = rng.normal(size=3) * np.asarray(spread)
        ts = np.linspace(0.0, 1.0, 201)
        prev = 0.0
        hit = None
        for t in ts[1:]:
            if not ok(t * d):
                break
            if h2(t * d) >= target:
                hit = t
                break
            prev = t
        if hit is None:
            continue
        lo, hi = prev, hit
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if h2(mid * d) < target:
                lo = mid
            else:
                hi = mid
        return hi * d
    raise RuntimeError("could not place a start point on the requested barrier level")


def phugoid_run(params, v_init, gamma_init, t_end=10.0, dt=1e-4):
    """Integrate (v, gamma) with e = 0 and theta - gamma pinned at trim."""
    g, lift, a = params.g, params.pounds, params.theta_star

    def rhs(t, s):
        v, gam = s
        return np.array([-g * math.sin(gam), lift * v * math.sin(a) - g * math.cos(gam) / v])

    def diag(t, s):
        return {"I": phugoid_invariant(params, s[0], s[1])}

    return integrate(rhs, [v_init, gamma_init], IntegratorConfig(t_end=t_end, dt=dt, record_every=100),
                     diagnostics=diag, state_names=["v", "gamma"])


def nominal_initial_state(params, offset=0.05):
    """Scenario start: (1.05 v0, 0.1, theta_star + 0.05), z = 0, estimate
    scaled by (1 + offset) in physical coordinates."""
    x0 = np.array([1.05 * params.v0, 0.1, params.theta_star + 0.05])
    xh = x0 * (1.0 + offset)
    return np.concatenate([params.to_deviation(x0), [0.0], params.to_deviation(xh)])
