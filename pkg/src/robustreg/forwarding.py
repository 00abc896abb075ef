"""Integral action and forwarding state feedback.

The regulated output is integrated as ``zdot = k(x, y_r)`` and the pair
``(x, z)`` is stabilized by adding a forwarding term to a given stabilizer
``beta``. Four textbook variants are supported plus ``"explicit"``, where the
designer hands over psi and the extended Lyapunov function directly (the
aircraft uses this).
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kernels import sat_scalar, sat_slope
from .model import (ConfigurationError, ContractViolation, DesignError, DomainError,
                    _vec, eval_model, numerical_jacobian)

VARIANTS = ("a", "b", "c", "c-teel", "explicit")


def sat_array(s, level, margin=0.05):
    """Vectorized smooth saturation; same curve as ``kernels.sat_scalar``."""
    s = np.asarray(s, dtype=float)
    lo = level / (1.0 + margin)
    w = level - lo
    a = np.abs(s)
    t = np.clip((a - lo) / (2.0 * w), 0.0, 1.0)
    blended = np.where(a <= lo, a, lo + w * (2.0 * t - t * t))
    return np.sign(s) * blended


@dataclass(frozen=True)
class SmoothSaturation:
    level: float
    margin: float = 0.05

    def __post_init__(self):
        if not (self.level > 0 and self.margin > 0):
            raise ContractViolation("saturation level and margin must be positive")

    @property
    def linear_limit(self):
        return self.level / (1.0 + self.margin)

    @property
    def flat_from(self):
        return self.level * (1.0 + 2.0 * self.margin) / (1.0 + self.margin)

    def __call__(self, s):
        if np.ndim(s) == 0:
            return sat_scalar(float(s), self.level, self.margin)
        return sat_array(s, self.level, self.margin)

    def derivative(self, s):
        if np.ndim(s) == 0:
            return sat_slope(float(s), self.level, self.margin)
        return np.vectorize(lambda v: sat_slope(v, self.level, self.margin))(s)


def smooth_sat(s, sat):
    return sat(s)


@dataclass(frozen=True)
class IntegralAction:
    """zdot = k(sat_xbar(x), y_r) + omega [sat_zbar(w) - w], w = z + H_for_windup(x)."""

    k: Callable
    omega: float
    zbar: float
    H_for_windup: Callable
    L_k: Optional[Callable] = None
    margin: float = 0.05

    def __post_init__(self):
        if self.omega < 0 or self.zbar <= 0:
            raise ContractViolation("need omega >= 0 and zbar > 0")

    def windup(self, x, z):
        return _vec(z) + _vec(self.H_for_windup(x))

    def antiwindup(self, x, z):
        w = self.windup(x, z)
        return self.omega * (sat_array(w, self.zbar, self.margin) - w)


def integrator_rhs(ia, x_or_xhat, y_r, z, xbar):
    x = _vec(x_or_xhat)
    xs = sat_array(x, xbar, ia.margin)
    return _vec(ia.k(xs, _vec(y_r))) + ia.antiwindup(x, z)


def check_integral_action(ia, states, outputs, tol=1e-6, seed=0):
    """Sampled checks of k(x,0)=0, k(x,y)=0 only at y=0, dk/dx(x,0)=0 and the
    Lipschitz bound in y_r. Returns a dict of worst values and flags."""
    states = np.atleast_2d(states)
    outputs = np.atleast_2d(outputs)
    rng = np.random.default_rng(seed)
    worst_zero = 0.0
    worst_grad = 0.0
    min_nonzero = np.inf
    lip_ok = True
    for x, ya in zip(states, outputs):
        r = ya.size
        worst_zero = max(worst_zero, float(np.linalg.norm(ia.k(x, np.zeros(r)))))
        jx = numerical_jacobian(lambda xx: ia.k(xx, np.zeros(r)), x)
        worst_grad = max(worst_grad, float(np.linalg.norm(jx)))
        if np.linalg.norm(ya) > 0:
            min_nonzero = min(min_nonzero, float(np.linalg.norm(ia.k(x, ya)) / np.linalg.norm(ya)))
        if ia.L_k is not None:
            yb = ya + rng.normal(scale=0.1, size=r)
            lhs = np.linalg.norm(_vec(ia.k(x, ya)) - _vec(ia.k(x, yb)))
            lip_ok &= bool(lhs <= ia.L_k(x) * np.linalg.norm(ya - yb) * (1 + 1e-9) + 1e-12)
    return {
        "k_at_zero": worst_zero,
        "dk_dx_at_zero": worst_grad,
        "min_gain_off_zero": min_nonzero,
        "lipschitz_ok": lip_ok,
        "ok": worst_zero <= tol and worst_grad <= tol and min_nonzero > 0 and lip_ok,
    }


class TanhJ:
    """J(x, v) = K_J tanh(v); bounded and v'J(x,v) > 0 for K_J positive definite."""

    def __init__(self, KJ=1.0):
        self.KJ = np.asarray(KJ, dtype=float)

    def __call__(self, x, v):
        t = np.tanh(_vec(v))
        if self.KJ.ndim == 0:
            return self.KJ * t
        return self.KJ @ t


def identity_J(x, v):
    return _vec(v)


@dataclass(frozen=True)
class ForwardingDesign:
    beta: Callable
    variant: str = "a"
    J: Callable = identity_J
    V: Optional[Callable] = None
    H: Optional[Callable] = None
    H0: Optional[np.ndarray] = None
    gamma_gain: Callable = lambda x: 1.0
    eps: float = 1.0
    d_scale: Callable = lambda s: s
    psi_fn: Optional[Callable] = None
    lyapunov_fn: Optional[Callable] = None
    dH: Optional[Callable] = None
    gradV: Optional[Callable] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown forwarding variant {self.variant!r}")
        need = {"a": ("V", "H"), "b": ("H",), "c": ("H0",), "c-teel": ("H0",),
                "explicit": ("psi_fn", "lyapunov_fn")}[self.variant]
        missing = [name for name in need if getattr(self, name) is None]
        if missing:
            raise ConfigurationError(f"variant {self.variant} needs {', '.join(missing)}")

    def jac_H(self, x):
        if self.dH is not None:
            return np.atleast_2d(self.dH(x))
        return numerical_jacobian(self.H, x)

    def grad_V(self, x):
        if self.gradV is not None:
            return _vec(self.gradV(x))
        return numerical_jacobian(lambda xx: np.array([self.V(xx)]), x)[0]


def psi(design, model, x, z):
    """Forwarding feedback for the augmented (x, z) system."""
    x = _vec(x)
    z = _vec(z)
    if design.variant == "explicit":
        return _vec(design.psi_fn(x, z))
    b = _vec(design.beta(x))
    gx = model.g_matrix(x)
    if design.variant == "a":
        LgV = design.grad_V(x) @ gx
        LgH = design.jac_H(x) @ gx
        arg = LgV - (z - _vec(design.H(x))) @ LgH
        return b - _vec(design.J(x, arg))
    if design.variant == "b":
        LgH = design.jac_H(x) @ gx
        return b + design.gamma_gain(x) * (LgH.T @ _vec(design.J(x, z - _vec(design.H(x)))))
    H0 = np.atleast_2d(design.H0)
    if design.variant == "c":
        return b + design.gamma_gain(x) * (gx.T @ H0.T @ _vec(design.J(x, z - H0 @ x)))
    g0 = model.g_matrix(np.zeros(model.n))
    arg = g0.T @ H0.T @ (z - H0 @ x) / design.eps
    return b + design.eps * _vec(design.J(x, arg))


def extended_lyapunov(design, x, z):
    x = _vec(x)
    z = _vec(z)
    if design.variant == "explicit":
        return float(design.lyapunov_fn(x, z))
    if design.V is None:
        raise ConfigurationError("extended Lyapunov function needs V")
    v = float(design.V(x))
    if not np.isfinite(v):
        raise DomainError(f"V undefined at {x}")
    if design.variant in ("a", "b"):
        e = z - _vec(design.H(x))
        return v + 0.5 * float(e @ e)
    e = z - np.atleast_2d(design.H0) @ x
    return float(design.d_scale(v)) + np.sqrt(1.0 + 0.5 * float(e @ e)) - 1.0


def compute_H0(model, ia, beta_jacobian):
    """H0 = dk/dy_r(0,0) dh_r/dx(0) [df/dx(0) + g(0) dbeta/dx(0)]^-1."""
    zero = np.zeros(model.n)
    a = numerical_jacobian(model.f, zero)
    acl = a + model.g_matrix(zero) @ np.atleast_2d(beta_jacobian)
    ky = numerical_jacobian(lambda y: ia.k(zero, y), np.zeros(model.r))
    cr = numerical_jacobian(model.h_r, zero)
    if np.linalg.cond(acl) > 1e12:
        raise DesignError("closed-loop linearization is singular; the stabilizer is not exponential")
    return ky @ cr @ np.linalg.inv(acl)


def check_upsilon(J, states, dim, count=20, seed=0):
    """Probe v'J(x, v) > 0 on random v and nonsingularity of dJ/dv(x, 0)."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    min_det = np.inf
    for x in np.atleast_2d(states):
        for _ in range(count):
            v = rng.normal(size=dim)
            worst = min(worst, float(v @ _vec(J(x, v))) / float(v @ v))
        jv = numerical_jacobian(lambda vv: J(x, vv), np.zeros(dim))
        min_det = min(min_det, abs(float(np.linalg.det(jv))))
    return {"min_ratio": worst, "min_abs_det": min_det, "ok": worst > 0 and min_det > 1e-12}


def beta_residual(design, model, ia, states):
    """sup |dH/dx (f + g beta) - k(x, h_r(x))| over samples (variants a, b)."""
    if design.H is None:
        raise ConfigurationError("residual needs H")
    worst = 0.0
    for x in np.atleast_2d(states):
        xdot = eval_model(model, x, design.beta(x))
        res = design.jac_H(x) @ xdot - _vec(ia.k(x, model.h_r(x)))
        worst = max(worst, float(np.linalg.norm(res)))
    return worst


def estimate_vS(V, complement_samples):
    """Sampled infimum of V outside S; +inf if no samples are given."""
    pts = np.atleast_2d(complement_samples)
    if pts.size == 0:
        return np.inf
    return float(min(V(x) for x in pts))


def make_proper(V, v_S):
    """x -> V(x) / (v_S - V(x)) so the result blows up on the edge of S."""
    if not np.isfinite(v_S):
        return V

    def proper(x):
        val = V(x)
        if val >= v_S:
            raise DomainError(f"V(x) = {val} reaches v_S = {v_S}")
        return val / (v_S - val)

    return proper
