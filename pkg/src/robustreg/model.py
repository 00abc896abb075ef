"""System and process abstractions, finite differences, discrepancy metrics."""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ContractViolation(ValueError):
    """Inputs do not satisfy an operation's preconditions."""


class DomainError(ValueError):
    """A point lies outside the domain where a map is defined."""


class ConfigurationError(ValueError):
    pass


class DesignError(ValueError):
    pass


def _vec(a):
    return np.atleast_1d(np.asarray(a, dtype=float))


@dataclass(frozen=True)
class ControlAffineModel:
    """Design model xdot = f(x) + g(x) u, y = h(x); y_r = h(x)[r_indices]."""

    n: int
    m: int
    p: int
    f: Callable
    g: Callable
    h: Callable
    r_indices: Sequence[int]
    name: str = ""
    origin_tol: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "r_indices", tuple(int(i) for i in self.r_indices))
        if self.r > self.m:
            raise ContractViolation(f"r = {self.r} exceeds m = {self.m}")
        if any(i < 0 or i >= self.p for i in self.r_indices):
            raise ContractViolation("r_indices out of range of the output")
        zero = np.zeros(self.n)
        f0 = _vec(self.f(zero))
        h0 = _vec(self.h(zero))
        if f0.shape != (self.n,) or h0.shape != (self.p,):
            raise ContractViolation("f or h returned the wrong shape at the origin")
        if np.max(np.abs(f0)) > self.origin_tol:
            raise ContractViolation(f"f(0) = {f0} is not zero")
        if np.max(np.abs(h0)) > self.origin_tol:
            raise ContractViolation(f"h(0) = {h0} is not zero")
        g0 = np.asarray(self.g(zero), dtype=float)
        if g0.shape != (self.n, self.m):
            raise ContractViolation(f"g(0) has shape {g0.shape}, expected {(self.n, self.m)}")

    @property
    def r(self):
        return len(self.r_indices)

    def h_r(self, x):
        return _vec(self.h(x))[list(self.r_indices)]

    def g_matrix(self, x):
        gx = np.asarray(self.g(x), dtype=float)
        if gx.shape != (self.n, self.m):
            raise ContractViolation(f"g(x) has shape {gx.shape}, expected {(self.n, self.m)}")
        return gx


def eval_model(model, x, u):
    """f(x) + g(x) u."""
    x = _vec(x)
    u = _vec(u)
    if x.shape != (model.n,) or u.shape != (model.m,):
        raise ContractViolation(
            f"expected x of size {model.n} and u of size {model.m}, got {x.shape} and {u.shape}")
    return _vec(model.f(x)) + model.g_matrix(x) @ u


@dataclass(frozen=True)
class ProcessModel:
    """True plant xdot = xi(x, u), y = zeta(x, u)."""

    xi: Callable
    zeta: Callable
    base: Optional[ControlAffineModel] = None
    label: str = ""

    def __post_init__(self):
        if self.base is not None:
            y = _vec(self.zeta(np.zeros(self.base.n), np.zeros(self.base.m)))
            if y.shape != (self.base.p,):
                raise ContractViolation(
                    f"process output has size {y.size}, base model has p = {self.base.p}")

    @classmethod
    def from_model(cls, model, label="nominal"):
        return cls(xi=lambda x, u: eval_model(model, x, u),
                   zeta=lambda x, u: _vec(model.h(x)), base=model, label=label)

    def regulated(self, x, u):
        if self.base is None:
            raise ConfigurationError("process has no base model to pick regulated outputs")
        return _vec(self.zeta(x, u))[list(self.base.r_indices)]


def default_steps(point):
    return 1e-6 * (1.0 + np.abs(point))


def numerical_jacobian(fn, point, step=None):
    """Central-difference Jacobian of ``fn`` at ``point``.

    ``step`` may be a scalar or per-coordinate array; default
    ``1e-6 * (1 + |point|)``.
    """
    x = _vec(point).copy()
    if step is None:
        steps = default_steps(x)
    else:
        steps = np.broadcast_to(np.asarray(step, dtype=float), x.shape).copy()
    if np.any(steps <= 0):
        raise ContractViolation("finite-difference step must be positive")
    cols = []
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        fp = _vec(fn(xp))
        fm = _vec(fn(xm))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite evaluation perturbing coordinate {i}")
        # divide by the realised step, not the nominal one, to cancel representation error
        cols.append((fp - fm) / (xp[i] - xm[i]))
    return np.column_stack(cols)


@dataclass
class DiscrepancyReport:
    c0_gap: float
    c1_gap: Optional[float]
    sample_count: int
    region: str = ""
    order: int = 0

    def as_dict(self):
        return {"c0_gap": self.c0_gap, "c1_gap": self.c1_gap,
                "sample_count": self.sample_count, "region": self.region, "order": self.order}


def box_sampler(lo, hi, count, seed=0):
    """Uniform samples in the box [lo, hi]; deterministic given ``seed``."""
    lo = _vec(lo)
    hi = _vec(hi)
    rng = np.random.default_rng(seed)
    return lo + (hi - lo) * rng.random((count, lo.size))


def discrepancy(model, process, states, inputs, order=0, region=""):
    """Sampled model/process gaps on paired rows of ``states`` and ``inputs``.

    Order 0: sup |xi - (f + g u)| + |zeta - h|. Order 1 also returns the sup
    of the Frobenius norm of the Jacobian difference of
    ``(x, u) -> (xi, zeta)`` against ``(f + g u, h)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if states.shape[0] == 0:
        raise ContractViolation("empty sample set")
    if inputs.shape[0] == 1 and states.shape[0] > 1:
        inputs = np.repeat(inputs, states.shape[0], axis=0)
    if inputs.shape[0] != states.shape[0]:
        raise ContractViolation("states and inputs must be paired row by row")
    n, m = model.n, model.m

    def stacked_model(w):
        x, u = w[:n], w[n:]
        return np.concatenate([eval_model(model, x, u), _vec(model.h(x))])

    def stacked_process(w):
        x, u = w[:n], w[n:]
        return np.concatenate([_vec(process.xi(x, u)), _vec(process.zeta(x, u))])

    c0 = 0.0
    c1 = 0.0 if order >= 1 else None
    for x, u in zip(states, inputs):
        dx = _vec(process.xi(x, u)) - eval_model(model, x, u)
        dy = _vec(process.zeta(x, u)) - _vec(model.h(x))
        c0 = max(c0, float(np.linalg.norm(dx) + np.linalg.norm(dy)))
        if order >= 1:
            w = np.concatenate([x, u])
            jd = numerical_jacobian(stacked_process, w) - numerical_jacobian(stacked_model, w)
            c1 = max(c1, float(np.linalg.norm(jd, "fro")))
    return DiscrepancyReport(c0, c1, states.shape[0], region, order)


def check_nonresonance(model, tol=None):
    """Right invertibility of [[df/dx(0), g(0)], [dh_r/dx(0), 0]].

    Returns ``(ok, sigma_min)``; ``tol`` defaults to ``1e-8 * sigma_max``.
    """
    zero = np.zeros(model.n)
    a = numerical_jacobian(model.f, zero)
    b = model.g_matrix(zero)
    c = numerical_jacobian(model.h_r, zero)
    top = np.hstack([a, b])
    bottom = np.hstack([c, np.zeros((model.r, model.m))])
    sv = np.linalg.svd(np.vstack([top, bottom]), compute_uv=False)
    rows = model.n + model.r
    smin = float(sv[rows - 1]) if sv.size >= rows else 0.0
    if tol is None:
        tol = 1e-8 * float(sv[0]) if sv.size else 0.0
    return smin > tol, smin


def double_integrator():
    """xdot1 = x2, xdot2 = u, y = y_r = x1."""
    return ControlAffineModel(
        n=2, m=1, p=1,
        f=lambda x: np.array([x[1], 0.0]),
        g=lambda x: np.array([[0.0], [1.0]]),
        h=lambda x: np.array([x[0]]),
        r_indices=(0,), name="double-integrator")
