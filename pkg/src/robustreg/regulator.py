"""Saturated output feedback: integral action, forwarding feedback evaluated
on the estimate, and the observer, wired into one vector field."""

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .forwarding import extended_lyapunov, integrator_rhs, psi, sat_array
from .model import ContractViolation, ControlAffineModel, ProcessModel, _vec, eval_model
from .observer import observer_rhs


@dataclass
class LevelSetEstimate:
    v_infty: float
    v1: float
    v2: float
    mu: float
    xbar: float
    sample_count: int = 0
    inside_count: int = 0
    coverage_warning: str = ""

    def __post_init__(self):
        if not (self.v1 < self.v2 < self.v_infty):
            raise ContractViolation(
                f"need v1 < v2 < v_infty, got {self.v1}, {self.v2}, {self.v_infty}")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _pointwise(fn):
    def batch(*arrays):
        return np.array([fn(*row) for row in zip(*arrays)])
    return batch


def estimate_level_sets(xs, zs, Ve, psi_fn, h2, varsigma=0.05, fractions=(0.5, 0.8), v2=None):
    """Sampled v_infty, nested levels v1 < v2 and the saturation levels.

    ``Ve(xs, zs)``, ``psi_fn(xs, zs)`` and ``h2(xs)`` are batch maps over the
    sample rows (wrap pointwise maps with :func:`batched`). ``v_infty`` is the
    smallest V_e among samples with h2 > 0; if there are none it is +inf and
    ``v2`` must be given. mu and xbar are (1 + varsigma) times the largest
    |psi| and |x| over the samples with V_e <= v2.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    V = np.asarray(Ve(xs, zs), dtype=float)
    outside = np.asarray(h2(xs), dtype=float) > 0.0
    note = ""
    if outside.any():
        v_inf = float(V[outside].min())
    else:
        v_inf = np.inf
        note = "no samples outside the barrier's zero set; v_infty taken as +inf"
        warnings.warn(note, RuntimeWarning)
    if v2 is None:
        if not np.isfinite(v_inf):
            raise ContractViolation("v_infty is infinite: give v2 explicitly")
        v1, v2 = fractions[0] * v_inf, fractions[1] * v_inf
    else:
        v1 = v2 * fractions[0] / fractions[1]
    inside = V <= v2
    if not inside.any():
        raise ContractViolation("no samples inside the level set v2; refine the sampler")
    u = np.atleast_2d(np.asarray(psi_fn(xs[inside], zs[inside]), dtype=float))
    if u.shape[0] != inside.sum():
        u = u.T
    mu = (1.0 + varsigma) * float(np.linalg.norm(u, axis=1).max())
    xbar = (1.0 + varsigma) * float(np.linalg.norm(xs[inside], axis=1).max())
    return LevelSetEstimate(v_inf, v1, v2, mu, xbar, len(V), int(inside.sum()), note)


def batched(fn):
    """Turn ``fn(x, z)`` or ``fn(x)`` into a map over stacked sample rows."""
    return _pointwise(fn)


@dataclass(frozen=True)
class ClosedLoopState:
    x: np.ndarray
    z: np.ndarray
    xhat: np.ndarray

    def flat(self):
        return np.concatenate([_vec(self.x), _vec(self.z), _vec(self.xhat)])

    @classmethod
    def from_flat(cls, s, n, r):
        s = _vec(s)
        return cls(s[:n], s[n:n + r], s[n + r:])


@dataclass(frozen=True)
class OutputFeedbackRegulator:
    """u = sat_mu(psi(x_hat, z)); zdot = integral action on y_r with x_hat;
    x_hat driven by the observer. ``feedback_source="state"`` feeds the true
    state instead of the estimate (state feedback, observer still running)."""

    model: ControlAffineModel
    design: object
    ia: object
    chart: object
    levels: LevelSetEstimate
    ell: float
    barrier: Optional[object] = None
    tau_margin: float = 1.0
    tau_scale: float = 1.0
    varsigma: float = 0.05
    feedback_source: str = "estimate"

    def control(self, xfb, z):
        return psi_sat(self.design, self.levels, self.model, xfb, z, self.varsigma)

    def unpack(self, s):
        return ClosedLoopState.from_flat(s, self.model.n, self.model.r)


def psi_sat(design, levels, model, xhat, z, varsigma=0.05):
    """Componentwise smooth saturation of psi at level mu."""
    return sat_array(psi(design, model, xhat, z), levels.mu, varsigma)


def closed_loop_rhs(plant, reg, state, ell=None):
    """Stacked (x, z, x_hat) field for a model or a process plant."""
    ell = reg.ell if ell is None else ell
    st = state if isinstance(state, ClosedLoopState) else reg.unpack(state)
    x, z, xhat = st.x, st.z, st.xhat
    xfb = x if reg.feedback_source == "state" else xhat
    u = reg.control(xfb, z)
    if isinstance(plant, ProcessModel):
        xdot = _vec(plant.xi(x, u))
        y = _vec(plant.zeta(x, u))
    else:
        xdot = eval_model(plant, x, u)
        y = _vec(plant.h(x))
    y_r = y[list(reg.model.r_indices)]
    zdot = integrator_rhs(reg.ia, xfb, y_r, z, reg.levels.xbar)
    xhdot = observer_rhs(reg.chart, reg.model, xhat, y, u, ell, reg.barrier,
                         reg.tau_margin, reg.tau_scale)
    return np.concatenate([xdot, zdot, xhdot])


def extended_value(reg, state):
    st = state if isinstance(state, ClosedLoopState) else reg.unpack(state)
    return extended_lyapunov(reg.design, st.x, st.z)
