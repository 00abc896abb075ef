"""Checks of behavioural claims on traces and vector fields."""

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .model import ContractViolation, numerical_jacobian

STABILITY_MARGIN = 1e-8


@dataclass
class Verdict:
    passed: bool
    worst: float = 0.0
    t_worst: Optional[float] = None
    note: str = ""

    def __bool__(self):
        return self.passed


def lyapunov_decrease(trace, which="V_e", slack=1e-6):
    """Non-increase of a diagnostic column up to ``slack * (1 + |V|)`` per step."""
    if which not in trace:
        raise ContractViolation(f"trace has no {which!r} column")
    v = np.asarray(trace[which], dtype=float)
    if v.size < 2:
        return Verdict(True, 0.0, None, "fewer than two samples")
    excess = np.diff(v) - slack * (1.0 + np.abs(v[:-1]))
    i = int(np.argmax(excess))
    worst = float(excess[i])
    if worst <= 0.0:
        return Verdict(True, worst)
    return Verdict(False, worst, float(trace.t[i + 1]), f"{which} rose at t={trace.t[i + 1]:.6g}")


@dataclass
class ContractionFit:
    rate: Optional[float]
    r2: Optional[float]
    status: str
    window: tuple = ()


def fit_contraction(t, U=None, floor=1e-16, t_start=0.0, t_stop=None):
    """Least-squares exponential rate of ``U`` (or of a trace's ``U_ell``).

    The window runs from ``t_start`` until ``U`` first drops to ``floor``
    (or ``t_stop``). Returns ``status="converged"`` when it is empty.
    """
    if U is None:
        trace = t
        t, U = trace.t, trace["U_ell"]
    t = np.asarray(t, dtype=float)
    U = np.asarray(U, dtype=float)
    mask = t >= t_start
    if t_stop is not None:
        mask &= t <= t_stop
    below = np.nonzero(mask & (U <= floor))[0]
    if below.size:
        mask &= np.arange(t.size) < below[0]
    if mask.sum() < 3:
        return ContractionFit(None, None, "converged")
    tt = t[mask]
    ly = np.log(U[mask])
    slope, icpt = np.polyfit(tt, ly, 1)
    resid = ly - (slope * tt + icpt)
    ss = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss if ss > 0 else 1.0
    return ContractionFit(float(-slope), r2, "ok", (float(tt[0]), float(tt[-1])))


class NonConvergence(RuntimeError):
    def __init__(self, msg, best_residual, best_point):
        super().__init__(msg)
        self.best_residual = best_residual
        self.best_point = best_point


@dataclass
class Equilibrium:
    point: np.ndarray
    residual: float
    eigenvalues: np.ndarray
    iterations: int
    regulated: Optional[np.ndarray] = None

    @property
    def spectral_abscissa(self):
        return float(np.max(self.eigenvalues.real))

    @property
    def stable(self):
        return self.spectral_abscissa <= -STABILITY_MARGIN


def find_equilibrium(rhs, seed_state, newton_tol=1e-10, max_iter=50, regulated=None, step=None):
    """Damped Newton on ``rhs(x) = 0`` with a central-difference Jacobian.

    ``regulated(x)`` is evaluated at the root when given. Raises
    :class:`NonConvergence` carrying the best residual.
    """
    x = np.array(seed_state, dtype=float)
    fx = np.asarray(rhs(x), dtype=float)
    res = float(np.linalg.norm(fx))
    best = (res, x.copy())
    it = 0
    while res > newton_tol and it < max_iter:
        it += 1
        J = numerical_jacobian(rhs, x, step)
        dx = np.linalg.lstsq(J, -fx, rcond=None)[0]
        lam = 1.0
        while lam > 1e-6:
            xn = x + lam * dx
            try:
                fn = np.asarray(rhs(xn), dtype=float)
            except (ValueError, ArithmeticError, np.linalg.LinAlgError):
                fn = np.full_like(fx, np.nan)
            rn = float(np.linalg.norm(fn))
            if np.isfinite(rn) and rn < res:
                break
            lam *= 0.5
        else:
            break
        x, fx, res = xn, fn, rn
        if res < best[0]:
            best = (res, x.copy())
    if res > newton_tol:
        raise NonConvergence(f"Newton stalled at residual {best[0]:.3g} after {it} iterations",
                             best[0], best[1])
    eig = np.linalg.eigvals(numerical_jacobian(rhs, x, step))
    reg = None if regulated is None else np.atleast_1d(regulated(x))
    return Equilibrium(x, res, eig, it, reg)


@dataclass
class SweepRow:
    delta: float
    converged: bool
    regulated_at_eq: Optional[float]
    spectral_abscissa: Optional[float]
    stayed_in_compact: bool
    passed: bool
    note: str = ""


@dataclass
class SweepTable:
    rows: List[SweepRow]

    @property
    def delta_star(self):
        """Largest delta such that it and every smaller grid point pass."""
        best = None
        for row in sorted(self.rows, key=lambda r: abs(r.delta)):
            if not row.passed:
                break
            best = row.delta
        return best

    def to_csv(self, path):
        names = list(SweepRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([getattr(r, k) for k in names])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"delta_star": self.delta_star, "rows": [asdict(r) for r in self.rows]},
                      fh, indent=1)


def robustness_sweep(run_delta: Callable[[float], SweepRow], delta_grid):
    """Evaluate ``run_delta`` on each grid point; failures are rows, not errors."""
    rows = []
    for d in delta_grid:
        try:
            rows.append(run_delta(float(d)))
        except (NonConvergence, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            rows.append(SweepRow(float(d), False, None, None, False, False, str(exc)))
    return SweepTable(rows)


def invariance_check(trace, predicate):
    """True iff ``predicate(sample)`` holds for every sample, where ``sample``
    maps column names to values."""
    if len(trace) == 0:
        warnings.warn("empty trace: invariance holds vacuously", RuntimeWarning)
        return Verdict(True, note="empty trace")
    names = trace.names
    for i, row in enumerate(trace.matrix()):
        if not predicate(dict(zip(names, row))):
            return Verdict(False, float(i), float(trace.t[i]), f"left the set at t={trace.t[i]:.6g}")
    return Verdict(True)
