"""ODE integration with trace recording and sample-and-hold events."""

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.integrate import RK45

from .model import ContractViolation


@dataclass(frozen=True)
class IntegratorConfig:
    """``method`` is ``"rk4"`` (fixed step ``dt``) or ``"rk45"`` (adaptive
    Dormand-Prince with ``rtol``/``atol``). ``record_every`` thins the trace
    for the fixed-step method."""

    t_end: float
    method: str = "rk4"
    dt: float = 1e-3
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 10_000_000
    record_every: int = 1

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ContractViolation(f"unknown method {self.method!r}")
        if self.dt <= 0 or self.rtol <= 0 or self.atol <= 0 or self.t_end < 0:
            raise ContractViolation("dt, tolerances must be positive and t_end non-negative")
        if self.max_steps < 1 or self.record_every < 1:
            raise ContractViolation("max_steps and record_every must be >= 1")


@dataclass(frozen=True)
class Event:
    predicate: Callable
    action: str = "stop"
    name: str = "event"


def register_event(predicate, action="stop", name="event"):
    """Handle for a per-step predicate ``predicate(t, x)``; pass it to
    :func:`integrate`. ``action`` is ``"stop"`` or ``"flag"``."""
    if action not in ("stop", "flag"):
        raise ContractViolation("action must be 'stop' or 'flag'")
    return Event(predicate, action, name)


@dataclass
class Trace:
    """Time samples with named columns; ``status`` is ``"ok"`` unless the run
    was cut short."""

    t: np.ndarray
    columns: Dict[str, np.ndarray]
    status: str = "ok"
    events: List[tuple] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, name):
        if name == "t":
            return self.t
        return self.columns[name]

    def __contains__(self, name):
        return name == "t" or name in self.columns

    @property
    def names(self):
        return ["t"] + list(self.columns)

    def matrix(self):
        return np.column_stack([self.t] + [self.columns[k] for k in self.columns])

    def group(self, prefix):
        """Columns named ``prefix0, prefix1, ...`` stacked as a 2-D array."""
        keys = [k for k in self.columns if k.startswith(prefix) and k[len(prefix):].isdigit()]
        keys.sort(key=lambda k: int(k[len(prefix):]))
        return np.column_stack([self.columns[k] for k in keys])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.names)
            for row in self.matrix():
                w.writerow([repr(float(v)) for v in row])

    def to_json(self, path):
        doc = {"metadata": self.metadata, "status": self.status,
               "events": [list(e) for e in self.events],
               "columns": {name: [float(v) for v in self[name]] for name in self.names}}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)


def _names(dim, state_names):
    if state_names is None:
        return [f"x{i}" for i in range(dim)]
    if len(state_names) != dim:
        raise ContractViolation("state_names length does not match the state")
    return list(state_names)


class _Recorder:
    def __init__(self, names, diagnostics):
        self.names = names
        self.diagnostics = diagnostics
        self.t = []
        self.rows = []
        self.extra = {}

    def add(self, t, x):
        self.t.append(t)
        self.rows.append(np.array(x, dtype=float))
        if self.diagnostics is not None:
            for k, v in self.diagnostics(t, x).items():
                self.extra.setdefault(k, []).append(float(v))

    def trace(self, status, events, metadata):
        data = np.array(self.rows) if self.rows else np.empty((0, len(self.names)))
        cols = {name: data[:, i] for i, name in enumerate(self.names)}
        for k, v in self.extra.items():
            cols[k] = np.array(v)
        return Trace(np.array(self.t), cols, status, events, metadata)


def _check_events(events, t, x, fired, idx):
    stop = False
    for ev in events:
        if ev.predicate(t, x):
            fired.append((ev.name, float(t), idx))
            stop |= ev.action == "stop"
    return stop


def rk4_step(rhs, t, x, dt):
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs, x0, config, events: Sequence[Event] = (), diagnostics=None,
              state_names=None, metadata=None):
    """Integrate ``xdot = rhs(t, x)`` from ``x0`` over ``[0, config.t_end]``.

    A non-finite state or rhs error truncates the trace and sets ``status``;
    stop-events end the run at the first accepted step where they hold.
    """
    x = np.array(x0, dtype=float)
    names = _names(x.size, state_names)
    rec = _Recorder(names, diagnostics)
    fired = []
    meta = {"method": config.method, "t_end": config.t_end}
    if config.method == "rk4":
        meta["dt"] = config.dt
    else:
        meta.update(rtol=config.rtol, atol=config.atol)
    meta.update(metadata or {})
    t = 0.0
    try:
        f0 = np.asarray(rhs(0.0, x), dtype=float)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        rec.add(t, x)
        return rec.trace(f"rhs error at start: {exc}", fired, meta)
    if not np.all(np.isfinite(f0)):
        raise ContractViolation("rhs is not finite at the initial state")
    rec.add(t, x)
    if _check_events(events, t, x, fired, 0):
        return rec.trace("ok", fired, meta)
    status = "ok"
    if config.method == "rk4":
        nsteps = int(round(config.t_end / config.dt))
        if nsteps > config.max_steps:
            nsteps = config.max_steps
            status = "max_steps"
        for i in range(nsteps):
            try:
                xn = rk4_step(rhs, t, x, config.dt)
            except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                status = f"rhs error at t={t:.6g}: {exc}"
                break
            t = (i + 1) * config.dt
            if not np.all(np.isfinite(xn)):
                status = f"non-finite state at t={t:.6g}"
                break
            x = xn
            last = i == nsteps - 1
            stop = _check_events(events, t, x, fired, len(rec.t))
            if (i + 1) % config.record_every == 0 or last or stop:
                rec.add(t, x)
            if stop:
                break
        return rec.trace(status, fired, meta)

    solver = RK45(lambda tt, xx: np.asarray(rhs(tt, xx), dtype=float), 0.0, x,
                  config.t_end, rtol=config.rtol, atol=config.atol)
    steps = 0
    while solver.status == "running":
        if steps >= config.max_steps:
            status = "max_steps"
            break
        try:
            msg = solver.step()
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            status = f"rhs error at t={solver.t:.6g}: {exc}"
            break
        steps += 1
        if solver.status == "failed":
            status = f"step size underflow at t={solver.t:.6g}: {msg}"
            break
        if not np.all(np.isfinite(solver.y)):
            status = f"non-finite state at t={solver.t:.6g}"
            break
        rec.add(solver.t, solver.y)
        if _check_events(events, solver.t, solver.y, fired, len(rec.t) - 1):
            break
    return rec.trace(status, fired, meta)
