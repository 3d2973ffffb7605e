"""Closed-loop network simulation and synchronization metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .certificate import ControlAffineSystem, EvaluationError
from .ode import rk4_step
from .synthesis import SyncController

log = logging.getLogger(__name__)

DIST_FLOOR = 1e-13
SANDWICH_SLACK = 1e-12


@dataclass
class ExperimentConfig:
    system: ControlAffineSystem
    controller: SyncController
    x0: np.ndarray
    T: float
    dt: float = 1e-3
    window: Optional[tuple] = None
    decimate: int = 1
    lyapunov_P: Optional[np.ndarray] = None
    name: str = "experiment"

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.window is None:
            self.window = (0.2 * self.T, 0.8 * self.T)
        t1, t2 = self.window
        if not (0 <= t1 < t2 <= self.T):
            raise ValueError(f"rate window {self.window} must satisfy 0 <= t1 < t2 <= T")
        N, n = self.controller.graph.N, self.system.state_dim
        if self.x0.size != N * n:
            raise ValueError(f"x0 has {self.x0.size} entries, expected N*n = {N * n}")
        if self.controller.state_dim != n:
            raise ValueError("controller and system state dimensions differ")
        if int(self.decimate) < 1:
            raise ValueError("decimate must be >= 1")


@dataclass
class Trace:
    times: np.ndarray
    states: np.ndarray
    N: int
    n: int
    sync_distance: np.ndarray
    norm_e: np.ndarray
    u_norm: np.ndarray
    V: Optional[np.ndarray] = None
    blowup_time: Optional[float] = None
    name: str = "experiment"
    meta: dict = field(default_factory=dict)

    @property
    def agents(self) -> np.ndarray:
        return self.states.reshape(len(self.times), self.N, self.n)


@dataclass(frozen=True)
class RateFit:
    lam: float
    k: float
    r_squared: float
    window: tuple
    samples: int
    warning: Optional[str] = None

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "k": self.k, "r_squared": self.r_squared,
                "window": list(self.window), "samples": self.samples, "warning": self.warning}


def sync_distance(x, N: int) -> float:
    """Euclidean distance from the stacked state ``x`` to the synchronization manifold."""
    X = np.asarray(x, dtype=float).reshape(N, -1)
    return float(np.sqrt(np.sum((X - X.mean(axis=0)) ** 2)))


def transverse_error(x, N: int) -> np.ndarray:
    """``e_i = x_i - x_1`` for ``i = 2..N`` stacked into one vector."""
    X = np.asarray(x, dtype=float).reshape(N, -1)
    return (X[1:] - X[0]).reshape(-1)


def manifold_perturbation(z0, N: int, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Common point ``z0`` plus an independent random offset of norm ``delta`` per agent."""
    z0 = np.asarray(z0, dtype=float).reshape(-1)
    d = rng.standard_normal((N, z0.size))
    d *= delta / np.linalg.norm(d, axis=1, keepdims=True)
    return (z0 + d).reshape(-1)


def closed_loop_rhs(sys: ControlAffineSystem, ctrl: SyncController):
    N, n = ctrl.graph.N, sys.state_dim

    def rhs(x):
        X = x.reshape(N, n)
        u = ctrl.phi_agents(X)
        return (sys.drift_many(X) + np.einsum("inp,ip->in", sys.input_many(X), u)).reshape(-1)

    return rhs


def integrate(cfg: ExperimentConfig) -> Trace:
    sys, ctrl = cfg.system, cfg.controller
    N, n = ctrl.graph.N, sys.state_dim
    rhs = closed_loop_rhs(sys, ctrl)
    steps = int(round(cfg.T / cfg.dt))
    dec = int(cfg.decimate)
    x = cfg.x0.copy()
    times, states = [0.0], [x.copy()]
    blowup = None
    for k in range(1, steps + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                x_new = rk4_step(rhs, x, cfg.dt)
        except (EvaluationError, FloatingPointError, OverflowError):
            x_new = np.full_like(x, np.nan)
        if not np.all(np.isfinite(x_new)):
            blowup = (k - 1) * cfg.dt
            log.warning("%s: non-finite state after t=%.6g; trace truncated", cfg.name, blowup)
            if times[-1] != blowup:
                times.append(blowup)
                states.append(x.copy())
            break
        x = x_new
        if k % dec == 0 or k == steps:
            times.append(k * cfg.dt)
            states.append(x.copy())
    times = np.array(times)
    states = np.array(states)
    X = states.reshape(len(times), N, n)
    dist = _sample_norms(X - X.mean(axis=1, keepdims=True))
    norm_e = _sample_norms(X[:, 1:, :] - X[:, :1, :])
    u_norm = np.array([np.linalg.norm(ctrl.phi_agents(Xk)) for Xk in X])
    trace = Trace(times, states, N, n, dist, norm_e, u_norm, blowup_time=blowup, name=cfg.name)
    if cfg.lyapunov_P is not None:
        trace.V, _ = lyapunov_series(trace, cfg.lyapunov_P)
    return trace


def _sample_norms(A: np.ndarray) -> np.ndarray:
    """Euclidean norm of each ``A[k]``, scaled so states near escape do not overflow."""
    A = A.reshape(len(A), -1)
    scale = np.max(np.abs(A), axis=1, initial=0.0)
    safe = np.where(scale > 0, scale, 1.0)
    return scale * np.sqrt(np.sum((A / safe[:, None]) ** 2, axis=1))


def lyapunov_series(trace: Trace, P) -> tuple[np.ndarray, float]:
    """``V = e^T (I (x) P) e`` at each sample and the largest positive one-step increment."""
    P = np.array(P, dtype=float, ndmin=2)
    E = trace.agents[:, 1:, :] - trace.agents[:, :1, :]
    V = np.einsum("kia,ab,kib->k", E, P, E)
    inc = float(np.max(np.diff(V), initial=0.0))
    return V, max(inc, 0.0)


def sandwich_violation(trace: Trace) -> float:
    """Largest violation of ``|x|_D <= |e| <= sqrt(2(N-1)) |x|_D`` (<= 0 when it holds)."""
    lower = trace.sync_distance - trace.norm_e
    upper = trace.norm_e - math.sqrt(2 * (trace.N - 1)) * trace.sync_distance - SANDWICH_SLACK
    return float(max(np.max(lower - SANDWICH_SLACK), np.max(upper)))


def fit_exponential(t, y, window, floor: float = DIST_FLOOR, min_samples: int = 10):
    """Least-squares line through ``(t, log y)``: returns ``(slope, intercept, r2, used_window, warning)``."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    t1, t2 = window
    warning = None
    sel = (t >= t1) & (t <= t2) & (y > floor)
    if sel.sum() < min_samples:
        below = np.flatnonzero(~(y > floor))
        end = below[0] if below.size else len(y)
        sel = np.zeros_like(sel)
        sel[:end] = True
        sel &= t <= t2
        warning = f"window starved: {int(((t >= t1) & (t <= t2) & (y > floor)).sum())} samples above floor; fitted prefix"
        log.warning(warning)
    if sel.sum() < 2:
        return math.nan, math.nan, math.nan, (t1, t2), "not enough samples above floor"
    ts, ly = t[sel], np.log(y[sel])
    slope, intercept = np.polyfit(ts, ly, 1)
    resid = ly - (slope * ts + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return float(slope), float(intercept), r2, (float(ts[0]), float(ts[-1])), warning


def fit_rate(trace: Trace, window: Optional[tuple] = None) -> RateFit:
    """Fit ``|x(t)|_D ~ k exp(-lam t) |x(0)|_D`` on ``window`` (default middle 60%)."""
    T = float(trace.times[-1])
    window = window or (0.2 * T, 0.8 * T)
    slope, icpt, r2, used, warning = fit_exponential(trace.times, trace.sync_distance, window)
    d0 = float(trace.sync_distance[0])
    k = math.exp(icpt) / d0 if d0 > 0 and math.isfinite(icpt) else math.nan
    n = int(np.sum((trace.times >= used[0]) & (trace.times <= used[1]) & (trace.sync_distance > DIST_FLOOR)))
    return RateFit(-slope, k, r2, used, n, warning)


def fit_lyapunov_rate(trace: Trace, window: Optional[tuple] = None) -> RateFit:
    """Exponential decay rate of the recorded ``V`` series (floor is the squared distance floor)."""
    if trace.V is None:
        raise ValueError("trace carries no Lyapunov series")
    T = float(trace.times[-1])
    window = window or (0.2 * T, 0.8 * T)
    slope, icpt, r2, used, warning = fit_exponential(trace.times, trace.V, window, floor=DIST_FLOOR**2)
    V0 = float(trace.V[0])
    k = math.exp(icpt) / V0 if V0 > 0 and math.isfinite(icpt) else math.nan
    n = int(np.sum((trace.times >= used[0]) & (trace.times <= used[1]) & (trace.V > DIST_FLOOR**2)))
    return RateFit(-slope, k, r2, used, n, warning)


def verdicts(trace: Trace, fit: RateFit, v_tol: float = 1e-9) -> dict:
    out = {
        "rate_positive": bool(fit.lam > 0),
        "sandwich": bool(sandwich_violation(trace) <= 0),
        "finite": trace.blowup_time is None,
    }
    if trace.V is not None:
        out["V_monotone"] = bool(np.max(np.diff(trace.V), initial=0.0) <= v_tol)
    out["synchronized"] = all(out.values())
    return out


# -- output ----------------------------------------------------------------------------


def csv_header(N: int, n: int) -> list[str]:
    cols = ["t"] + [f"x_{i}_{a}" for i in range(1, N + 1) for a in range(1, n + 1)]
    return cols + ["dist_D", "norm_e", "V", "u_norm"]


def write_trace_csv(trace: Trace, path) -> Path:
    path = Path(path)
    V = trace.V if trace.V is not None else np.full(len(trace.times), np.nan)
    lines = [",".join(csv_header(trace.N, trace.n))]
    for k in range(len(trace.times)):
        row = [trace.times[k], *trace.states[k], trace.sync_distance[k], trace.norm_e[k], V[k], trace.u_norm[k]]
        lines.append(",".join(format(float(v), ".17g") for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def append_results_index(path, name: str, fit: RateFit, verdict: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write("name,lambda,k,r_squared,synchronized,rate_positive,sandwich,V_monotone\n")
        fh.write(",".join([
            name, format(fit.lam, ".17g"), format(fit.k, ".17g"), format(fit.r_squared, ".17g"),
            str(verdict["synchronized"]), str(verdict["rate_positive"]), str(verdict["sandwich"]),
            str(verdict.get("V_monotone", "")),
        ]) + "\n")
