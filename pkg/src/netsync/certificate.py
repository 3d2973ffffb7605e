"""Agent models, metric certificates and sampled verification of their hypotheses.

All checks are pointwise matrix inequalities evaluated on a :class:`SampleSet`.
Each returns a :class:`VerificationReport` whose ``worst_margin`` is the
largest left-hand side after moving every term to one side, so a margin at
or below the tolerance means the inequality held on every sample.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ode import rk4_step

ANALYTIC_TOL = 1e-9
FD_TOL = 1e-6
FLOW_STEP = 1e-4
RANK_RTOL = 1e-10


class EvaluationError(ArithmeticError):
    """A model or certificate map returned a non-finite value."""

    def __init__(self, what: str, point):
        point = np.asarray(point, dtype=float)
        super().__init__(f"non-finite value from {what} at z={point.tolist()}")
        self.point = point


def _finite(value, what, z):
    arr = np.asarray(value, dtype=float)
    if not np.isfinite(arr).all():
        raise EvaluationError(what, z)
    return arr


def central_jacobian(fun: Callable, z: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fun: R^n -> R^m`` at ``z``."""
    z = np.asarray(z, dtype=float)
    cols = []
    for k in range(z.size):
        step = np.zeros_like(z)
        step[k] = h
        cols.append((np.asarray(fun(z + step), float) - np.asarray(fun(z - step), float)) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class ControlAffineSystem:
    """Agent dynamics ``z' = f(z) + g(z) u`` with ``z`` in R^n and ``u`` in R^p."""

    state_dim: int
    input_dim: int
    f: Callable
    g: Callable
    jac_f: Optional[Callable] = None
    h_jac: float = 1e-6
    name: str = ""
    # optional batched versions acting on (M, n) arrays
    f_batch: Optional[Callable] = field(default=None, repr=False)
    g_batch: Optional[Callable] = field(default=None, repr=False)

    @property
    def analytic_jacobian(self) -> bool:
        return self.jac_f is not None

    def drift(self, z) -> np.ndarray:
        return _finite(self.f(z), "f", z).reshape(self.state_dim)

    def input_matrix(self, z) -> np.ndarray:
        return _finite(self.g(z), "g", z).reshape(self.state_dim, self.input_dim)

    def jacobian(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.jac_f is not None:
            J = self.jac_f(z)
        else:
            J = central_jacobian(self.drift, z, self.h_jac)
        return _finite(J, "jac_f", z).reshape(self.state_dim, self.state_dim)

    def drift_many(self, X: np.ndarray) -> np.ndarray:
        if self.f_batch is not None:
            return np.asarray(self.f_batch(X), dtype=float).reshape(X.shape)
        return np.stack([self.drift(x) for x in X])

    def input_many(self, X: np.ndarray) -> np.ndarray:
        if self.g_batch is not None:
            return np.asarray(self.g_batch(X), dtype=float).reshape(len(X), self.state_dim, self.input_dim)
        return np.stack([self.input_matrix(x) for x in X])


@dataclass(frozen=True)
class MetricCertificate:
    """Tensor field ``P``, potential ``U`` and scaling ``alpha`` with declared constants.

    ``dP(v, z)`` is the optional analytic derivative of ``P`` at ``z`` in the
    direction ``v``; without it, derivatives along vector fields are taken
    through the flow by central differences.
    """

    P: Callable
    U: Callable
    grad_U: Callable
    alpha: Callable
    dP: Optional[Callable] = None
    p_lower: Optional[float] = None
    p_upper: Optional[float] = None
    rho: Optional[float] = None
    q_margin: Optional[float] = None
    grad_alpha: Optional[Callable] = None
    name: str = ""
    # optional vectorized (U, alpha) over the rows of an (N, n) array
    potential_many: Optional[Callable] = field(default=None, repr=False, compare=False)

    @classmethod
    def constant(cls, P, U, grad_U, alpha, **kwargs) -> "MetricCertificate":
        """Certificate with a constant matrix ``P`` (and exact zero derivative)."""
        P = np.array(P, dtype=float, ndmin=2)
        P.setflags(write=False)
        zero = np.zeros_like(P)
        return cls(P=lambda z: P, U=U, grad_U=grad_U, alpha=alpha, dP=lambda v, z: zero, **kwargs)

    def metric(self, z) -> np.ndarray:
        return _finite(self.P(z), "P", z)

    def gradient(self, z) -> np.ndarray:
        return _finite(self.grad_U(z), "grad_U", z).reshape(-1)

    def scaling(self, z) -> np.ndarray:
        return _finite(self.alpha(z), "alpha", z).reshape(-1)

    def potential_and_scaling(self, X) -> tuple[np.ndarray, np.ndarray]:
        """``U`` (shape ``(N,)``) and ``alpha`` (shape ``(N, m)``) at each row of ``X``."""
        X = np.asarray(X, dtype=float)
        if self.potential_many is not None:
            u, a = self.potential_many(X)
        else:
            u = np.array([self.U(x) for x in X], dtype=float)
            a = np.stack([self.scaling(x) for x in X])
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(a))):
            raise EvaluationError("U or alpha", X)
        return u, a.reshape(len(X), -1)

    def default_Q(self, n: int) -> np.ndarray:
        if self.q_margin is None:
            raise ValueError("no Q given and certificate declares no q_margin")
        return self.q_margin * np.eye(n)


@dataclass(frozen=True)
class SampleSet:
    """Tensor grid over a box, optionally augmented with seeded uniform points."""

    box: tuple
    grid_counts: tuple
    n_random: int = 0
    seed: int = 0
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        counts = self.grid_counts
        if np.isscalar(counts):
            counts = (int(counts),) * len(box)
        counts = tuple(int(c) for c in counts)
        if len(counts) != len(box):
            raise ValueError("grid_counts must match the box dimension")
        for lo, hi in box:
            if not hi >= lo:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "grid_counts", counts)
        axes = [np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2]) for (lo, hi), c in zip(box, counts)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(box))
        if self.n_random:
            rng = np.random.default_rng(self.seed)
            lo = np.array([b[0] for b in box])
            hi = np.array([b[1] for b in box])
            extra = lo + (hi - lo) * rng.random((self.n_random, len(box)))
            grid = np.vstack([grid, extra])
        grid.setflags(write=False)
        object.__setattr__(self, "points", grid)

    @classmethod
    def default(cls, box, grid: int = 21, n_random: int = 1000, seed: int = 0) -> "SampleSet":
        return cls(tuple(box), (grid,) * len(box), n_random, seed)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class VerificationReport:
    name: str
    worst_margin: float
    worst_point: Optional[np.ndarray]
    passed: bool
    samples_checked: int
    tolerance: float
    details: dict = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = "-" if self.worst_point is None else np.array2string(np.asarray(self.worst_point), precision=6)
        return f"{self.name:<18} {status}  margin={self.worst_margin:.6e}  tol={self.tolerance:g}  at {where}"

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "worst_margin": float(self.worst_margin),
            "worst_point": None if self.worst_point is None else np.asarray(self.worst_point).tolist(),
            "samples_checked": int(self.samples_checked),
            "tolerance": float(self.tolerance),
            **{k: v for k, v in self.details.items()},
        }


def _report(name, margins, points, tol, **details) -> VerificationReport:
    margins = np.asarray(margins, dtype=float)
    k = int(np.argmax(margins))
    worst = float(margins[k])
    return VerificationReport(name, worst, np.array(points[k]), worst <= tol, len(margins), tol, details)


# -- tensor derivatives ----------------------------------------------------------


def _flow_derivative(field_fn: Callable, P: Callable, z, h: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    forward = rk4_step(field_fn, z, h)
    backward = rk4_step(field_fn, z, -h)
    D = (np.asarray(P(forward), float) - np.asarray(P(backward), float)) / (2 * h)
    if not np.all(np.isfinite(D)):
        raise EvaluationError("flow derivative of P", z)
    return 0.5 * (D + D.T)


def flow_tensor_derivative(sys: ControlAffineSystem, cert: MetricCertificate, z, h: float = FLOW_STEP) -> np.ndarray:
    """Derivative of ``P`` along the flow of ``f`` by a central difference of RK4 steps."""
    if not h > 0:
        raise ValueError("flow step must be positive")
    return _flow_derivative(sys.drift, cert.metric, z, h)


def tensor_lie_derivative(field_fn, jac_field, cert: MetricCertificate, z, h: float = FLOW_STEP) -> np.ndarray:
    """``L_v P = d_v P + P dv/dz + (dv/dz)^T P`` for an arbitrary vector field ``v``."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(field_fn(z), dtype=float).reshape(-1)
    if cert.dP is not None:
        dP = _finite(cert.dP(v, z), "dP", z)
    else:
        dP = _flow_derivative(field_fn, cert.metric, z, h)
    J = np.asarray(jac_field(z), dtype=float)
    P = cert.metric(z)
    return dP + P @ J + J.T @ P


def lie_derivative_tensor(sys: ControlAffineSystem, cert: MetricCertificate, z, h: float = FLOW_STEP) -> np.ndarray:
    return tensor_lie_derivative(sys.drift, sys.jacobian, cert, z, h)


def uses_finite_differences(sys: ControlAffineSystem, cert: MetricCertificate) -> bool:
    return cert.dP is None or not sys.analytic_jacobian


def _tolerance(sys, cert):
    return FD_TOL if uses_finite_differences(sys, cert) else ANALYTIC_TOL


def lie_derivatives(sys, cert, points, h: float = FLOW_STEP) -> np.ndarray:
    return np.stack([lie_derivative_tensor(sys, cert, z, h) for z in points])


def gradients(cert, points) -> np.ndarray:
    return np.stack([cert.gradient(z) for z in points])


# -- checks ----------------------------------------------------------------------


def check_bounds(cert: MetricCertificate, samples: SampleSet):
    """Eigenvalue bounds of ``P`` over the samples.

    Returns ``(report, (p_lower_est, p_upper_est))``. The check fails when
    ``P`` has a non-positive eigenvalue somewhere, or when declared bounds
    are violated.
    """
    pts = samples.points
    if len(pts) == 0:
        raise ValueError("empty sample set")
    eig = np.stack([np.linalg.eigvalsh(cert.metric(z)) for z in pts])
    lo, hi = eig[:, 0], eig[:, -1]
    margins = -lo
    # declared bounds may be attained; allow round-off at their scale
    if cert.p_lower is not None:
        margins = np.maximum(margins, cert.p_lower - lo - 1e-12 * max(1.0, abs(cert.p_lower)))
    if cert.p_upper is not None:
        margins = np.maximum(margins, hi - cert.p_upper - 1e-12 * max(1.0, abs(cert.p_upper)))
    p_lo, p_hi = float(lo.min()), float(hi.max())
    # strict positivity: a zero eigenvalue must not pass
    rep = _report("bounds", margins, pts, -np.finfo(float).tiny, p_lower_est=p_lo, p_upper_est=p_hi)
    return rep, (p_lo, p_hi)


def check_integrability(sys: ControlAffineSystem, cert: MetricCertificate, samples: SampleSet,
                        tol: float = ANALYTIC_TOL) -> VerificationReport:
    """Residual of ``grad U^T = P g alpha`` in the max norm."""
    pts = samples.points
    res = []
    for z in pts:
        rhs = cert.metric(z) @ sys.input_matrix(z) @ cert.scaling(z)
        res.append(np.max(np.abs(cert.gradient(z) - rhs)))
    return _report("integrability", res, pts, tol)


def kernel_basis(M: np.ndarray) -> np.ndarray:
    """Orthonormal basis (columns) of ``{v : v^T M = 0}`` for an ``n x p`` matrix ``M``."""
    n = M.shape[0]
    if M.size == 0:
        return np.eye(n)
    u, s, _ = np.linalg.svd(M, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        return np.eye(n)
    rank = int(np.sum(s >= RANK_RTOL * s[0]))
    return u[:, rank:]


def kernel_margins(Ls, Pgs, Q) -> np.ndarray:
    out = np.full(len(Ls), -np.inf)
    for k, (L, Pg) in enumerate(zip(Ls, Pgs)):
        W = kernel_basis(Pg)
        if W.shape[1]:
            out[k] = np.linalg.eigvalsh(W.T @ (L + Q) @ W)[-1]
    return out


def check_cmf_kernel(sys: ControlAffineSystem, cert: MetricCertificate, samples: SampleSet,
                     Q=None, h: float = FLOW_STEP, Ls=None) -> VerificationReport:
    """``v^T (L_f P + Q) v <= 0`` for ``v`` orthogonal to the columns of ``P g``.

    ``Ls`` optionally supplies precomputed Lie derivatives at ``samples.points``.
    """
    pts = samples.points
    Q = cert.default_Q(sys.state_dim) if Q is None else np.asarray(Q, dtype=float)
    Ls = lie_derivatives(sys, cert, pts, h) if Ls is None else Ls
    Pgs = [cert.metric(z) @ sys.input_matrix(z) for z in pts]
    return _report("cmf-kernel", kernel_margins(Ls, Pgs, Q), pts, _tolerance(sys, cert))


def strengthened_margins(Ls, grads, rho: float, Q) -> np.ndarray:
    M = Ls - rho * np.einsum("ki,kj->kij", grads, grads) + Q
    return np.linalg.eigvalsh(M)[:, -1]


def check_cmf_strengthened(sys: ControlAffineSystem, cert: MetricCertificate, samples: SampleSet,
                           Q=None, rho: Optional[float] = None, h: float = FLOW_STEP,
                           Ls=None) -> VerificationReport:
    """``L_f P - rho grad U^T grad U + Q <= 0`` on every sample."""
    rho = cert.rho if rho is None else rho
    if rho is None or not rho > 0:
        raise ValueError("strengthened CMF check needs a positive rho")
    pts = samples.points
    Q = cert.default_Q(sys.state_dim) if Q is None else np.asarray(Q, dtype=float)
    Ls = lie_derivatives(sys, cert, pts, h) if Ls is None else Ls
    margins = strengthened_margins(Ls, gradients(cert, pts), rho, Q)
    return _report("cmf-strengthened", margins, pts, _tolerance(sys, cert), rho=float(rho))


def check_killing(g_a: Callable, q_a: Callable, cert: MetricCertificate, samples: SampleSet,
                  jac_field: Optional[Callable] = None, h: float = FLOW_STEP,
                  q_floor: float = 1e-9, tol: float = FD_TOL) -> VerificationReport:
    """Max entry of ``L_{g_a/q_a} P`` over the samples (zero for a Killing field)."""
    pts = samples.points

    def field_fn(z):
        return np.asarray(g_a(z), dtype=float).reshape(-1) / float(q_a(z))

    jac = jac_field if jac_field is not None else (lambda z: central_jacobian(field_fn, z))
    res = []
    for z in pts:
        q = float(q_a(z))
        if not abs(q) >= q_floor:
            raise EvaluationError(f"q_a (vanishing q_a={q:g})", z)
        res.append(np.max(np.abs(tensor_lie_derivative(field_fn, jac, cert, z, h))))
    return _report("killing", res, pts, tol)


# -- margin search ---------------------------------------------------------------


def kernel_epsilon(sys, cert, samples, h: float = FLOW_STEP, fraction: float = 0.5, Ls=None):
    """Largest kernel eigenvalue ``kappa`` of ``W^T L_f P W`` and ``eps = -fraction * kappa``.

    With ``Q = eps I`` the kernel inequality holds with slack ``(1 - fraction) |kappa|``.
    """
    pts = samples.points
    Ls = lie_derivatives(sys, cert, pts, h) if Ls is None else Ls
    Pgs = [cert.metric(z) @ sys.input_matrix(z) for z in pts]
    kappa = float(np.max(kernel_margins(Ls, Pgs, np.zeros((sys.state_dim, sys.state_dim)))))
    return kappa, -fraction * kappa


def rho_ladder(sys, cert, samples, Q, start: float, steps: int = 20, h: float = FLOW_STEP, Ls=None):
    """Smallest ``rho`` in ``start * 2**k`` (``k = 0..steps``) passing the strengthened check.

    Returns ``(rho, margin)`` or ``(None, best_margin)`` on exhaustion.
    """
    pts = samples.points
    Ls = lie_derivatives(sys, cert, pts, h) if Ls is None else Ls
    grads = gradients(cert, pts)
    tol = _tolerance(sys, cert)
    Q = np.asarray(Q, dtype=float)
    best = np.inf
    for k in range(steps + 1):
        rho = start * 2.0**k
        margin = float(np.max(strengthened_margins(Ls, grads, rho, Q)))
        best = min(best, margin)
        if margin <= tol:
            return rho, margin
    return None, best
