"""Distributed synchronizing control laws and their gain selection.

Two controller families are built:

* ``local``: ``phi_i(x) = -ell * alpha(x_i) * sum_j L_ij U(x_j)`` from a metric
  certificate satisfying integrability and the strengthened CMF inequality;
  ``ell >= rho / nu`` with ``nu`` from a Lyapunov equation on the reduced
  Laplacian.
* ``global``: ``phi_i(x) = -ell * c_i * sum_j L_ij G^T P x_j`` for a constant
  metric ``P`` and constant input matrix ``G``; ``c_1`` comes from the
  coupling-matrix search, ``c_j = 1`` otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .certificate import (
    ControlAffineSystem,
    MetricCertificate,
    SampleSet,
    VerificationReport,
    _report,
    central_jacobian,
)
from .graph import CommGraph, CouplingMatrix, find_c1, is_connected, reduced_laplacian

DEFAULT_SAFETY = 1.25


class SynthesisError(RuntimeError):
    """Synthesis refused: a prerequisite or gain check failed."""

    def __init__(self, code: str, message: str, point=None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.point = point


@dataclass(frozen=True)
class GainCertificate:
    S: np.ndarray
    nu: float
    ell_min: float
    safety: float = DEFAULT_SAFETY
    rho: Optional[float] = None
    c1: Optional[float] = None
    mu: Optional[float] = None

    def as_dict(self) -> dict:
        out = {"nu": self.nu, "ell_min": self.ell_min, "safety": self.safety,
               "S": np.asarray(self.S).tolist()}
        for key in ("rho", "c1", "mu"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


@dataclass(frozen=True)
class SyncController:
    kind: str
    ell: float
    c: np.ndarray
    graph: CommGraph
    state_dim: int
    input_dim: int
    phi_agents: Callable = field(repr=False)
    # local kind
    certificate: Optional[MetricCertificate] = field(default=None, repr=False)
    # global kind
    P: Optional[np.ndarray] = field(default=None, repr=False)
    G: Optional[np.ndarray] = field(default=None, repr=False)
    gain: Optional[GainCertificate] = None
    globally_bounded: bool = False

    def phi(self, x) -> np.ndarray:
        """All agents' inputs as a flat ``N*p`` vector from the flat ``N*n`` state."""
        X = np.asarray(x, dtype=float).reshape(self.graph.N, self.state_dim)
        return self.phi_agents(X).reshape(-1)

    def params(self) -> dict:
        out = {"kind": self.kind, "ell": self.ell, "c": np.asarray(self.c).tolist()}
        if self.gain is not None:
            out["gain"] = self.gain.as_dict()
        if self.kind == "global":
            out["globally_bounded"] = self.globally_bounded
        return out


def solve_lyapunov_margin(A) -> tuple[np.ndarray, float]:
    """Solve ``S A + A^T S = -I`` and return ``(S, nu)`` with ``nu = 1/lambda_max(S)``.

    ``nu`` is the largest constant with ``S A + A^T S <= -nu S`` for this ``S``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    eig = np.linalg.eigvals(A)
    k = int(np.argmax(eig.real))
    if not eig[k].real < 0:
        raise SynthesisError("not-hurwitz", f"A is not a stability matrix: eigenvalue {eig[k]:.6g}")
    S = scipy.linalg.solve_continuous_lyapunov(A.T, -np.eye(len(A)))
    S = 0.5 * (S + S.T)
    return S, float(1.0 / np.linalg.eigvalsh(S)[-1])


def local_min_gain(cert: MetricCertificate, nu: float) -> float:
    if cert.rho is None or not cert.rho > 0 or not nu > 0:
        raise ValueError("local gain needs positive rho and nu")
    return cert.rho / nu


def local_gain_certificate(cert: MetricCertificate, g: CommGraph, safety: float = DEFAULT_SAFETY) -> GainCertificate:
    if not is_connected(g):
        raise SynthesisError("disconnected-graph", "communication graph is not connected")
    S, nu = solve_lyapunov_margin(-reduced_laplacian(g))
    return GainCertificate(S, nu, local_min_gain(cert, nu), safety, rho=cert.rho)


def make_local_controller(sys: ControlAffineSystem, cert: MetricCertificate, g: CommGraph,
                          ell: Optional[float] = None, gain: Optional[GainCertificate] = None,
                          allow_low_gain: bool = False, safety: float = DEFAULT_SAFETY) -> SyncController:
    """Local synchronizer. ``ell`` defaults to ``safety * rho / nu``."""
    if gain is None:
        gain = local_gain_certificate(cert, g, safety)
    if ell is None:
        ell = gain.safety * gain.ell_min
    if ell < gain.ell_min and not allow_low_gain:
        raise SynthesisError("gain-too-low", f"ell={ell:g} below the certified minimum {gain.ell_min:g}")
    D = g.incidence.astype(float)
    ell = float(ell)

    def phi_agents(X):
        u, a = cert.potential_and_scaling(X)
        return -ell * (D @ (D.T @ u))[:, None] * a

    return SyncController("local", ell, np.ones(g.N), g, sys.state_dim, sys.input_dim,
                          phi_agents, certificate=cert, gain=gain)


# -- global controller -------------------------------------------------------------


def block_margins(sys: ControlAffineSystem, P, G, Q, mu: float, ell: float, points) -> np.ndarray:
    """``lambda_max(P J + J^T P - ell mu P G G^T P + Q)`` at each point."""
    B, C = _block_terms(sys, P, G, Q, points)
    return np.linalg.eigvalsh(B - ell * mu * C)[:, -1]


def _block_terms(sys, P, G, Q, points):
    P = np.asarray(P, dtype=float)
    G = np.asarray(G, dtype=float).reshape(sys.state_dim, -1)
    PJ = np.stack([P @ sys.jacobian(z) for z in points])
    B = PJ + PJ.transpose(0, 2, 1) + np.asarray(Q, dtype=float)
    PG = P @ G
    return B, PG @ PG.T


def global_block_check(sys, P, G, Q, mu, ell, samples: SampleSet) -> VerificationReport:
    tol = 1e-9 if sys.analytic_jacobian else 1e-6
    return _report("global-block", block_margins(sys, P, G, Q, mu, ell, samples.points),
                   samples.points, tol, ell=float(ell), mu=float(mu))


def global_min_gain(sys, P, G, Q, mu: float, samples: SampleSet, rtol: float = 1e-9,
                    ceiling: float = 1e12) -> float:
    """Smallest ``ell`` passing the block check on the samples (monotone bisection)."""
    if not mu > 0:
        raise SynthesisError("zero-mu", "coupling margin mu must be positive")
    B, C = _block_terms(sys, P, G, Q, samples.points)

    def worst(ell):
        return np.linalg.eigvalsh(B - ell * mu * C)[:, -1].max()

    if worst(0.0) <= 0:
        return 0.0
    hi = 1.0
    while worst(hi) > 0:
        hi *= 2
        if hi > ceiling:
            raise SynthesisError("gain-infeasible", "no gain satisfies the block inequality on the box")
    lo = 0.0
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if worst(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def make_global_controller(sys: ControlAffineSystem, P, G, g: CommGraph, Q, samples: SampleSet,
                           ell: Optional[float] = None, coupling: Optional[CouplingMatrix] = None,
                           safety: float = DEFAULT_SAFETY, allow_low_gain: bool = False,
                           globally_bounded: bool = False) -> SyncController:
    """Global synchronizer for constant ``P`` and constant input matrix ``G``.

    The gain is accepted when ``P J + J^T P - ell mu P G G^T P <= -Q`` on every
    sample. ``globally_bounded`` records that the sampled box is known to cover
    the whole range of the Jacobian (e.g. periodic dynamics).
    """
    P = np.array(P, dtype=float, ndmin=2)
    G = np.array(G, dtype=float).reshape(sys.state_dim, -1)
    if coupling is None:
        if not is_connected(g):
            raise SynthesisError("disconnected-graph", "communication graph is not connected")
        coupling = find_c1(g)
    if not coupling.mu > 0:
        raise SynthesisError("zero-mu", "coupling matrix is not negative definite (mu = 0)")
    ell_min = global_min_gain(sys, P, G, Q, coupling.mu, samples)
    if ell is None:
        ell = safety * ell_min
    ell = float(ell)
    report = global_block_check(sys, P, G, Q, coupling.mu, ell, samples)
    if not report.passed and not allow_low_gain:
        raise SynthesisError("block-check-failed",
                             f"ell={ell:g}: block inequality violated by {report.worst_margin:.3e}",
                             report.worst_point)
    c = np.ones(g.N)
    c[0] = coupling.c1
    S, nu = solve_lyapunov_margin(coupling.A) if g.N > 1 else (np.zeros((0, 0)), np.inf)
    gain = GainCertificate(S, nu, ell_min, safety, c1=coupling.c1, mu=coupling.mu)
    K = P @ G  # G^T P x  ==  (x^T P G)^T
    D = g.incidence.astype(float)

    def phi_agents(X):
        return -ell * c[:, None] * ((D @ (D.T @ X)) @ K)

    return SyncController("global", ell, c, g, sys.state_dim, G.shape[1], phi_agents,
                          P=P, G=G, gain=gain, globally_bounded=bool(globally_bounded))


# -- Definition-1 structure ----------------------------------------------------------


def structural_checks(ctrl: SyncController, probes: SampleSet, n_network: int = 50,
                      n_manifold: int = 100, seed: int = 0, h: float = 1e-6,
                      cross_tol: float = 1e-7, manifold_tol: float = 1e-12) -> VerificationReport:
    """Sparsity of ``d phi_i / d x_j`` on non-edges and vanishing of ``phi`` on the manifold.

    Network probe states draw each agent independently from ``probes``;
    manifold probes repeat one sampled point for every agent.
    """
    rng = np.random.default_rng(seed)
    pts = probes.points
    N, n, p = ctrl.graph.N, ctrl.state_dim, ctrl.input_dim
    L = ctrl.graph.laplacian
    non_edges = [(i, j) for i in range(N) for j in range(N) if i != j and L[i, j] == 0]

    margins, where = [], []
    max_cross = 0.0
    for _ in range(n_network if non_edges else 0):
        X = pts[rng.integers(0, len(pts), N)].copy()
        worst = 0.0
        for j in range(N):
            def phi_of_xj(xj, j=j):
                Y = X.copy()
                Y[j] = xj
                return ctrl.phi_agents(Y)

            dphi = central_jacobian(phi_of_xj, X[j], h)  # (N, p, n)
            for i, jj in non_edges:
                if jj == j:
                    worst = max(worst, float(np.max(np.abs(dphi[i]))))
        max_cross = max(max_cross, worst)
        margins.append(worst - cross_tol)
        where.append(X.reshape(-1))

    max_phi = 0.0
    for _ in range(n_manifold):
        z = pts[rng.integers(0, len(pts))]
        X = np.tile(z, (N, 1))
        norm = float(np.linalg.norm(ctrl.phi_agents(X)))
        max_phi = max(max_phi, norm)
        margins.append(norm - manifold_tol)
        where.append(X.reshape(-1))

    return _report("structure", margins, where, 0.0,
                   max_cross_jacobian=max_cross, max_phi_on_manifold=max_phi,
                   non_edges=len(non_edges) // 2)
