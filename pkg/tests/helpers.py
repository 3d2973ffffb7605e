"""Small model builders shared by the test modules."""
import numpy as np

from netsync.certificate import ControlAffineSystem, MetricCertificate


def linear_system(A, G) -> ControlAffineSystem:
    A = np.array(A, dtype=float, ndmin=2)
    G = np.array(G, dtype=float).reshape(len(A), -1)
    return ControlAffineSystem(len(A), G.shape[1], lambda z: A @ z, lambda z: G, jac_f=lambda z: A)


def linear_certificate(P, G, **kwargs) -> MetricCertificate:
    """Constant ``P`` with ``U(z) = z^T P G`` and ``alpha = 1``: integrable by construction."""
    P = np.array(P, dtype=float, ndmin=2)
    G = np.array(G, dtype=float).reshape(len(P))
    w = P @ G
    return MetricCertificate.constant(P, lambda z: float(w @ z), lambda z: w, lambda z: np.ones(1), **kwargs)


def lyapunov_kron(A) -> np.ndarray:
    """Solve ``S A + A^T S = -I`` as a Kronecker linear system."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    k = len(A)
    M = np.kron(np.eye(k), A.T) + np.kron(A.T, np.eye(k))
    s = np.linalg.solve(M, -np.eye(k).reshape(-1, order="F"))
    return s.reshape(k, k, order="F")
