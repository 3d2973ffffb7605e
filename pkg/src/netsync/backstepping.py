"""Certificate construction for strict-feedback systems by backstepping.

Given a certificate ``(P_a, U_a, alpha_a)`` for the upper subsystem
``z_a' = f_a(z_a) + g_a(z_a) z_b`` and a function ``q_a`` making ``g_a / q_a``
a Killing field of ``P_a``, build the certificate of the full system
``z_b' = f_b(z) + g_b(z) u``::

    S_a = grad(q_a)^T z_b + eta * alpha_a * P_a g_a
    P_b = [[P_a + S_a S_a^T, q_a S_a], [q_a S_a^T, q_a^2]]
    U_b = eta * U_a + q_a z_b,   alpha_b = 1 / (q_a g_b),   q_b = q_a g_b

The output can be fed back in as an upper-subsystem certificate, so
triangular systems of any depth are handled by repeated application.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .certificate import (
    ControlAffineSystem,
    MetricCertificate,
    SampleSet,
    VerificationReport,
    central_jacobian,
    check_bounds,
    check_cmf_kernel,
    check_cmf_strengthened,
    check_integrability,
    check_killing,
    kernel_epsilon,
    lie_derivatives,
    rho_ladder,
)

ETA_SAFETY = 1.1


class BacksteppingError(ValueError):
    def __init__(self, code: str, message: str, point=None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.point = point


@dataclass(frozen=True)
class StrictFeedbackSystem:
    """``z_a' = f_a(z_a) + g_a(z_a) z_b``, ``z_b' = f_b(z) + g_b(z) u`` with scalar ``z_b``.

    Optional analytic derivatives (``jac_f_a``, ``jac_g_a``, ``grad_f_b``,
    ``grad_g_b``, ``hess_q_a``) enable exact Jacobians and an analytic
    derivative of the augmented tensor; finite differences are used otherwise.
    """

    na: int
    f_a: Callable
    g_a: Callable
    f_b: Callable
    g_b: Callable
    q_a: Callable
    grad_q_a: Optional[Callable] = None
    g_b_bounds: tuple = (None, None)
    jac_f_a: Optional[Callable] = None
    jac_g_a: Optional[Callable] = None
    grad_f_b: Optional[Callable] = None
    grad_g_b: Optional[Callable] = None
    hess_q_a: Optional[Callable] = None
    name: str = ""
    # prebuilt model of the full system (e.g. compiled from expressions)
    system: Optional[ControlAffineSystem] = field(default=None, repr=False, compare=False)
    # optional vectorized q_a and g_b over the rows of an array
    q_many: Optional[Callable] = field(default=None, repr=False, compare=False)
    gb_many: Optional[Callable] = field(default=None, repr=False, compare=False)

    def upper(self, za) -> tuple[np.ndarray, np.ndarray]:
        return (np.asarray(self.f_a(za), float).reshape(self.na),
                np.asarray(self.g_a(za), float).reshape(self.na))

    def q(self, za) -> float:
        return float(np.asarray(self.q_a(za)).reshape(()))

    def dq(self, za) -> np.ndarray:
        if self.grad_q_a is not None:
            return np.asarray(self.grad_q_a(za), float).reshape(self.na)
        return central_jacobian(lambda w: np.atleast_1d(self.q(w)), np.asarray(za, float)).reshape(self.na)

    def gb(self, z) -> float:
        return float(np.asarray(self.g_b(z)).reshape(()))

    @property
    def analytic(self) -> bool:
        return None not in (self.jac_f_a, self.jac_g_a, self.grad_f_b)

    def composite(self) -> ControlAffineSystem:
        if self.system is not None:
            return self.system
        na = self.na

        def f(z):
            za, zb = z[:na], z[na]
            fa, ga = self.upper(za)
            return np.append(fa + ga * zb, float(np.asarray(self.f_b(z)).reshape(())))

        def g(z):
            out = np.zeros((na + 1, 1))
            out[na, 0] = self.gb(z)
            return out

        jac = None
        if self.analytic:
            def jac(z):
                za, zb = z[:na], z[na]
                J = np.zeros((na + 1, na + 1))
                J[:na, :na] = np.asarray(self.jac_f_a(za), float) + np.asarray(self.jac_g_a(za), float) * zb
                J[:na, na] = self.upper(za)[1]
                J[na, :] = np.asarray(self.grad_f_b(z), float).reshape(na + 1)
                return J

        return ControlAffineSystem(na + 1, 1, f, g, jac_f=jac, name=self.name)


@dataclass(frozen=True)
class ASubCertificate:
    """Upper-subsystem certificate data: ``cert`` carries ``P_a, U_a, alpha_a, rho_a``."""

    cert: MetricCertificate
    Q: np.ndarray
    box: tuple

    @property
    def rho(self) -> float:
        return self.cert.rho


@dataclass(frozen=True)
class Backstepped:
    """Augmented certificate for the composite system plus its Killing data."""

    cert: MetricCertificate
    system: ControlAffineSystem
    sfs: StrictFeedbackSystem
    eta: float
    M_b: float
    box: tuple
    q_b: Callable = field(repr=False)
    grad_q_b: Optional[Callable] = field(default=None, repr=False)


def _scalar_alpha(cert, za) -> float:
    return float(cert.scaling(za)[0])


def choose_eta(cert_a: ASubCertificate, sfs: StrictFeedbackSystem, samples: Optional[SampleSet] = None,
               safety: float = ETA_SAFETY) -> float:
    """``eta = safety * (rho_a / 2) * max(alpha_a q_a)`` over the upper box."""
    if cert_a.rho is None or not cert_a.rho > 0:
        raise BacksteppingError("bad-rho", "rho_a must be positive")
    samples = samples or SampleSet.default(cert_a.box, 21, 0)
    worst, where = np.inf, None
    best = -np.inf
    for za in samples.points:
        prod = _scalar_alpha(cert_a.cert, za) * sfs.q(za)
        if prod < worst:
            worst, where = prod, za
        best = max(best, prod)
    if not worst > 0:
        raise BacksteppingError("sign-convention", f"alpha_a * q_a = {worst:g} is not positive", where)
    return safety * 0.5 * cert_a.rho * best


def augment_certificate(cert_a: ASubCertificate, sfs: StrictFeedbackSystem, eta: float,
                        M_b: float) -> Backstepped:
    if not M_b > 0:
        raise BacksteppingError("bad-M_b", f"M_b must be positive, got {M_b}")
    if not eta > 0:
        raise BacksteppingError("bad-eta", f"eta must be positive, got {eta}")
    na = sfs.na
    ca = cert_a.cert

    def split(z):
        z = np.asarray(z, dtype=float)
        return z[:na], float(z[na])

    def S_of(za, zb):
        return sfs.dq(za) * zb + eta * _scalar_alpha(ca, za) * (ca.metric(za) @ sfs.upper(za)[1])

    def P_b(z):
        za, zb = split(z)
        S = S_of(za, zb)
        q = sfs.q(za)
        out = np.empty((na + 1, na + 1))
        out[:na, :na] = ca.metric(za) + np.outer(S, S)
        out[:na, na] = out[na, :na] = q * S
        out[na, na] = q * q
        return out

    def U_b(z):
        za, zb = split(z)
        return eta * float(ca.U(za)) + sfs.q(za) * zb

    def grad_U_b(z):
        za, zb = split(z)
        return np.append(eta * ca.gradient(za) + zb * sfs.dq(za), sfs.q(za))

    def q_b(z):
        za, _ = split(z)
        return sfs.q(za) * sfs.gb(z)

    def alpha_b(z):
        qb = q_b(z)
        if abs(qb) < 1e-12:
            raise BacksteppingError("vanishing-q", "q_a * g_b vanishes", z)
        return np.array([1.0 / qb])

    grad_q_b = grad_alpha_b = None
    if sfs.grad_g_b is not None:
        def grad_q_b(z):
            za, _ = split(z)
            gq = np.append(sfs.dq(za), 0.0)
            return gq * sfs.gb(z) + sfs.q(za) * np.asarray(sfs.grad_g_b(z), float).reshape(na + 1)

        def grad_alpha_b(z):
            return (-grad_q_b(z) / q_b(z) ** 2).reshape(1, na + 1)

    dP_b = None
    if None not in (ca.dP, ca.grad_alpha, sfs.jac_g_a, sfs.hess_q_a):
        def dP_b(v, z):
            za, zb = split(z)
            v = np.asarray(v, dtype=float).reshape(na + 1)
            va, vb = v[:na], v[na]
            Pa = ca.metric(za)
            ga = sfs.upper(za)[1]
            al = _scalar_alpha(ca, za)
            dal = float(np.asarray(ca.grad_alpha(za), float).reshape(-1) @ va)
            dPa = np.asarray(ca.dP(va, za), float)
            Jga = np.asarray(sfs.jac_g_a(za), float)
            Hq = np.asarray(sfs.hess_q_a(za), float)
            gq = sfs.dq(za)
            S = S_of(za, zb)
            q = sfs.q(za)
            dS = Hq @ va * zb + gq * vb + eta * (dal * (Pa @ ga) + al * (dPa @ ga + Pa @ (Jga @ va)))
            dq = float(gq @ va)
            out = np.empty((na + 1, na + 1))
            out[:na, :na] = dPa + np.outer(dS, S) + np.outer(S, dS)
            out[:na, na] = out[na, :na] = dS * q + S * dq
            out[na, na] = 2 * q * dq
            return out

    potential_many = None
    if None not in (ca.potential_many, sfs.q_many, sfs.gb_many):
        def potential_many(X):
            X = np.asarray(X, dtype=float)
            ua, _ = ca.potential_and_scaling(X[:, :na])
            q = sfs.q_many(X[:, :na])
            return eta * ua + q * X[:, na], (1.0 / (q * sfs.gb_many(X)))[:, None]

    cert_b = MetricCertificate(P=P_b, U=U_b, grad_U=grad_U_b, alpha=alpha_b, dP=dP_b,
                               grad_alpha=grad_alpha_b, name=f"{ca.name}-backstepped" if ca.name else "",
                               potential_many=potential_many)
    box = tuple(cert_a.box) + ((-float(M_b), float(M_b)),)
    return Backstepped(cert_b, sfs.composite(), sfs, float(eta), float(M_b), box, q_b, grad_q_b)


@dataclass
class AugmentedVerification:
    reports: dict
    rho_b: Optional[float]
    Q_b: Optional[np.ndarray]
    kernel_max: float
    certificate: MetricCertificate

    @property
    def passed(self) -> bool:
        return self.rho_b is not None and all(r.passed for r in self.reports.values())

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "rho_b": self.rho_b,
            "Q_b": None if self.Q_b is None else np.asarray(self.Q_b).tolist(),
            "kernel_max": self.kernel_max,
            "reports": {k: r.as_dict() for k, r in self.reports.items()},
        }


def verify_augmented(bs: Backstepped, samples: SampleSet, rho_start: float, steps: int = 20,
                     fraction: float = 0.5) -> AugmentedVerification:
    """Bounds, integrability, Killing and the strengthened inequality on ``C_b``.

    ``rho_b`` is the smallest value of the ladder ``rho_start * 2**k`` for which the
    strengthened inequality holds with ``Q_b = eps I``, ``eps = -fraction * kappa``
    and ``kappa`` the largest kernel eigenvalue observed on the samples.
    """
    sys_b, cert = bs.system, bs.cert
    n = sys_b.state_dim
    reports: dict[str, VerificationReport] = {}
    reports["bounds"], _ = check_bounds(cert, samples)
    reports["integrability"] = check_integrability(sys_b, cert, samples, tol=1e-10)
    reports["killing"] = check_killing(lambda z: sys_b.input_matrix(z)[:, 0], bs.q_b, cert, samples)
    Ls = lie_derivatives(sys_b, cert, samples.points)
    kappa, eps = kernel_epsilon(sys_b, cert, samples, fraction=fraction, Ls=Ls)
    if not eps > 0:
        reports["cmf-kernel"] = check_cmf_kernel(sys_b, cert, samples, Q=np.zeros((n, n)), Ls=Ls)
        return AugmentedVerification(reports, None, None, kappa, cert)
    Q_b = eps * np.eye(n)
    reports["cmf-kernel"] = check_cmf_kernel(sys_b, cert, samples, Q=Q_b, Ls=Ls)
    rho_b, margin = rho_ladder(sys_b, cert, samples, Q_b, rho_start, steps, Ls=Ls)
    if rho_b is None:
        reports["cmf-strengthened"] = check_cmf_strengthened(
            sys_b, cert, samples, Q=Q_b, rho=rho_start * 2.0**steps, Ls=Ls)
        return AugmentedVerification(reports, None, Q_b, kappa, cert)
    cert = replace(cert, rho=rho_b, q_margin=eps)
    reports["cmf-strengthened"] = check_cmf_strengthened(sys_b, cert, samples, Q=Q_b, Ls=Ls)
    return AugmentedVerification(reports, rho_b, Q_b, kappa, cert)
