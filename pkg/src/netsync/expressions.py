"""Closed-form model expressions: parsing, exact differentiation, numeric compilation.

Expressions are strings over the declared state symbols using ``+ - * /``,
``^`` or ``**`` for powers, and the functions in :data:`FUNCTIONS`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

from .certificate import ControlAffineSystem, MetricCertificate

FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "tanh": sp.tanh,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "pi": sp.pi,
}

_IDENT = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
_NUMBER = re.compile(r"(?<![A-Za-z_0-9])(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_ALLOWED_CHARS = re.compile(r"[A-Za-z_0-9\s+\-*/^(),]*")
_GLOBALS: dict = {}
exec("from sympy import Integer, Float, Rational, Symbol", _GLOBALS)
_TRANSFORMS = standard_transformations + (convert_xor,)


class ExpressionError(ValueError):
    pass


def parse(text, states: Sequence[sp.Symbol]) -> sp.Expr:
    """Parse one scalar expression; numbers are accepted as-is."""
    if isinstance(text, (int, float)):
        return sp.nsimplify(text) if float(text).is_integer() else sp.Float(text)
    if not isinstance(text, str):
        raise ExpressionError(f"expected an expression string, got {text!r}")
    names = {str(s): s for s in states}
    stripped = _NUMBER.sub(" 0 ", text)
    for ident in _IDENT.findall(stripped):
        if ident not in names and ident not in FUNCTIONS:
            raise ExpressionError(f"unknown name {ident!r} in expression {text!r}")
    if not _ALLOWED_CHARS.fullmatch(stripped):
        raise ExpressionError(f"illegal character in expression {text!r}")
    try:
        expr = parse_expr(text, local_dict={**FUNCTIONS, **names}, global_dict=dict(_GLOBALS),
                          transformations=_TRANSFORMS)
    except Exception as exc:  # sympy raises a zoo of exception types
        raise ExpressionError(f"cannot parse {text!r}: {exc}") from None
    return sp.sympify(expr)


def parse_matrix(rows, states, shape=None) -> sp.Matrix:
    if not isinstance(rows, (list, tuple)):
        rows = [[rows]]
    elif rows and not isinstance(rows[0], (list, tuple)):
        rows = [[r] for r in rows]
    M = sp.Matrix([[parse(x, states) for x in row] for row in rows])
    if shape is not None and M.shape != tuple(shape):
        raise ExpressionError(f"expected a {shape[0]}x{shape[1]} matrix, got {M.shape[0]}x{M.shape[1]}")
    return M


class Compiled:
    """Numeric evaluator for a matrix of expressions in the state symbols."""

    def __init__(self, M: sp.Matrix, states: Sequence[sp.Symbol]):
        self.expr = sp.Matrix(M)
        self.shape = self.expr.shape
        self._states = tuple(states)
        self._entries = [sp.lambdify(self._states, e, modules="numpy") for e in self.expr]
        self._whole = sp.lambdify(self._states, self.expr, modules="numpy")
        self.is_constant = all(not e.free_symbols for e in self.expr)
        if self.is_constant:
            self._const = np.array(self.expr.tolist(), dtype=float)
            self._const.setflags(write=False)

    def __call__(self, z) -> np.ndarray:
        if self.is_constant:
            return self._const
        return np.asarray(self._whole(*np.asarray(z, dtype=float).reshape(-1)), dtype=float)

    def batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.is_constant:
            return np.broadcast_to(self._const, (len(X),) + self.shape)
        cols = X.T
        out = np.empty((len(X), len(self._entries)))
        for k, fn in enumerate(self._entries):
            out[:, k] = fn(*cols)  # scalars broadcast on assignment
        return out.reshape((len(X),) + self.shape)


def states_from(names) -> tuple[sp.Symbol, ...]:
    syms = []
    for name in names:
        if not _IDENT.fullmatch(name) or name in FUNCTIONS:
            raise ExpressionError(f"invalid state name {name!r}")
        syms.append(sp.Symbol(name, real=True))
    if len(set(names)) != len(names):
        raise ExpressionError("duplicate state names")
    return tuple(syms)


@dataclass
class SymbolicSystem:
    states: tuple
    f: sp.Matrix
    g: sp.Matrix
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_strings(cls, names, f, g, name: str = "") -> "SymbolicSystem":
        states = states_from(names)
        n = len(states)
        fm = parse_matrix(f, states, (n, 1))
        gm = parse_matrix(g, states)
        if gm.shape[0] != n:
            raise ExpressionError(f"g must have {n} rows, got {gm.shape[0]}")
        return cls(states, fm, gm, name)

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def p(self) -> int:
        return self.g.shape[1]

    def compile(self) -> ControlAffineSystem:
        if "sys" not in self._cache:
            fc = Compiled(self.f, self.states)
            gc = Compiled(self.g, self.states)
            jc = Compiled(self.f.jacobian(sp.Matrix(self.states)), self.states)
            n, p = self.n, self.p
            self._cache["sys"] = ControlAffineSystem(
                n, p,
                f=lambda z: fc(z).reshape(n),
                g=gc,
                jac_f=jc,
                name=self.name,
                f_batch=lambda X: fc.batch(X).reshape(len(X), n),
                g_batch=gc.batch,
            )
        return self._cache["sys"]


@dataclass
class SymbolicCertificate:
    states: tuple
    P: sp.Matrix
    U: sp.Expr
    alpha: sp.Matrix
    rho: float | None = None
    q_margin: float | None = None
    p_lower: float | None = None
    p_upper: float | None = None
    name: str = ""

    @classmethod
    def from_strings(cls, names, P, U, alpha, **kwargs) -> "SymbolicCertificate":
        states = states_from(names)
        n = len(states)
        Pm = parse_matrix(P, states, (n, n))
        if Pm != Pm.T:
            raise ExpressionError("P must be symmetric")
        return cls(states, Pm, parse(U, states), parse_matrix(alpha, states), **kwargs)

    def compile(self) -> MetricCertificate:
        zs = sp.Matrix(self.states)
        Pc = Compiled(self.P, self.states)
        Uc = Compiled(sp.Matrix([self.U]), self.states)
        gU = Compiled(sp.Matrix([self.U]).jacobian(zs), self.states)
        ac = Compiled(self.alpha, self.states)
        ga = Compiled(self.alpha.jacobian(zs), self.states)
        partials = [Compiled(self.P.diff(s), self.states) for s in self.states]
        n = len(self.states)
        if Pc.is_constant:
            zero = np.zeros((n, n))

            def dP(v, z):
                return zero
        else:
            def dP(v, z):
                v = np.asarray(v, dtype=float).reshape(-1)
                return sum(vk * Dk(z) for vk, Dk in zip(v, partials))

        return MetricCertificate(
            P=Pc,
            U=lambda z: float(Uc(z)[0, 0]),
            grad_U=lambda z: gU(z).reshape(-1),
            alpha=lambda z: ac(z).reshape(-1),
            dP=dP,
            p_lower=self.p_lower,
            p_upper=self.p_upper,
            rho=self.rho,
            q_margin=self.q_margin,
            grad_alpha=ga,
            name=self.name,
            potential_many=lambda X: (Uc.batch(X)[:, 0, 0], ac.batch(X).reshape(len(X), -1)),
        )


def compile_scalar(text_or_expr, states) -> Compiled:
    expr = parse(text_or_expr, states) if isinstance(text_or_expr, (str, int, float)) else text_or_expr
    return Compiled(sp.Matrix([expr]), states)


def strict_feedback_from_strings(a_names, zb_name, f_a, g_a, f_b, g_b, q_a, g_b_bounds=(None, None),
                                 name: str = ""):
    """Build a :class:`~netsync.backstepping.StrictFeedbackSystem` with exact derivatives."""
    from .backstepping import StrictFeedbackSystem

    za = states_from(a_names)
    full = states_from(list(a_names) + [zb_name])
    na = len(za)
    fa = parse_matrix(f_a, za, (na, 1))
    ga = parse_matrix(g_a, za, (na, 1))
    fb = parse(f_b, full)
    gb = parse(g_b, full)
    qa = parse(q_a, za)
    za_vec, full_vec = sp.Matrix(za), sp.Matrix(full)
    grad_qa = sp.Matrix([qa]).jacobian(za_vec)

    fac, gac = Compiled(fa, za), Compiled(ga, za)
    fbc, gbc = compile_scalar(fb, full), compile_scalar(gb, full)
    qac = compile_scalar(qa, za)
    gq = Compiled(grad_qa, za)
    zb = full[-1]
    composite = SymbolicSystem(full, sp.Matrix(list(fa + ga * zb) + [fb]),
                               sp.Matrix([[0]] * na + [[gb]]), name).compile()
    return StrictFeedbackSystem(
        na=na,
        f_a=lambda z: fac(z).reshape(na),
        g_a=lambda z: gac(z).reshape(na),
        f_b=lambda z: float(fbc(z)[0, 0]),
        g_b=lambda z: float(gbc(z)[0, 0]),
        q_a=lambda z: float(qac(z)[0, 0]),
        grad_q_a=lambda z: gq(z).reshape(na),
        g_b_bounds=tuple(g_b_bounds),
        jac_f_a=Compiled(fa.jacobian(za_vec), za),
        jac_g_a=Compiled(ga.jacobian(za_vec), za),
        grad_f_b=Compiled(sp.Matrix([fb]).jacobian(full_vec), full),
        grad_g_b=Compiled(sp.Matrix([gb]).jacobian(full_vec), full),
        hess_q_a=Compiled(sp.hessian(qa, za), za),
        name=name,
        system=composite,
        q_many=lambda X: qac.batch(X)[:, 0, 0],
        gb_many=lambda X: gbc.batch(X)[:, 0, 0],
    )
