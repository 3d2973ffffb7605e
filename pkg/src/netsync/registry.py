"""Named built-in examples.

Each entry bundles an agent model, a metric certificate, the matrix ``Q`` used
by the CMF checks and the verification box. ``<base>-backstepped`` names are
built on first use by running the backstepping pipeline on ``<base>``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .backstepping import (
    ASubCertificate,
    AugmentedVerification,
    Backstepped,
    StrictFeedbackSystem,
    augment_certificate,
    choose_eta,
    verify_augmented,
)
from .certificate import ControlAffineSystem, MetricCertificate, SampleSet
from .expressions import SymbolicCertificate, SymbolicSystem, strict_feedback_from_strings

PI = math.pi


@dataclass
class Example:
    name: str
    system: ControlAffineSystem
    certificate: MetricCertificate
    Q: np.ndarray
    box: tuple
    description: str = ""
    # constant metric and input matrix, when the global controller applies
    constant_metric: Optional[tuple] = None
    globally_bounded: bool = False
    # (g_a, q_a) for the Killing check
    killing: Optional[tuple] = None
    # strict-feedback extension whose upper subsystem this example certifies
    strict_feedback: Optional[StrictFeedbackSystem] = None
    backstepped: Optional[Backstepped] = None
    verification: Optional[AugmentedVerification] = None
    extras: dict = field(default_factory=dict)

    def samples(self, grid: int = 21, n_random: int = 1000, seed: int = 0) -> SampleSet:
        return SampleSet.default(self.box, grid, n_random, seed)

    @property
    def a_certificate(self) -> ASubCertificate:
        return ASubCertificate(self.certificate, self.Q, self.box)


_REGISTRY: dict[str, Example] = {}
_FACTORIES: dict[str, Callable[[], Example]] = {}


def register(example: Example) -> None:
    _REGISTRY[example.name] = example


def names() -> list[str]:
    return sorted(set(_FACTORIES) | set(_REGISTRY))


def get(name: str) -> Example:
    if name in _REGISTRY:
        return _REGISTRY[name]
    if name in _FACTORIES:
        _REGISTRY[name] = _FACTORIES[name]()
        return _REGISTRY[name]
    if name.endswith("-backstepped"):
        base = name[: -len("-backstepped")]
        ex = backstep_example(get(base))
        register(ex)
        return ex
    raise KeyError(f"unknown example {name!r}; known: {', '.join(names())}")


def _factory(name):
    def deco(fn):
        _FACTORIES[name] = fn
        return fn
    return deco


def backstep_example(base: Example, M_b: float = 1.0, eta: Optional[float] = None,
                     samples: Optional[SampleSet] = None, name: Optional[str] = None) -> Example:
    """Run ``choose_eta -> augment_certificate -> verify_augmented`` on ``base``."""
    if base.strict_feedback is None:
        raise KeyError(f"example {base.name!r} declares no strict-feedback extension")
    sfs = base.strict_feedback
    a = base.a_certificate
    eta = choose_eta(a, sfs) if eta is None else eta
    bs = augment_certificate(a, sfs, eta, M_b)
    samples = samples or SampleSet.default(bs.box, 21, 1000, 0)
    ver = verify_augmented(bs, samples, rho_start=a.rho)
    cert = ver.certificate
    Q = ver.Q_b if ver.Q_b is not None else np.zeros((bs.system.state_dim,) * 2)
    return Example(
        name=name or f"{base.name}-backstepped",
        system=bs.system,
        certificate=cert,
        Q=Q,
        box=bs.box,
        description=f"backstepped from {base.name} (eta={eta:.6g}, M_b={M_b:g})",
        killing=(lambda z: bs.system.input_matrix(z)[:, 0], bs.q_b),
        backstepped=replace(bs, cert=cert),
        verification=ver,
        extras={"eta": eta, "M_b": M_b, "rho_b": ver.rho_b},
    )


# -- built-in examples -------------------------------------------------------------------

_5B_A = ["za1", "za2"]
_5B_FA = ["-za1 + sin(za2)*cos(za1) + za2", "0"]
_5B_GA = ["0", "2 + sin(za1)"]


def _paper_5b_a(U="za1 + 2*za2", name="paper-5B-a") -> Example:
    sys = SymbolicSystem.from_strings(_5B_A, _5B_FA, [[g] for g in _5B_GA], name=name).compile()
    # rho_a = 2 and Q_a = 0.6 I: kernel maximum is -6/5, half of it kept as Q margin
    cert = SymbolicCertificate.from_strings(
        _5B_A, [[2, 1], [1, 2]], U, ["1/(2 + sin(za1))"],
        rho=2.0, q_margin=0.6, p_lower=1.0, p_upper=3.0, name=name,
    ).compile()
    sfs = strict_feedback_from_strings(_5B_A, "zb", _5B_FA, _5B_GA, "0", "1", "2 + sin(za1)",
                                       g_b_bounds=(1.0, 1.0), name="paper-5B")
    return Example(
        name=name,
        system=sys,
        certificate=cert,
        Q=0.6 * np.eye(2),
        box=((-PI, PI), (-PI, PI)),
        description="upper subsystem of the strict-feedback illustrative example",
        killing=(sfs.g_a, sfs.q_a),
        strict_feedback=sfs,
    )


_factory("paper-5B-a")(_paper_5b_a)
_factory("paper-5B-a-perturbed-U")(lambda: _paper_5b_a("za1 + 2*za2 + 0.1*za1^2", "paper-5B-a-perturbed-U"))


@_factory("scalar-sine")
def _scalar_sine() -> Example:
    sys = SymbolicSystem.from_strings(["z"], ["sin(z)"], [["1"]], name="scalar-sine").compile()
    cert = SymbolicCertificate.from_strings(["z"], [[1]], "z", ["1"], rho=4.0, q_margin=2.0,
                                            p_lower=1.0, p_upper=1.0, name="scalar-sine").compile()
    return Example("scalar-sine", sys, cert, np.array([[2.0]]), ((-10.0, 10.0),),
                   "z' = sin z + u with unit metric", constant_metric=(np.eye(1), np.ones((1, 1))),
                   globally_bounded=True)


@_factory("scalar-sine-weak")
def _scalar_sine_weak() -> Example:
    ex = _scalar_sine()
    ex.name = "scalar-sine-weak"
    ex.certificate = replace(ex.certificate, rho=1.0, name="scalar-sine-weak")
    ex.description = "scalar-sine with rho = 1 (strengthened inequality fails)"
    return ex


@_factory("scalar-unstable")
def _scalar_unstable() -> Example:
    sys = SymbolicSystem.from_strings(["z"], ["z"], [["1"]], name="scalar-unstable").compile()
    cert = SymbolicCertificate.from_strings(["z"], [[1]], "z", ["1"], rho=4.0, q_margin=1.0,
                                            p_lower=1.0, p_upper=1.0, name="scalar-unstable").compile()
    return Example("scalar-unstable", sys, cert, np.eye(1), ((-10.0, 10.0),),
                   "z' = z + u", constant_metric=(np.eye(1), np.ones((1, 1))), globally_bounded=True)


@_factory("linear-rotation")
def _linear_rotation() -> Example:
    P = [[1, 0.5], [0.5, 1]]
    sys = SymbolicSystem.from_strings(["z1", "z2"], ["z2", "-z1"], [["0"], ["1"]],
                                      name="linear-rotation").compile()
    # U = z^T P G,  rho = 4 gives P A + A^T P - 4 P G G^T P with top eigenvalue sqrt(17)/2 - 5/2
    cert = SymbolicCertificate.from_strings(["z1", "z2"], P, "0.5*z1 + z2", ["1"], rho=4.0, q_margin=0.4,
                                            name="linear-rotation").compile()
    return Example("linear-rotation", sys, cert, 0.4 * np.eye(2), ((-5.0, 5.0), (-5.0, 5.0)),
                   "harmonic oscillator driven through its second state",
                   constant_metric=(np.array(P, dtype=float), np.array([[0.0], [1.0]])),
                   globally_bounded=True)
