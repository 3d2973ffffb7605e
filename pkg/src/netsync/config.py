"""Experiment configuration files (JSON) and their resolution into model objects."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import registry
from .certificate import SampleSet
from .expressions import Compiled, ExpressionError, SymbolicCertificate, SymbolicSystem, compile_scalar, \
    parse_matrix, states_from, strict_feedback_from_strings
from .graph import FAMILIES, CommGraph, GraphError, build_graph

CHECKS = ("bounds", "integrability", "cmf-kernel", "cmf-strengthened", "killing")

DEFAULTS = {
    "grid": 21,
    "random": 1000,
    "seed": 0,
    "controller": {"kind": None, "safety": 1.25, "gain": None},
    "simulation": {"T": 20.0, "dt": 1e-3, "decimate": 1, "window": None},
    "sweep": {"deltas": [1e-2, 1e-1]},
    "backstepping": {"M_b": 1.0, "eta": None},
}


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def load(path) -> tuple[dict, str]:
    """Read a JSON configuration; returns ``(data, sha256 hex digest)``."""
    raw = Path(path).read_bytes()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} col {exc.colno}", exc.msg) from None
    if not isinstance(data, dict):
        raise ConfigError("top level", "configuration must be a JSON object")
    return data, hashlib.sha256(raw).hexdigest()


def _merge(defaults: dict, data: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in data.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Resolved:
    """Configuration with every default materialized plus the objects it describes."""

    data: dict
    example: Optional[registry.Example] = None
    graph: Optional[CommGraph] = None
    extras: dict = field(default_factory=dict)

    def samples(self) -> SampleSet:
        return SampleSet.default(self.example.box, self.data["grid"], self.data["random"], self.data["seed"])


def resolve(data: dict, seed: Optional[int] = None, grid: Optional[int] = None) -> Resolved:
    data = _merge(DEFAULTS, data)
    if seed is not None:
        data["seed"] = int(seed)
    if grid is not None:
        data["grid"] = int(grid)
    for key in ("grid", "random", "seed"):
        if not isinstance(data[key], int) or data[key] < 0:
            raise ConfigError(key, f"must be a non-negative integer, got {data[key]!r}")
    res = Resolved(data)
    if "system" in data:
        res.example = _resolve_example(data)
    if "graph" in data:
        res.graph = _resolve_graph(data["graph"])
    return res


def _resolve_graph(spec) -> CommGraph:
    if not isinstance(spec, dict):
        raise ConfigError("graph", "expected an object with 'nodes' and 'edges' or 'family'")
    try:
        if "family" in spec:
            fam = spec["family"]
            if fam not in FAMILIES:
                raise ConfigError("graph.family", f"unknown family {fam!r}; one of {sorted(FAMILIES)}")
            g = FAMILIES[fam](int(spec["nodes"]))
            spec["edges"] = [list(e) for e in g.edges]
            return g
        return build_graph(spec["nodes"], spec.get("edges", []))
    except KeyError as exc:
        raise ConfigError("graph", f"missing field {exc.args[0]!r}") from None
    except GraphError as exc:
        raise ConfigError("graph.edges", str(exc)) from None


def _matrix(value, where, shape=None) -> np.ndarray:
    try:
        M = np.array(value, dtype=float, ndmin=2)
    except (TypeError, ValueError):
        raise ConfigError(where, f"expected a numeric matrix, got {value!r}") from None
    if shape is not None and M.shape != shape:
        raise ConfigError(where, f"expected shape {shape}, got {M.shape}")
    return M


def _resolve_example(data: dict) -> registry.Example:
    spec = data["system"]
    if isinstance(spec, str):
        spec = {"registry": spec}
        data["system"] = spec
    try:
        if "registry" in spec:
            name = spec["registry"]
            try:
                ex = registry.get(name)
            except KeyError as exc:
                raise ConfigError("system.registry", str(exc.args[0])) from None
            ex = copy.copy(ex)
        else:
            ex = _user_example(data)
    except ExpressionError as exc:
        raise ConfigError("system", str(exc)) from None
    n = ex.system.state_dim
    if "box" in data:
        box = data["box"]
        if len(box) != n:
            raise ConfigError("box", f"expected {n} intervals, got {len(box)}")
        ex.box = tuple((float(lo), float(hi)) for lo, hi in box)
    data["box"] = [list(b) for b in ex.box]
    if "Q" in data:
        ex.Q = _matrix(data["Q"], "Q", (n, n))
    data["Q"] = np.asarray(ex.Q).tolist()
    return ex


def _user_example(data: dict) -> registry.Example:
    spec = data["system"]
    for key in ("states", "f", "g"):
        if key not in spec:
            raise ConfigError(f"system.{key}", "missing field")
    names = spec["states"]
    symsys = SymbolicSystem.from_strings(names, spec["f"], spec["g"], name=spec.get("name", "user"))
    if "certificate" not in data:
        raise ConfigError("certificate", "user-defined systems need a certificate")
    c = data["certificate"]
    for key in ("P", "U", "alpha"):
        if key not in c:
            raise ConfigError(f"certificate.{key}", "missing field")
    symcert = SymbolicCertificate.from_strings(
        names, c["P"], c["U"], c["alpha"], rho=c.get("rho"), q_margin=c.get("q_margin"),
        p_lower=c.get("p_lower"), p_upper=c.get("p_upper"), name=spec.get("name", "user"))
    n = symsys.n
    if "box" not in data:
        raise ConfigError("box", "user-defined systems need a verification box")
    q_margin = c.get("q_margin")
    Q = _matrix(data["Q"], "Q", (n, n)) if "Q" in data else (q_margin or 1.0) * np.eye(n)
    ex = registry.Example(spec.get("name", "user"), symsys.compile(), symcert.compile(), Q,
                          tuple((float(a), float(b)) for a, b in data["box"]))
    if symcert.P.free_symbols == set() and symsys.g.free_symbols == set():
        ex.constant_metric = (np.array(symcert.P.tolist(), dtype=float), np.array(symsys.g.tolist(), dtype=float))
    ex.globally_bounded = bool(spec.get("globally_bounded", False))
    if "killing" in data:
        k = data["killing"]
        states = states_from(names)
        gk = parse_matrix(k["g_a"], states, (n, 1))
        gc = Compiled(gk, states)
        qc = compile_scalar(k["q_a"], states)
        ex.killing = (lambda z: gc(z).reshape(-1), lambda z: float(qc(z)[0, 0]))
    return ex


def backstepping_example(data: dict) -> registry.Example:
    """Upper-subsystem example named by ``backstepping.base`` or defined inline."""
    spec = data.get("backstepping", {})
    if "base" in spec:
        try:
            return registry.get(spec["base"])
        except KeyError as exc:
            raise ConfigError("backstepping.base", str(exc.args[0])) from None
    need = ("a_states", "zb", "f_a", "g_a", "f_b", "g_b", "q_a", "P_a", "U_a", "alpha_a", "rho_a", "box_a")
    for key in need:
        if key not in spec:
            raise ConfigError(f"backstepping.{key}", "missing field")
    try:
        names = spec["a_states"]
        na = len(names)
        sfs = strict_feedback_from_strings(names, spec["zb"], spec["f_a"], spec["g_a"], spec["f_b"],
                                           spec["g_b"], spec["q_a"], name=spec.get("name", "user"))
        ga = [[x] for x in spec["g_a"]]
        sysa = SymbolicSystem.from_strings(names, spec["f_a"], ga).compile()
        q_margin = spec.get("q_margin_a", 1.0)
        cert = SymbolicCertificate.from_strings(names, spec["P_a"], spec["U_a"], spec["alpha_a"],
                                                rho=float(spec["rho_a"]), q_margin=q_margin).compile()
    except ExpressionError as exc:
        raise ConfigError("backstepping", str(exc)) from None
    Q = _matrix(spec.get("Q_a", (q_margin * np.eye(na)).tolist()), "backstepping.Q_a", (na, na))
    name = spec.get("name", "user")
    return registry.Example(name, sysa, cert, Q, tuple((float(a), float(b)) for a, b in spec["box_a"]),
                            killing=(sfs.g_a, sfs.q_a), strict_feedback=sfs)


def initial_state(sim: dict, N: int, n: int, rng: np.random.Generator) -> np.ndarray:
    from .simulate import manifold_perturbation

    x0 = sim.get("x0")
    if x0 is None:
        raise ConfigError("simulation.x0", "missing initial state")
    if isinstance(x0, dict):
        if "spread" in x0:
            lo, hi = x0["spread"]
            return lo + (hi - lo) * rng.random(N * n)
        if "z0" in x0 and "delta" in x0:
            z0 = _matrix(x0["z0"], "simulation.x0.z0").reshape(-1)
            if z0.size != n:
                raise ConfigError("simulation.x0.z0", f"expected {n} entries")
            return manifold_perturbation(z0, N, float(x0["delta"]), rng)
        raise ConfigError("simulation.x0", "expected 'spread' or 'z0' + 'delta'")
    x = _matrix(x0, "simulation.x0").reshape(-1)
    if x.size != N * n:
        raise ConfigError("simulation.x0", f"expected {N * n} entries, got {x.size}")
    return x


def to_jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
