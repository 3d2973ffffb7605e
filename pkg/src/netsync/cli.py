"""Command-line interface: ``netsync <command> --config run.json``.

Exit codes: 0 ok, 1 usage or parse error, 2 verdict failure, 3 numerical failure.
Every failure prints one ``netsync: reason=<code> <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, config as cfgmod, registry
from .backstepping import BacksteppingError, augment_certificate, choose_eta, verify_augmented
from .certificate import (
    EvaluationError,
    SampleSet,
    check_bounds,
    check_cmf_kernel,
    check_cmf_strengthened,
    check_integrability,
    check_killing,
    lie_derivatives,
)
from .config import ConfigError, Resolved, to_jsonable
from .expressions import ExpressionError
from .graph import GraphError, find_c1, is_connected, laplacian_spectrum, reduced_laplacian
from .simulate import (
    ExperimentConfig,
    append_results_index,
    fit_lyapunov_rate,
    fit_rate,
    integrate,
    sandwich_violation,
    verdicts,
    write_trace_csv,
)
from .synthesis import SynthesisError, SyncController, make_global_controller, make_local_controller, \
    structural_checks

log = logging.getLogger("netsync")

EXIT_OK, EXIT_USAGE, EXIT_VERDICT, EXIT_NUMERIC = 0, 1, 2, 3


class Failure(Exception):
    def __init__(self, exit_code: int, code: str, message: str, outcome: Optional[dict] = None):
        super().__init__(message)
        self.exit_code = exit_code
        self.code = code
        self.outcome = outcome or {}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise Failure(EXIT_USAGE, "usage", message)


# -- helpers -----------------------------------------------------------------------------


def _need(res: Resolved, what: str):
    obj = res.example if what == "system" else res.graph
    if obj is None:
        raise Failure(EXIT_USAGE, "config", f"{what}: missing section")
    return obj


def _fmt(v) -> str:
    return np.array2string(np.asarray(v, dtype=float), precision=10, separator=", ", max_line_width=200)


def run_checks(ex: registry.Example, samples: SampleSet, names) -> dict:
    """Run the named certificate checks; returns ``{name: VerificationReport}``."""
    sys_, cert = ex.system, ex.certificate
    out = {}
    Ls = None
    for name in names:
        if name not in cfgmod.CHECKS:
            raise Failure(EXIT_USAGE, "config", f"checks: unknown check {name!r}; one of {list(cfgmod.CHECKS)}")
        if name in ("cmf-kernel", "cmf-strengthened") and Ls is None:
            Ls = lie_derivatives(sys_, cert, samples.points)
        if name == "bounds":
            out[name], _ = check_bounds(cert, samples)
        elif name == "integrability":
            out[name] = check_integrability(sys_, cert, samples)
        elif name == "cmf-kernel":
            out[name] = check_cmf_kernel(sys_, cert, samples, Q=ex.Q, Ls=Ls)
        elif name == "cmf-strengthened":
            if cert.rho is None:
                raise Failure(EXIT_USAGE, "config", "cmf-strengthened needs certificate.rho")
            out[name] = check_cmf_strengthened(sys_, cert, samples, Q=ex.Q, Ls=Ls)
        else:
            if ex.killing is None:
                raise Failure(EXIT_USAGE, "config", "killing check needs a 'killing' section (g_a, q_a)")
            out[name] = check_killing(*ex.killing, cert, samples)
    return out


def build_controller(res: Resolved, override: bool) -> tuple[SyncController, dict]:
    ex, g = _need(res, "system"), _need(res, "graph")
    if not is_connected(g):
        raise Failure(EXIT_VERDICT, "disconnected-graph", "communication graph is not connected")
    spec = res.data["controller"]
    kind = spec.get("kind") or ("global" if ex.constant_metric is not None else "local")
    spec["kind"] = kind
    safety = float(spec.get("safety", 1.25))
    gain = spec.get("gain")
    if override and gain is None:
        raise Failure(EXIT_USAGE, "config", "--override-gain needs controller.gain")
    samples = res.samples()
    prereq = {}
    if kind == "local":
        prereq = run_checks(ex, samples, ("integrability", "cmf-strengthened"))
        failed = [k for k, r in prereq.items() if not r.passed]
        if failed and not override:
            raise Failure(EXIT_VERDICT, "prerequisite-failed",
                          f"certificate check(s) failed: {', '.join(failed)}",
                          {"prerequisites": {k: r.as_dict() for k, r in prereq.items()}})
        ctrl = make_local_controller(ex.system, ex.certificate, g, ell=gain, allow_low_gain=override,
                                     safety=safety)
    elif kind == "global":
        if ex.constant_metric is None:
            raise Failure(EXIT_USAGE, "config", "global controller needs a constant metric and input matrix")
        P, G = ex.constant_metric
        ctrl = make_global_controller(ex.system, P, G, g, ex.Q, samples, ell=gain, safety=safety,
                                      allow_low_gain=override, globally_bounded=ex.globally_bounded)
    else:
        raise Failure(EXIT_USAGE, "config", f"controller.kind: expected local or global, got {kind!r}")
    return ctrl, {k: r.as_dict() for k, r in prereq.items()}


# -- commands ----------------------------------------------------------------------------


def cmd_graph_info(res: Resolved, args) -> dict:
    g = _need(res, "graph")
    connected = is_connected(g)
    out = {"nodes": g.N, "edges": [list(e) for e in g.edges], "connected": connected,
           "laplacian_spectrum": laplacian_spectrum(g)}
    print(f"nodes            {g.N}")
    print(f"edges            {len(g.edges)}")
    print(f"L spectrum       {_fmt(out['laplacian_spectrum'])}")
    if g.N > 1:
        red = np.sort(np.linalg.eigvals(reduced_laplacian(g)).real)
        out["reduced_spectrum"] = red
        print(f"reduced spectrum {_fmt(red)}")
    print(f"connected        {connected}")
    if not connected:
        raise Failure(EXIT_VERDICT, "disconnected-graph", "communication graph is not connected", out)
    if g.N > 1:
        cm = find_c1(g)
        out.update(c1=cm.c1, mu=cm.mu)
        print(f"c1               {cm.c1:.17g}")
        print(f"mu               {cm.mu:.17g}")
    return out


def cmd_check(res: Resolved, args) -> dict:
    ex = _need(res, "system")
    names = res.data.setdefault("checks", list(cfgmod.CHECKS) if ex.killing else list(cfgmod.CHECKS[:4]))
    reports = run_checks(ex, res.samples(), names)
    for r in reports.values():
        print(r.summary())
    out = {"checks": {k: r.as_dict() for k, r in reports.items()}}
    failed = [k for k, r in reports.items() if not r.passed]
    if failed:
        raise Failure(EXIT_VERDICT, "check-failed", f"failed: {', '.join(failed)}", out)
    return out


def _controller_summary(ctrl: SyncController, res: Resolved):
    probes = res.samples()
    struct = structural_checks(ctrl, probes, seed=res.data["seed"])
    print(f"kind             {ctrl.kind}")
    print(f"ell              {ctrl.ell:.17g}")
    if ctrl.gain is not None:
        print(f"ell_min          {ctrl.gain.ell_min:.17g}")
        print(f"nu               {ctrl.gain.nu:.17g}")
        if ctrl.gain.mu is not None:
            print(f"c1, mu           {ctrl.gain.c1:.17g}, {ctrl.gain.mu:.17g}")
    print(struct.summary())
    return {"controller": ctrl.params(), "structure": struct.as_dict()}, struct


def cmd_synthesize(res: Resolved, args) -> dict:
    ctrl, prereq = build_controller(res, args.override_gain)
    out, struct = _controller_summary(ctrl, res)
    if prereq:
        out["prerequisites"] = prereq
    if not struct.passed:
        raise Failure(EXIT_VERDICT, "structure-failed", "controller violates sparsity or manifold vanishing", out)
    return out


def cmd_backstep(res: Resolved, args) -> dict:
    base = cfgmod.backstepping_example(res.data)
    spec = res.data["backstepping"]
    if base.strict_feedback is None:
        raise Failure(EXIT_USAGE, "config", f"example {base.name!r} has no strict-feedback extension")
    a = base.a_certificate
    a_samples = SampleSet.default(a.box, res.data["grid"], res.data["random"], res.data["seed"])
    eta = spec.get("eta")
    eta = choose_eta(a, base.strict_feedback, a_samples) if eta is None else float(eta)
    spec["eta"] = eta
    bs = augment_certificate(a, base.strict_feedback, eta, float(spec["M_b"]))
    samples = SampleSet.default(bs.box, res.data["grid"], res.data["random"], res.data["seed"])
    ver = verify_augmented(bs, samples, rho_start=a.rho)
    for r in ver.reports.values():
        print(r.summary())
    print(f"eta              {eta:.17g}")
    print(f"rho_b            {ver.rho_b}")
    print(f"kernel max       {ver.kernel_max:.17g}")
    out = {"eta": eta, "M_b": float(spec["M_b"]), "verification": ver.as_dict(),
           "P_b_origin": bs.cert.metric(np.zeros(bs.system.state_dim))}
    if not ver.passed:
        point = None
        for r in ver.reports.values():
            if not r.passed:
                point = r.worst_point
                break
        raise Failure(EXIT_VERDICT, "backstepping-unverified",
                      f"augmented certificate failed verification (compact set too large or eta too small)"
                      f" worst point {_fmt(point) if point is not None else '-'}", out)
    name = spec.get("name") or f"{base.name}-backstepped"
    ex = registry.Example(name, bs.system, ver.certificate, ver.Q_b, bs.box,
                          f"backstepped from {base.name}", killing=(lambda z: bs.system.input_matrix(z)[:, 0], bs.q_b),
                          verification=ver, extras={"eta": eta, "M_b": bs.M_b, "rho_b": ver.rho_b})
    registry.register(ex)
    out["registered"] = name
    return out


def _simulate_one(res: Resolved, ctrl: SyncController, x0, name: str, out_dir: Path) -> dict:
    ex = res.example
    sim = res.data["simulation"]
    P = ctrl.P if ctrl.kind == "global" else None
    window = tuple(sim["window"]) if sim.get("window") else None
    exp = ExperimentConfig(ex.system, ctrl, x0, float(sim["T"]), float(sim["dt"]), window=window,
                           decimate=int(sim["decimate"]), lyapunov_P=P, name=name)
    sim["window"] = list(exp.window)
    trace = integrate(exp)
    fit = fit_rate(trace, exp.window)
    verdict = verdicts(trace, fit)
    csv = write_trace_csv(trace, out_dir / f"{name}.csv")
    append_results_index(out_dir / "results.csv", name, fit, verdict)
    d0, dT = float(trace.sync_distance[0]), float(trace.sync_distance[-1])
    out = {"csv": csv.name, "fit": fit.as_dict(), "verdicts": verdict, "blowup_time": trace.blowup_time,
           "dist_initial": d0, "dist_final": dT, "sandwich_violation": sandwich_violation(trace)}
    if trace.V is not None:
        out["V_fit"] = fit_lyapunov_rate(trace, exp.window).as_dict()
    print(f"{name}: lambda={fit.lam:.10g} r2={fit.r_squared:.6f} |x(T)|/|x(0)|={dT / d0 if d0 else 0:.3e} "
          f"synchronized={verdict['synchronized']}")
    return out


def cmd_simulate(res: Resolved, args) -> dict:
    ctrl, _ = build_controller(res, args.override_gain)
    sim = res.data["simulation"]
    rng = np.random.default_rng(res.data["seed"])
    x0 = cfgmod.initial_state(sim, ctrl.graph.N, ctrl.state_dim, rng)
    name = sim.get("name") or "trace"
    sim["name"] = name
    out = {"controller": ctrl.params(), "experiment": _simulate_one(res, ctrl, x0, name, args.out)}
    if not out["experiment"]["verdicts"]["synchronized"]:
        raise Failure(EXIT_VERDICT, "not-synchronized", "synchronization verdict is false", out)
    return out


def cmd_sweep(res: Resolved, args) -> dict:
    ctrl, _ = build_controller(res, args.override_gain)
    sim = res.data["simulation"]
    x0 = sim.get("x0")
    if not isinstance(x0, dict) or "z0" not in x0:
        raise Failure(EXIT_USAGE, "config", "sweep needs simulation.x0 = {z0: [...]} (delta is swept)")
    base = sim.get("name") or "sweep"
    sim["name"] = base
    runs, best = {}, None
    for delta in sorted(float(d) for d in res.data["sweep"]["deltas"]):
        rng = np.random.default_rng(res.data["seed"])
        x = cfgmod.initial_state({"x0": {"z0": x0["z0"], "delta": delta}}, ctrl.graph.N, ctrl.state_dim, rng)
        r = _simulate_one(res, ctrl, x, f"{base}-delta-{delta:g}", args.out)
        runs[format(delta, "g")] = r
        if r["verdicts"]["synchronized"]:
            best = delta
    print(f"largest synchronizing delta: {best}")
    out = {"controller": ctrl.params(), "runs": runs, "largest_synchronizing_delta": best}
    if best is None:
        raise Failure(EXIT_VERDICT, "not-synchronized", "no swept delta synchronized", out)
    return out


COMMANDS = {
    "graph-info": cmd_graph_info,
    "check": cmd_check,
    "synthesize": cmd_synthesize,
    "backstep": cmd_backstep,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="netsync", description="Synchronization of networked nonlinear agents.")
    p.add_argument("--version", action="version", version=f"netsync {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path, help="JSON configuration file")
        s.add_argument("--out", type=Path, default=Path("netsync-out"), help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the configuration seed")
        s.add_argument("--grid", type=int, default=None, help="grid points per axis for sample sets")
        s.add_argument("--override-gain", action="store_true",
                       help="accept controller.gain even below the certified minimum")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def write_manifest(out_dir: Path, command: str, data: dict, digest: str, outcome: dict) -> Path:
    manifest = {
        "command": command,
        "config": data,
        "tool_version": __version__,
        "input_digest": digest,
        "outcome": outcome,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(to_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return path


def _fail(code: str, message: str) -> None:
    print(f"netsync: reason={code} {' '.join(str(message).split())}", file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except Failure as exc:
        _fail(exc.code, exc)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        _fail("usage", "--seed must be non-negative")
        return EXIT_USAGE
    data, digest, outcome = {}, None, {}
    try:
        try:
            data, digest = cfgmod.load(args.config)
        except OSError as exc:
            raise Failure(EXIT_USAGE, "config", f"cannot read {args.config}: {exc.strerror}") from None
        res = cfgmod.resolve(data, seed=args.seed, grid=args.grid)
        data = res.data
        args.out.mkdir(parents=True, exist_ok=True)
        with np.errstate(all="ignore"):  # non-finite values are caught and reported explicitly
            outcome = COMMANDS[args.command](res, args)
        outcome = {"status": "ok", "exit_code": EXIT_OK, **outcome}
        code = EXIT_OK
    except Failure as exc:
        code = exc.exit_code
        outcome = {"status": "fail", "exit_code": code, "reason": exc.code, "message": str(exc), **exc.outcome}
        _fail(exc.code, exc)
    except (ConfigError, ExpressionError, GraphError) as exc:
        code = EXIT_USAGE
        outcome = {"status": "fail", "exit_code": code, "reason": "config", "message": str(exc)}
        _fail("config", exc)
    except (SynthesisError, BacksteppingError) as exc:
        code = EXIT_VERDICT
        outcome = {"status": "fail", "exit_code": code, "reason": exc.code, "message": str(exc)}
        _fail(exc.code, exc)
    except (EvaluationError, np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        code = EXIT_NUMERIC
        outcome = {"status": "fail", "exit_code": code, "reason": "numerical", "message": str(exc)}
        _fail("numerical", exc)
    if args.out.is_dir():
        write_manifest(args.out, args.command, data, digest, outcome)
    return code


if __name__ == "__main__":
    sys.exit(main())
