"""Command-line entry point: ``nonlocal-feller <command> <spec> [flags]``.

Exit status: 0 on success, 2 when a verification check fails (reports are still
written), 1 on usage or specification errors.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    BarrierError,
    ContractionViolation,
    Lemma1Violation,
    NonlocalFellerError,
    PencilError,
    PositivityViolation,
    SpecError,
    UsageError,
)
from .geometry import compute_orbits, localize, require_valid, validate_spec
from .specio import SCHEMA_VERSION, canonical_json, check_schema, dump_json, load_spec, read_text, sha256_text

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


# ---------------------------------------------------------------------------
# fields given on the command line


def _bump(x, y):
    return np.exp(-8.0 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))


FIELD_BUILTINS = {
    "zero": lambda x, y: 0.0 * x,
    "one": lambda x, y: 1.0 + 0.0 * x,
    "sin": lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
    "bump": _bump,
    "radial": lambda x, y: 1.0 - x * x - y * y,
    "x": lambda x, y: x + 0.0 * y,
}


def parse_field(text: str, allow_file: bool = True):
    """A built-in name, ``const:<c>``, or a CSV file with header ``x,y,value``."""
    if text in FIELD_BUILTINS:
        return FIELD_BUILTINS[text]
    if text.startswith("const:"):
        try:
            return float(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad constant field {text!r}") from None
    if not allow_file:
        raise UsageError(f"unknown field {text!r}; choose from {', '.join(sorted(FIELD_BUILTINS))} or const:<c>")
    return _field_from_csv(text)


def _field_from_csv(path: str):
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

    rows = [r for r in read_text(path).splitlines() if r.strip() and not r.startswith("#")]
    reader = csv.DictReader(rows)
    if reader.fieldnames is None or [c.strip() for c in reader.fieldnames][:3] != ["x", "y", "value"]:
        raise UsageError(f"{path}: field files need the header x,y,value")
    try:
        data = np.array([[float(r["x"]), float(r["y"]), float(r["value"])] for r in reader])
    except (TypeError, ValueError):
        raise UsageError(f"{path}: non-numeric entry") from None
    if len(data) == 0:
        raise UsageError(f"{path}: no data rows")
    near = NearestNDInterpolator(data[:, :2], data[:, 2])
    if len(data) < 3:
        return lambda x, y: near(x, y)
    lin = LinearNDInterpolator(data[:, :2], data[:, 2])

    def f(x, y):
        v = lin(x, y)
        bad = ~np.isfinite(v)
        if np.any(bad):
            v[bad] = near(np.asarray(x)[bad], np.asarray(y)[bad])
        return v

    return f


def _pair(text: str, what: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{what} must be two comma-separated numbers, got {text!r}") from None
    return a, b


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _points(text: str) -> list[tuple[float, float]]:
    return [_pair(p, "--points entry") for p in text.split(";") if p.strip()]


# ---------------------------------------------------------------------------
# run bookkeeping


def jsonable(obj):
    """Plain JSON types; non-finite floats become strings so output stays strict JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


@dataclass
class Run:
    command: str
    argv: list
    out: Path
    spec_hash: str | None
    seed: int | None
    parameters: dict
    outputs: list = field(default_factory=list)
    started: float = field(default_factory=time.time)

    @property
    def manifest_id(self) -> str:
        key = {"command": self.command, "parameters": self.parameters, "spec_hash": self.spec_hash,
               "version": __version__, "seed": self.seed}
        return sha256_text(canonical_json(jsonable(key)))[:16]

    def report(self, schema: str, result: dict, name: str | None = None) -> Path:
        doc = {"schema": schema, "schema_version": SCHEMA_VERSION, "manifest_id": self.manifest_id,
               "command": self.command, "result": jsonable(result)}
        check_schema(doc, schema)
        return self._write(name or f"{schema}.json", lambda p: dump_json(doc, p))

    def table(self, name: str, header, rows) -> Path:
        def write(p):
            buf = io.StringIO()
            buf.write(f"# manifest_id={self.manifest_id}\n")
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
            p.write_text(buf.getvalue(), encoding="utf-8")

        return self._write(name, write)

    def _write(self, name, writer) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        writer(p)
        self.outputs.append(name)
        return p

    def finish(self, code: int):
        doc = {
            "manifest_id": self.manifest_id,
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "argv": list(self.argv),
            "spec_hash": self.spec_hash,
            "version": __version__,
            "seed": self.seed,
            "parameters": jsonable(self.parameters),
            "outputs": sorted(self.outputs),
            "started": _dt.datetime.fromtimestamp(self.started, _dt.timezone.utc).isoformat(),
            "wall_time": time.time() - self.started,
            "exit_code": code,
        }
        check_schema(doc, "manifest")
        self.out.mkdir(parents=True, exist_ok=True)
        dump_json(doc, self.out / "manifest.json")


def say(msg: str = ""):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands (each returns an exit code)


def _orbit_system(spec, index: int):
    orbits = compute_orbits(spec)
    if not orbits:
        raise UsageError("the domain has no corners, so there is no pencil to study")
    if not 0 <= index < len(orbits):
        raise UsageError(f"--orbit must be in 0..{len(orbits) - 1}")
    return orbits[index], localize(spec, orbits[index])


def cmd_validate(spec, run: Run, args) -> int:
    rep = validate_spec(spec)
    for c in rep.checks:
        say(f"  [{'ok' if c.passed else 'FAIL'}] {c.name}" + ("" if c.passed else f": {c.error} ({c.detail})"))
    run.report("validation", rep.to_json())
    say(f"{spec.name}: " + ("admissible" if rep.ok else f"{len(rep.failures())} check(s) failed"))
    return EXIT_OK if rep.ok else EXIT_ERROR


def cmd_spectrum(spec, run: Run, args) -> int:
    from .pencil import find_eigenvalues

    require_valid(spec)
    orbit, psys = _orbit_system(spec, args.orbit)
    s = find_eigenvalues(psys, _pair(args.strip, "--strip"), tol=args.tol, window=args.re_window)
    if not s.eigenvalues:
        say(f"no eigenvalues with Im in {args.strip} and |Re| <= {args.re_window:g}")
        return EXIT_OK
    doc = s.to_json()
    doc["orbit"] = {"index": args.orbit, "corners": list(orbit.corners), "system": psys.to_json()}
    run.report("spectrum", doc)
    run.table("eigenvalues.csv", ["re", "im", "count", "residual"],
              [(e.value.real, e.value.imag, e.count, e.residual) for e in s.eigenvalues])
    for e in s.eigenvalues:
        say(f"  lambda = {e.value.real:+.12f} {e.value.imag:+.12f}i  (count {e.count}, residual {e.residual:.2e})")
    return EXIT_OK


def cmd_strips(spec, run: Run, args) -> int:
    from .pencil import certify_strips

    require_valid(spec)
    orbit, psys = _orbit_system(spec, args.orbit)
    try:
        r = certify_strips(psys, window=args.re_window, resolution=args.resolution)
    except Lemma1Violation as exc:
        say(f"verification failed: {exc}")
        return EXIT_FAILED
    doc = r.to_json()
    doc["orbit"] = {"index": args.orbit, "corners": list(orbit.corners)}
    run.report("strips", doc)
    say(f"delta1 = {r.delta1:.6g}, working delta = {r.delta:.6g}, leading decay = {r.leading_decay:.6g}")
    return EXIT_OK


def cmd_barrier(spec, run: Run, args) -> int:
    from .barrier import build_barrier

    require_valid(spec)
    try:
        b = build_barrier(spec, args.q1, h=args.h)
    except BarrierError as exc:
        say(f"verification failed: {exc}")
        return EXIT_FAILED
    run.report("barrier", b.to_json())
    run.table("barrier.csv", ["x", "y", "v"], b.v.to_rows())
    say(f"m = inf v = {b.m:.6g}, c1 = sup v = {b.c1:.6g}")
    return EXIT_OK


def cmd_solve(spec, run: Run, args) -> int:
    from .fdsolver import resolvent, solve_resolvent, verify_bounds

    require_valid(spec)
    if not args.q > 0:
        raise UsageError("--q must be positive")
    system = resolvent(spec, args.h, args.q, allow_upwind=args.upwind)
    f, psi = parse_field(args.f), parse_field(args.psi)
    u = solve_resolvent(system, f, psi)
    rep = verify_bounds(u, f, system=system)
    doc = rep.to_json()
    doc["grid"] = system.grid.summary()
    doc["boundary_defect"] = u.boundary_defect()
    run.report("resolvent_report", doc)
    run.table("solution.csv", ["x", "y", "u"], u.to_rows())
    say(f"sup |u| = {u.sup:.6g}, q sup|u| / sup|f| = {rep.ratio:.6g}, checks " + ("passed" if rep.passed else "FAILED"))
    return EXIT_OK if rep.passed else EXIT_FAILED


def cmd_evolve(spec, run: Run, args) -> int:
    from .fdsolver import GridField, build_grid, project_to_CB
    from .semigroup import evolve

    require_valid(spec)
    if args.steps < 0 or not args.T > 0:
        raise UsageError("--steps must be >= 0 and --T positive")
    grid = build_grid(spec, args.h)
    u0 = GridField(grid, project_to_CB(grid, grid.evaluate(parse_field(args.u0))), None, "u0")
    log = evolve(u0, args.T, args.steps, strict=False)
    run.report("evolution", log.to_json())
    run.table("evolution.csv", ["step", "t", "sup", "min"], log.rows())
    ok = log.contraction_ok and (log.positivity_ok or u0.min < 0)
    say(f"{log.steps} steps of dt = {log.dt:.6g}: sup {log.sup[0]:.6g} -> {log.sup[-1]:.6g}, "
        f"min over steps {min(log.minimum):.3g}; " + ("ok" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_verify_feller(spec, run: Run, args) -> int:
    from .semigroup import hille_iosida_checklist

    require_valid(spec)
    rep = hille_iosida_checklist(spec, h=args.h, q_grid=_floats(args.q_grid, "--q-grid"), trials=args.trials,
                                 seed=args.seed, eps=args.eps, evolve_steps=args.evolve_steps)
    run.report("feller_report", rep.to_json())
    say(rep.summary())
    return EXIT_OK if rep.passed else EXIT_FAILED


def _path_config(args):
    from .montecarlo import PathConfig

    return PathConfig(dt=args.dt, q=args.q, t_max=args.t_max, seed=args.seed, workers=args.workers)


def cmd_simulate(spec, run: Run, args) -> int:
    from .montecarlo import estimate_resolvent

    require_valid(spec)
    x0 = _pair(args.x0, "--x0")
    est = estimate_resolvent(x0, spec, parse_field(args.f, allow_file=False), args.q, args.paths, _path_config(args))
    doc = est.to_json()
    doc["x0"] = list(x0)
    run.report("simulation", doc)
    say(f"u({x0[0]:g}, {x0[1]:g}) ~ {est.mean:.6g} +- {est.stderr:.2g}  ({est.n_paths} paths; {est.histogram})")
    ok = est.bound_ok and est.nonneg_ok is not False
    return EXIT_OK if ok else EXIT_FAILED


def cmd_cross_validate(spec, run: Run, args) -> int:
    from .montecarlo import cross_validate

    require_valid(spec)
    pts = _points(args.points)
    if not pts:
        say("no points given")
        return EXIT_OK
    cv = cross_validate(spec, parse_field(args.f, allow_file=False), args.q, pts, args.paths,
                        _path_config(args), h=args.h, allowance=args.allowance)
    run.report("cross_validation", cv.to_json())
    run.table("cross_validation.csv", ["x", "y", "u_fd", "u_mc", "stderr", "diff", "tolerance", "passed"], cv.table())
    for r in cv.rows:
        say(f"  ({r.point[0]:g}, {r.point[1]:g}): FD {r.u_fd:.6g}  MC {r.u_mc:.6g} +- {r.stderr:.2g}  "
            f"|diff| {r.diff:.2g} <= {r.tolerance:.2g}: {'pass' if r.passed else 'FAIL'}")
    return EXIT_OK if cv.passed else EXIT_FAILED


COMMANDS = {
    "validate": cmd_validate,
    "spectrum": cmd_spectrum,
    "strips": cmd_strips,
    "barrier": cmd_barrier,
    "solve": cmd_solve,
    "evolve": cmd_evolve,
    "verify-feller": cmd_verify_feller,
    "simulate": cmd_simulate,
    "cross-validate": cmd_cross_validate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nonlocal-feller", description="Corner pencils, barriers, resolvent and semigroup checks "
                "for elliptic problems with nonlocal boundary conditions.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("spec", help="spec JSON file or builtin:<name>")
        sp.add_argument("--out", default=".", help="output directory (default: current directory)")
        return sp

    add("validate", "check admissibility of a domain specification")
    s = add("spectrum", "pencil eigenvalues of a corner orbit in a strip")
    s.add_argument("--orbit", type=int, default=0)
    s.add_argument("--strip", default="-2,0", help="Im lambda range a,b (default -2,0)")
    s.add_argument("--re-window", type=float, default=20.0)
    s.add_argument("--tol", type=float, default=1e-10)
    s = add("strips", "eigenvalue-free strip and leading corner decay of an orbit")
    s.add_argument("--orbit", type=int, default=0)
    s.add_argument("--re-window", type=float, default=20.0)
    s.add_argument("--resolution", type=float, default=1e-3)
    s = add("barrier", "positive barrier v with boundary data 1 and its constants m, c1")
    s.add_argument("--q1", type=float, default=1.0)
    s.add_argument("--h", type=float, default=1.0 / 64)
    s = add("solve", "finite-difference resolvent solve")
    s.add_argument("--q", type=float, default=1.0)
    s.add_argument("--h", type=float, default=1.0 / 64)
    s.add_argument("--f", default="one", help="right-hand side: builtin name, const:<c> or CSV file (x,y,value)")
    s.add_argument("--psi", default="zero", help="boundary data: builtin name, const:<c> or CSV file")
    s.add_argument("--upwind", action="store_true", help="allow upwinding of strong drift")
    s = add("evolve", "implicit Euler trajectory of the semigroup")
    s.add_argument("--u0", default="sin")
    s.add_argument("--T", type=float, default=0.1)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--h", type=float, default=1.0 / 64)
    s = add("verify-feller", "contraction, positivity and density checks of the generator")
    s.add_argument("--h", type=float, default=1.0 / 64)
    s.add_argument("--q-grid", default="1,10,100")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=0.1)
    s.add_argument("--evolve-steps", type=int, default=0)
    for name, help_ in (("simulate", "Monte Carlo resolvent estimate at one point"),
                        ("cross-validate", "compare finite differences with Monte Carlo at several points")):
        s = add(name, help_)
        s.add_argument("--q", type=float, default=1.0)
        s.add_argument("--f", default="one", help="builtin name or const:<c>")
        s.add_argument("--paths", type=int, default=10_000)
        s.add_argument("--dt", type=float, default=1e-4)
        s.add_argument("--t-max", type=float, default=20.0)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--workers", type=int, default=None, help="worker processes (capped by NONLOCAL_FELLER_THREADS)")
        if name == "simulate":
            s.add_argument("--x0", required=True, help="start point x,y")
        else:
            s.add_argument("--points", required=True, help="points 'x,y;x,y;...'")
            s.add_argument("--h", type=float, default=1.0 / 64)
            s.add_argument("--allowance", type=float, default=0.02)
    return p


def _parameters(args) -> dict:
    skip = {"out", "spec", "command", "workers"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        spec, spec_hash = load_spec(args.spec)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    run = Run(args.command, argv, Path(args.out), spec_hash, getattr(args, "seed", None), _parameters(args))
    try:
        code = COMMANDS[args.command](spec, run, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        if args.command != "validate":
            run.report("validation", validate_spec(spec).to_json())
        code = EXIT_ERROR
    except (ContractionViolation, PositivityViolation, PencilError) as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        code = EXIT_FAILED
    except NonlocalFellerError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_FAILED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    run.finish(code)
    return code


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
