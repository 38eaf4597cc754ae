"""Batch experiment runner.

Exit codes: 0 success, 1 usage or configuration error, 2 validation
failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import analysis
from . import discretization as disc
from . import reduction as red
from . import sections as sec
from .errors import (
    ConfigError,
    ConvergenceError,
    EvaluationError,
    NotPositiveDefiniteError,
    SingularMatrixError,
    StructureError,
)
from .numerics import cholesky
from .system import ParameterDomain, classify_system, registry_get, system_to_json, validate_friedrichs

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("validate", "classify", "solve", "sweep", "nwidth", "sectional", "report")
DEFAULT_CELLS = 16
CHECK_MESH_MAX = 8


class ValidationFailure(Exception):
    """A structural check failed; mapped to exit code 2."""


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def load_schema():
    text = resources.files("fsmor").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_config(path):
    """Parse and schema-validate a JSON config file.

    Raises
    ------
    ConfigError
        With file, line and column for malformed JSON, or the failing
        schema path otherwise.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from exc
    return cfg


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _system(cfg):
    if "system" not in cfg:
        raise ConfigError("this command needs a 'system' entry")
    s = cfg["system"]
    return registry_get(s["id"], s.get("constants", {}))


def _domain(cfg, system=None):
    if system is not None:
        return system.params
    if "parameters" not in cfg:
        raise ConfigError("give either 'system' or 'parameters'")
    p = cfg["parameters"]
    if len(p["lo"]) != len(p["hi"]):
        raise ConfigError("parameters.lo and parameters.hi differ in length")
    names = tuple(p.get("names", [f"mu{i}" for i in range(len(p["lo"]))]))
    return ParameterDomain(tuple(p["lo"]), tuple(p["hi"]), names)


def _space(cfg, system=None, cells=None):
    mesh_cfg = cfg.get("mesh", {"cells": DEFAULT_CELLS})
    cells = mesh_cfg["cells"] if cells is None else cells
    periodic = mesh_cfg.get("periodic")
    if system is not None:
        mesh = disc.StructuredMesh.for_system(system, cells, periodic)
        m = system.m
    else:
        counts = (cells,) if np.isscalar(cells) else tuple(cells)
        per = (periodic,) * len(counts) if isinstance(periodic, bool) else tuple(periodic or (False,) * len(counts))
        mesh = disc.StructuredMesh(counts, (0.0,) * len(counts), (1.0,) * len(counts), per)
        m = 1
    return disc.build_space(mesh, int(cfg.get("k", 1)), m)


def _samples(domain, spec, seed):
    spec = spec or {}
    kind = spec.get("kind", "random")
    count = spec.get("count", 10)
    if kind == "grid":
        return domain.grid(count)
    if not np.isscalar(count):
        raise ConfigError("random sampling takes a single count")
    return domain.sample(int(count), np.random.default_rng(spec.get("seed", seed)))


def _profile(spec):
    kind = spec["type"]
    amp = float(spec.get("amplitude", 1.0))
    if kind == "gaussian":
        c, w = float(spec.get("center", 0.5)), float(spec.get("width", 0.05))
        return lambda x: amp * np.exp(-0.5 * ((np.asarray(x)[..., 0] - c) / w) ** 2)
    freq = float(spec.get("frequency", 1.0))
    return lambda x: amp * np.sin(2 * np.pi * freq * np.asarray(x)[..., 0])


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

@dataclass
class Outputs:
    """Single writer for all run files; every write is atomic."""

    root: Path
    files: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root.mkdir(parents=True, exist_ok=True)

    def write(self, name, data):
        raw = data.encode("utf-8") if isinstance(data, str) else data
        path = self.root / name
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
        self.files[name] = hashlib.sha256(raw).hexdigest()
        return path

    def json(self, name, obj):
        return self.write(name, red.report_json(obj))

    def stage(self, name, start):
        self.timings[name] = round(time.perf_counter() - start, 6)

    def manifest(self, command, cfg, seed, wall):
        doc = {"artifact_version": __version__, "command": command, "config_sha256": config_hash(cfg),
               "seed": seed, "wall_clock_s": round(wall, 6), "timings_s": self.timings,
               "outputs": dict(sorted(self.files.items()))}
        self.write("manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return doc


def _previous_hashes(root):
    path = root / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8")).get("outputs", {})


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def _spd(matrix):
    try:
        cholesky(matrix.toarray())
        return True
    except NotPositiveDefiniteError:
        return False


def cmd_validate(cfg, out, args):
    system = _system(cfg)
    t0 = time.perf_counter()
    report = validate_friedrichs(system, seed=args.seed, mu_random=8)
    out.stage("friedrichs", t0)
    doc = {"system": system_to_json(system), "friedrichs": report.to_dict()}
    passed = report.passed
    if not any(f.startswith("FS2") for f in report.failures):
        t0 = time.perf_counter()
        cells = cfg.get("mesh", {}).get("cells", DEFAULT_CELLS)
        coarse = min(cells, CHECK_MESH_MAX) if np.isscalar(cells) else [min(c, CHECK_MESH_MAX) for c in cells]
        space = _space(cfg, system, coarse)
        grams, admissibility = [], []
        for mu in _samples(system.params, {"count": 3}, args.seed):
            ap = disc.assemble(system, space, mu)
            ok = {"mass": _spd(ap.mass), "graph": _spd(ap.gram), "adjoint_graph": _spd(ap.adjoint_gram)}
            grams.append({"mu": mu.tolist(), **ok})
            adm = analysis.m_admissibility_check(system, space, mu)
            admissibility.append({"mu": mu.tolist(), **adm.to_dict()})
            passed &= all(ok.values()) and adm.passed
        doc["grams"] = grams
        doc["admissibility"] = admissibility
        out.stage("discrete", t0)
    doc["passed"] = bool(passed)
    out.json("validation.json", doc)
    print(f"{system.id}: {'passed' if passed else 'FAILED'}")
    for f in report.failures:
        print(f"  {f}")
    if not passed:
        raise ValidationFailure(f"{system.id} failed validation")


def cmd_classify(cfg, out, args):
    system = _system(cfg)
    t0 = time.perf_counter()
    cls = classify_system(system, seed=args.seed)
    out.stage("classify", t0)
    doc = cls.to_dict()
    if not cls.solve_supported:
        doc["note"] = "solve_supported=false: classification only, no solves are run"
    out.json("classification.json", doc)
    print(f"{cls.system}: {cls.verdict}")
    for r in cls.reasons:
        print(f"  [{'x' if r['passed'] else ' '}] {r['criterion']}: {r['detail']}")


def _require_solvable(system):
    if not system.solve_supported:
        raise ValidationFailure(f"{system.id} is marked solve_supported=false")


def cmd_solve(cfg, out, args):
    system = _system(cfg)
    _require_solvable(system)
    space = _space(cfg, system)
    mu = np.asarray(cfg.get("mu", 0.5 * (np.array(system.params.lo) + np.array(system.params.hi))), dtype=float)
    t0 = time.perf_counter()
    b, f = disc.assemble_system(system, space, mu)
    out.stage("assemble", t0)
    t0 = time.perf_counter()
    u, res = red.solve(system, space, mu)
    out.stage("solve", t0)
    out.write("solution.csv", red.rows_to_csv(["dof", "value"], [[i, float(v)] for i, v in enumerate(u)]))
    out.json("solve.json", {"system": system.id, "mu": mu.tolist(), "ndof": space.ndof,
                            "relative_residual": res})
    if args.debug_matrices:
        for name, mat in (("B.mtx", b), ("F.mtx", f[:, None])):
            disc.export_matrix_market(out.root / name, mat, f"{system.id} mu={mu.tolist()}")
            out.files[name] = hashlib.sha256((out.root / name).read_bytes()).hexdigest()
    print(f"{system.id}: ndof={space.ndof} residual={res:.3e}")


def _sweep(cfg, args, system, space, out):
    mus = _samples(system.params, cfg.get("sampling"), args.seed)
    t0 = time.perf_counter()
    g_ref = cfg.get("reduction", {}).get("g_ref", "auto")
    snaps = red.sweep(system, space, mus, threads=args.threads, g_ref=g_ref)
    out.stage("sweep", t0)
    return snaps


def cmd_sweep(cfg, out, args):
    system = _system(cfg)
    _require_solvable(system)
    space = _space(cfg, system)
    snaps = _sweep(cfg, args, system, space, out)
    ref = np.sqrt(np.einsum("ij,ij->j", snaps.vectors, snaps.g_ref @ snaps.vectors))
    header = ["index"] + list(system.params.names) + ["residual", "norm_ref"]
    rows = [[j] + [float(v) for v in mu] + [float(snaps.residuals[j]), float(ref[j])]
            for j, mu in enumerate(snaps.mus)]
    out.write("sweep.csv", red.rows_to_csv(header, rows))
    buf = _npz_bytes(mus=snaps.mus, snapshots=snaps.vectors)
    out.write("snapshots.npz", buf)
    print(f"{system.id}: {snaps.count} snapshots, max residual {snaps.residuals.max():.3e}")


def _npz_bytes(**arrays):
    import io
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def cmd_nwidth(cfg, out, args):
    system = _system(cfg)
    _require_solvable(system)
    space = _space(cfg, system)
    rcfg = cfg.get("reduction", {})
    snaps = _sweep(cfg, args, system, space, out)
    n_max = min(int(rcfg.get("n_max", 20)), snaps.count)
    q_b = red.q_b_of(system)
    n_values = list(range(1, n_max + 1))
    t0 = time.perf_counter()
    pod_rep = red.nwidth_estimate(snaps, n_values, q_b, "pod")
    out.stage("pod", t0)
    t0 = time.perf_counter()
    greedy = red.strong_greedy(snaps, n_max, float(rcfg.get("tol", 0.0)))
    out.stage("greedy", t0)
    traj = greedy.errors
    g_err = [float(traj[min(n, len(traj) - 1)]) for n in n_values]
    sel = [snaps.mus[greedy.selected[n - 1]] if n <= len(greedy.selected) else None for n in n_values]
    out.write("nwidth.csv", red.trajectory_csv(n_values, {"pod_err": pod_rep.errors, "greedy_err": g_err}, sel))
    a, b, r2, pts, flags = red.fit_decay(n_values, g_err, q_b)
    cls = classify_system(system, seed=args.seed)
    doc = {"system": system.id, "snapshots": snaps.count, "ndof": space.ndof,
           "classification": cls.verdict, "pod": pod_rep.to_dict(),
           "greedy": {"e_N": g_err, "alpha": red._json_float(a), "beta": red._json_float(b), "Q_b": q_b,
                      "r_squared": red._json_float(r2), "fit_points": pts, "flags": flags,
                      "stop_reason": greedy.stop_reason}}
    if cls.verdict != "exponential-certified":
        doc["note"] = "uncertified system: exponential decay is not guaranteed; the rates are measured only"
    out.json("nwidth.json", doc)
    print(f"{system.id} [{cls.verdict}]: e_{n_max} pod={pod_rep.errors[-1]:.3e} greedy={g_err[-1]:.3e}")


def _sectional_setup(cfg, args, out):
    """Target values, training set, norms and space for the sectional command."""
    tcfg = cfg.get("target", {"kind": "solution"})
    scfg = cfg.get("sectional", {})
    t0 = time.perf_counter()
    if tcfg["kind"] == "transport":
        domain = _domain(cfg)
        space = _space(cfg)
        speed = float(tcfg.get("speed", 1.0))
        transform = sec.ShiftTransform(space, lambda mu, s=speed: s * mu[0])
        target = sec.Section("transport", "transformed", profile=_profile(tcfg.get("profile", {"type": "gaussian"})),
                             transform=transform)
        mus = _samples(domain, cfg.get("sampling"), args.seed)
        values = target.evaluate(mus)
        grams = red.GramFamily.constant(disc.mass_matrix(space), len(mus))
        evaluator = target.evaluate
        independent = True
        system = None
    else:
        system = _system(cfg)
        _require_solvable(system)
        space = _space(cfg, system)
        snaps = _sweep(cfg, args, system, space, out)
        mus, values = snaps.mus, snaps.vectors
        independent = scfg.get("norm", "parameter") == "reference"
        grams = red.GramFamily.constant(snaps.g_ref, len(mus)) if independent else snaps.grams

        def evaluator(points):
            return red.sweep(system, space, points, threads=args.threads).vectors
    out.stage("target", t0)
    domain = _domain(cfg, system)
    return system, domain, space, mus, values, grams, evaluator, independent


def _dictionary(spec, space, domain, values, evaluator, seed):
    kind = spec["kind"]
    if kind == "constant":
        source = spec.get("source", "training")
        if source == "basis":
            return sec.constant_dictionary(space, "basis", id=spec["id"])
        if source == "training":
            gen = values
        else:
            gen = evaluator(_samples(domain, spec.get("sampling"), seed))
        if gen.shape[1] == 0:
            raise ConfigError(f"dictionary {spec['id']} is empty")
        return sec.constant_dictionary(space, gen, id=spec["id"])
    profiles = [_profile(p) for p in spec.get("profiles", [])]
    if not profiles:
        raise ConfigError(f"shift dictionary {spec['id']} has no profiles")
    speed = float(spec.get("speed", 1.0))
    return sec.shift_dictionary(space, profiles, lambda mu, s=speed: s * mu[0], id=spec["id"])


def cmd_sectional(cfg, out, args):
    if not cfg.get("dictionaries"):
        raise ConfigError("at least one dictionary is required")
    scfg = cfg.get("sectional", {})
    system, domain, space, mus, values, grams, evaluator, independent = _sectional_setup(cfg, args, out)
    dicts = [_dictionary(d, space, domain, values, evaluator, args.seed) for d in cfg["dictionaries"]]
    n_max = int(scfg.get("n_max", 10))
    q_b = red.q_b_of(system) if system is not None else 1
    rows, reports = [], []
    t0 = time.perf_counter()
    for d in dicts:
        rep = sec.sectional_greedy(values, d, mus, grams, min(n_max, len(d)), float(scfg.get("tol", 0.0)),
                                   mode=scfg.get("mode", "greedy"), rule=scfg.get("rule", "minmax"), q_b=q_b)
        reports.append(rep)
        for n, e in zip(rep.n_values, rep.errors):
            chosen = " ".join(d.names[k] for k in rep.selected[n - 1]) if n > 0 else ""
            rows.append([d.id, n, float(e), chosen])
    out.stage("sectional", t0)
    doc = {"training_size": len(mus), "ndof": space.ndof, "norm_parameter_independent": independent,
           "dictionaries": [r.to_dict() for r in reports]}
    if independent and any(spec["kind"] == "constant" and spec.get("source", "training") == "training"
                           for spec in cfg["dictionaries"]):
        t0 = time.perf_counter()
        delta, n_cmp = identity_check(values, space, mus, grams, n_max)
        doc["identity_check"] = {"max_delta": delta, "N": n_cmp, "passed": bool(delta <= 1e-10)}
        rows.append(["identity-check", n_cmp, float(delta), ""])
        out.stage("identity_check", t0)
    out.write("sectional.csv", red.rows_to_csv(["dictionary", "N", "e_N", "selected"], rows))
    out.json("sectional.json", doc)
    for r in reports:
        print(f"{r.dictionary}: " + " ".join(f"{e:.3e}" for e in r.errors))


def identity_check(values, space, mus, grams, n_max):
    """Strong greedy versus the constant-dictionary sectional search.

    Returns the largest trajectory difference and the compared length.
    """
    snaps = red.SnapshotSet(np.atleast_2d(mus), values, grams, grams.matrix(0), np.zeros(values.shape[1]))
    n = min(n_max, values.shape[1])
    g = red.strong_greedy(snaps, n)
    s = sec.sectional_greedy(values, sec.constant_dictionary(space, values), mus, grams, n, rule="worst")
    m = min(len(g.errors), len(s.errors))
    return float(np.max(np.abs(np.asarray(g.errors[:m]) - np.asarray(s.errors[:m])))), m - 1


def _read_csv(path):
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg, out, args):
    rows = []
    nwidth = out.root / "nwidth.csv"
    sectional = out.root / "sectional.csv"
    if nwidth.exists():
        for r in _read_csv(nwidth):
            rows.append(["pod", int(r["N"]), float(r["pod_err"])])
            rows.append(["greedy", int(r["N"]), float(r["greedy_err"])])
    if sectional.exists():
        for r in _read_csv(sectional):
            if r["dictionary"] != "identity-check":
                rows.append([f"sectional:{r['dictionary']}", int(r["N"]), float(r["e_N"])])
    if not rows:
        raise ConfigError(f"no nwidth.csv or sectional.csv in {out.root}; run those commands first")
    out.write("plot.csv", red.rows_to_csv(["series", "N", "error"], rows))
    series = sorted({r[0] for r in rows})
    plots = ", ".join(
        f"'plot.csv' using (strcol(1) eq '{s}' ? $2 : NaN):3 with linespoints title '{s}'" for s in series)
    script = ("set datafile separator ','\nset key autotitle columnhead\nset logscale y\n"
              "set xlabel 'N'\nset ylabel 'relative error'\nset format y '%.0e'\n"
              f"plot {plots}\n")
    out.write("plot.gp", script)
    print(f"{len(series)} series written to {out.root / 'plot.csv'}")


HANDLERS = {"validate": cmd_validate, "classify": cmd_classify, "solve": cmd_solve, "sweep": cmd_sweep,
            "nwidth": cmd_nwidth, "sectional": cmd_sectional, "report": cmd_report}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="fsmor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", help="output directory (default: config 'output' or ./out)")
        p.add_argument("--seed", type=int, help="seed overriding the config")
        p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores")
        p.add_argument("--check", action="store_true",
                       help="verify that outputs reproduce the hashes of the previous manifest")
        p.add_argument("--debug-matrices", action="store_true", help="dump Matrix Market files (solve)")
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        root = Path(args.out or cfg.get("output", "out"))
        previous = _previous_hashes(root) if args.check else None
        out = Outputs(root)
        start = time.perf_counter()
        HANDLERS[args.command](cfg, out, args)
        out.manifest(args.command, cfg, args.seed, time.perf_counter() - start)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationFailure, StructureError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, SingularMatrixError, NotPositiveDefiniteError, EvaluationError,
            red.SweepError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.check:
        if previous is None:
            print(f"check: no previous manifest in {root}", file=sys.stderr)
            return EXIT_VALIDATION
        bad = [n for n, h in out.files.items() if n in previous and previous[n] != h and n != "manifest.json"]
        if bad:
            print(f"check: outputs differ from the previous run: {', '.join(sorted(bad))}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"check: {len(out.files)} outputs reproduce the previous manifest")
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
