"""Command-line driver: ``canonflow {flow,verify,heat,spectrum,gauge-check}``.

Configuration is a JSON file validated against ``config.schema.json``;
``--seed``, ``--out`` and ``--override KEY=VALUE`` (dotted keys, JSON values)
take precedence over the file.  Exit codes: 0 success, 1 configuration or
check failure, 2 flow termination on a non-admissible family.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from . import __version__
from .dynamics import (FlowConfig, FlowStepError, Triple, minimize_subspace, run_flow,
                       smooth_family, soliton_residual, step_T01)
from .geometry import (BundleConfig, GeometryError, LatticeGrid, MetricField, apply_gauge,
                       build_reference_connection, random_antihermitian_corr, random_unitary_gauge)
from .io import write_csv, write_field, write_json
from .sections import (AdmissibilityError, RankDeficiencyError, energies, fourier_family,
                       orthonormalize, random_family)
from .spectral import (CutoffError, assemble_laplacian, entropy_curvature, lowest_eigenpairs,
                       residuals)
from .suites import SuiteContext, run_suite

DEFAULTS: Dict = {
    "seed": 0,
    "geometry": {"m": 1, "n": 16, "k": 1, "N": 4, "twist": []},
    "init": {"family": "random", "modes": [], "kmax": 1, "connection": "reference",
             "amplitude": 1.0},
    "flow": {"kind": "T01", "max_iters": 200, "abs_tol": 1e-12, "rel_tol": 1e-10, "eps": 1e-3,
             "q_list": [], "monitors": True, "soliton": False},
    "heat": {"t_list": [0.02, 0.01, 0.005], "cutoff": None, "truncation_tol": 1e-12},
    "spectrum": {"kind": "dbar", "count": 8, "save_sections": False},
    "verify": {"instances": 5, "inject": None},
    "output": {"dir": "out"},
}

HEAT_COLUMNS = ("t", "rel_error", "max_abs_error", "ratio_to_previous", "cutoff", "tail")
SPECTRUM_COLUMNS = ("index", "eigenvalue", "residual")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_schema() -> Dict:
    return json.loads(resources.files("canonflow").joinpath("config.schema.json").read_text())


def _merge(base: Dict, extra: Dict) -> Dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def apply_override(cfg: Dict, item: str) -> Dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must have the form KEY=VALUE")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-table value")
    node[parts[-1]] = value
    return cfg


def load_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None,
                overrides: Sequence[str] = ()) -> Dict:
    """File (or run manifest) < flags; validated, unknown keys rejected."""
    user: Dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if isinstance(user, dict) and "manifest_version" in user:
            user = user["config"]
    for item in overrides:
        apply_override(user, item)
    if seed is not None:
        user["seed"] = seed
    if out is not None:
        user.setdefault("output", {})["dir"] = out
    try:
        jsonschema.validate(user, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, user)
    _check_preconditions(cfg)
    return cfg


def _check_preconditions(cfg: Dict):
    g = cfg["geometry"]
    dim = 2 * g["m"]
    for entry in g["twist"]:
        mu, nu, _ = entry
        if not (0 <= mu < dim and 0 <= nu < dim) or mu == nu:
            raise ConfigError(f"twist entry {entry} needs distinct directions in 0..{dim - 1}")
    if cfg["init"]["family"] == "fourier":
        modes = cfg["init"]["modes"]
        if len(modes) != g["N"]:
            raise ConfigError(f"fourier init needs N={g['N']} modes, got {len(modes)}")
        for q in modes:
            if len(q) != dim:
                raise ConfigError(f"mode {q} must have {dim} components")
    if g["N"] < g["k"] and cfg["init"]["family"] != "fourier":
        raise ConfigError(f"N={g['N']} < k={g['k']}: no admissible family exists")


def config_hash(cfg: Dict) -> str:
    """Hash of the scientific content (the output location is excluded)."""
    content = {key: v for key, v in cfg.items() if key != "output"}
    blob = json.dumps(content, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _q_list(raw) -> tuple:
    return tuple(float("inf") if str(q).lower() in ("inf", "infinity") else float(q) for q in raw)


# ---------------------------------------------------------------------------
# building objects from a config
# ---------------------------------------------------------------------------


def build_geometry(cfg: Dict):
    g = cfg["geometry"]
    grid = LatticeGrid(g["m"], g["n"])
    bundle = BundleConfig.from_pairs(g["m"], g["k"], g["N"], [tuple(t) for t in g["twist"]])
    return grid, bundle


def build_triple(cfg: Dict, seed: int) -> Triple:
    grid, bundle = build_geometry(cfg)
    init = cfg["init"]
    rng = np.random.default_rng(seed)
    k, N = bundle.k, bundle.N
    h = MetricField.identity(grid, k)
    A = build_reference_connection(grid, bundle)
    if init["connection"] == "random":
        A = A.with_corr(random_antihermitian_corr(grid, k, rng, amplitude=init["amplitude"]))
    kind = init["family"]
    if kind == "random":
        H = random_family(grid, k, N, rng, kmax=init["kmax"])
    elif kind == "smooth":
        H = smooth_family(h, A, N, rng, seed=seed)
    elif kind == "fourier":
        H = orthonormalize(fourier_family(grid, init["modes"], k))
    else:
        H = minimize_subspace(h, A, N, "dbar", seed=seed)
    return Triple(h, H, A)


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: Dict, command: str, files: List[Path], extra=None) -> Path:
    manifest = {
        "manifest_version": 1,
        "command": command,
        "canonflow_version": __version__,
        "build": _git_describe(),
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "tolerances": {key: cfg["flow"][key] for key in ("abs_tol", "rel_tol")},
        "files": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    return write_json(out / "manifest.json", manifest)


def _threads() -> int:
    raw = os.environ.get("CANONFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _limit_blas(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return None
    return threadpool_limits(limits=threads)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _flow_config(cfg: Dict, seed: int) -> FlowConfig:
    f = cfg["flow"]
    return FlowConfig(kind=f["kind"], max_iters=f["max_iters"], abs_tol=f["abs_tol"],
                      rel_tol=f["rel_tol"], eps=f["eps"], seed=seed, q_list=_q_list(f["q_list"]),
                      monitors=f["monitors"], soliton=f["soliton"], config_hash=config_hash(cfg))


def _run_one_seed(cfg: Dict, seed: int, out: Path):
    """Run one seeded flow into ``out``; returns (status, message, files)."""
    out.mkdir(parents=True, exist_ok=True)
    triple = build_triple(cfg, seed)
    try:
        trace = run_flow(triple, _flow_config(cfg, seed))
        status, message = (2, "flow terminated: re-selected family is not admissible") \
            if trace.terminated else (0, f"{len(trace.rows)} iterations, converged={trace.converged}")
    except FlowStepError as exc:
        trace, status, message = None, 2, f"flow terminated: {exc}"
    files = []
    if trace is not None:
        files.append(write_csv(out / "trace.csv", trace.columns(), trace.rows))
        files.append(write_json(out / "timing.json", {"seconds_per_iteration": trace.timings}))
    return status, message, files


def cmd_flow(cfg: Dict) -> int:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.get("seeds") or [cfg["seed"]]
    workers = min(_threads(), len(seeds))
    if len(seeds) == 1:
        results = [_run_one_seed(cfg, seeds[0], out)]
    elif workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_one_seed, cfg, s, out / f"seed_{s}") for s in seeds]
            results = [f.result() for f in futs]
    else:
        results = [_run_one_seed(cfg, s, out / f"seed_{s}") for s in seeds]
    files = [p for r in results for p in r[2]]
    write_manifest(out, cfg, "flow", files,
                   {"seeds": seeds, "status": {str(s): r[0] for s, r in zip(seeds, results)}})
    for s, (status, msg, _) in zip(seeds, results):
        print(f"seed {s}: {msg}")
    return max(r[0] for r in results)


def cmd_verify(cfg: Dict, suite: str) -> int:
    g = cfg["geometry"]
    ctx = SuiteContext(m=g["m"], n=g["n"], k=g["k"], N=g["N"],
                       twist=tuple(tuple(t) for t in g["twist"]),
                       instances=cfg["verify"]["instances"], seed=cfg["seed"],
                       inject=cfg["verify"]["inject"])
    checks = run_suite(suite, ctx)
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    lines = [c.line() for c in checks]
    report = out / f"verify_{suite}.txt"
    report.write_text("\n".join(lines) + "\n")
    write_manifest(out, cfg, f"verify {suite}", [report])
    print("\n".join(lines))
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"suite {suite} FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _exact_curvature(grid: LatticeGrid, bundle: BundleConfig) -> np.ndarray:
    """Constant curvature -2 pi i c / k of the reference connection."""
    F = np.zeros((grid.dim, grid.dim) + grid.shape + (bundle.k, bundle.k), dtype=complex)
    eye = np.eye(bundle.k)
    for mu in range(grid.dim):
        for nu in range(grid.dim):
            F[mu, nu] = -2j * np.pi * bundle.twist[mu, nu] / bundle.k * eye
    return F


def cmd_heat(cfg: Dict) -> int:
    grid, bundle = build_geometry(cfg)
    heat = cfg["heat"]
    h = MetricField.identity(grid, bundle.k)
    A = build_reference_connection(grid, bundle)
    op = assemble_laplacian(A, h, "d")
    spec = lowest_eigenpairs(op, heat["cutoff"], seed=cfg["seed"])
    F = _exact_curvature(grid, bundle)
    scale = max(1.0, float(np.max(np.abs(F))))
    rows, prev = [], None
    for t in heat["t_list"]:
        hc = entropy_curvature(spec, A, h, t, truncation_tol=heat["truncation_tol"])
        err = float(np.max(np.abs(hc.rhs - F)))
        rel = err / scale
        rows.append({"t": t, "rel_error": rel, "max_abs_error": err,
                     "ratio_to_previous": None if prev is None else prev / rel,
                     "cutoff": spec.count, "tail": float(np.exp(-t * spec.lambda_max))})
        prev = rel
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    files = [write_csv(out / "heat.csv", HEAT_COLUMNS, rows)]
    write_manifest(out, cfg, "heat", files)
    for r in rows:
        print(f"t={r['t']:g} rel_error={r['rel_error']:.6e}")
    return 0


def cmd_spectrum(cfg: Dict) -> int:
    grid, bundle = build_geometry(cfg)
    sp = cfg["spectrum"]
    h = MetricField.identity(grid, bundle.k)
    A = build_reference_connection(grid, bundle)
    op = assemble_laplacian(A, h, sp["kind"])
    spec = lowest_eigenpairs(op, min(sp["count"], op.dim), seed=cfg["seed"])
    res = residuals(op, spec)
    rows = [{"index": i, "eigenvalue": float(lam), "residual": float(r)}
            for i, (lam, r) in enumerate(zip(spec.eigenvalues, res))]
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    files = [write_csv(out / "spectrum.csv", SPECTRUM_COLUMNS, rows)]
    if sp["save_sections"]:
        files.append(write_field(out / "eigensections.cfld", spec.sections(), m=grid.m, n=grid.n,
                                 k=bundle.k, twist=bundle.twist, role="eigensections",
                                 provenance={"seed": cfg["seed"], "op": f"spectrum:{sp['kind']}"}))
        files.append(out / "eigensections.cfld.json")
    write_manifest(out, cfg, "spectrum", files)
    for r in rows:
        print(f"{r['index']:4d} {r['eigenvalue']:.12g}")
    return 0


def cmd_gauge_check(cfg: Dict) -> int:
    """Gauge invariance of Phi^{0,1}, equivariance of one T^{0,1} step, planted soliton."""
    seed = cfg["seed"]
    triple = build_triple(cfg, seed)
    grid = triple.grid
    rng = np.random.default_rng(seed + 7919)
    g = random_unitary_gauge(grid, triple.A.k, rng)
    h2, E2, A2 = apply_gauge(triple.h, triple.H.values, triple.A, g)
    moved = Triple(h2, triple.H.with_values(E2), A2)
    p0 = energies(triple.h, triple.H, triple.A, split=False).Phi01
    p1 = energies(h2, moved.H, A2, split=False).Phi01
    out0, _ = step_T01(triple, seed, monitors=False)
    out1, _ = step_T01(moved, seed, monitors=False)
    _, _, A0g = apply_gauge(out0.h, None, out0.A, g)
    equiv = float(max(np.max(np.abs(A0g.corr - out1.A.corr)),
                      np.max(np.abs(A0g.links - out1.A.links))))
    sol = soliton_residual(triple, moved)
    # the planted gauge is recovered up to the (constant) stabilizer of the
    # starting connection (u = s g with s constant); align with the best
    # constant unitary first
    u = sol.gauge
    k = u.shape[-1]
    M = np.einsum("pij,plj->il", g.values.reshape(-1, k, k), np.conj(u.reshape(-1, k, k)))
    W_, _, Vh = np.linalg.svd(M)
    gauge_err = float(np.max(np.abs((W_ @ Vh) @ u - g.values)))
    rows = [
        {"check": "phi01_invariance", "value": abs(p0 - p1), "tol": 1e-10 * max(1.0, p0)},
        {"check": "T01_equivariance", "value": equiv, "tol": 1e-10},
        {"check": "soliton_planted_residual", "value": sol.value, "tol": 1e-8},
        {"check": "soliton_planted_gauge", "value": gauge_err, "tol": 1e-8},
    ]
    for r in rows:
        r["passed"] = r["value"] <= r["tol"]
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    files = [write_csv(out / "gauge_check.csv", ("check", "value", "tol", "passed"), rows)]
    write_manifest(out, cfg, "gauge-check", files)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']}: {r['value']:.3e} (tol {r['tol']:.1e})")
    return 0 if all(r["passed"] for r in rows) else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or a run manifest")
    common.add_argument("--seed", type=int, help="seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config key with a JSON value; repeatable")
    p = argparse.ArgumentParser(prog="canonflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"canonflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("flow", parents=[common], help="run T01 / T / T_eps flows")
    v = sub.add_parser("verify", parents=[common], help="run an invariant suite")
    v.add_argument("suite", help="geometry | grassmann | dynamics | spectral")
    v.add_argument("--inject", choices=["non_hermitian_metric"],
                   help="fault injection (sets verify.inject)")
    sub.add_parser("heat", parents=[common], help="heat-kernel curvature convergence study")
    sub.add_parser("spectrum", parents=[common], help="lowest Laplacian eigenvalues")
    sub.add_parser("gauge-check", parents=[common], help="gauge invariance and soliton checks")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.override)
    if getattr(args, "inject", None):
        overrides.append(f"verify.inject={json.dumps(args.inject)}")
    try:
        cfg = load_config(args.config, args.seed, args.out, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    limiter = _limit_blas(_threads())
    try:
        if args.command == "flow":
            return cmd_flow(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.suite)
        if args.command == "heat":
            return cmd_heat(cfg)
        if args.command == "spectrum":
            return cmd_spectrum(cfg)
        return cmd_gauge_check(cfg)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    except (RankDeficiencyError, CutoffError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AdmissibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
