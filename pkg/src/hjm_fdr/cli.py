"""Command-line front end.

Usage::

    hjm-fdr COMMAND [--config FILE] [--set section.key=value ...] [--output DIR]

Commands: ``analyze``, ``construct``, ``simulate``, ``verify``,
``demo-svensson``.  Without ``--config`` the bundled Svensson config is
used.  Artifacts go to ``DIR/COMMAND/`` where ``DIR`` is ``--output``, else
``output.directory`` from the config, else ``$HJMFDR_OUTPUT_DIR``, else
``./hjm_fdr_output``.

Exit codes: 0 success, 2 configuration error, 3 region or structure error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import (
    RunConfig,
    apply_overrides,
    base_point_of,
    config_hash,
    load_config,
    parse_config,
    serialize_config,
    with_family,
)
from .curve_space import ForwardCurve, MaturityGrid
from .errors import (
    ConfigError,
    ConstructionError,
    DomainError,
    GridMismatchError,
    HjmError,
    PreconditionError,
    RegionError,
    SolverError,
    StructureError,
)
from .fdr import (
    ClosedGaussianFlow,
    SpanFamily,
    construct_realization,
    gaussian_realization,
    make_chart,
    svensson_bracket_oracle,
    svensson_model,
    tangency_check,
)
from .hjm_core import HjmModel, constant_volatility_model, sigma
from .lie_calculus import generate_dla, sample_test_points
from .sim import (
    NoiseRecord,
    SpdePath,
    SvenssonZDynamics,
    compare_realization,
    invariance_residuals,
    simulate_hjm_spde,
)

SCHEMA_VERSION = 1
COMMANDS = ("analyze", "construct", "simulate", "verify", "demo-svensson")
EXIT_OK, EXIT_CONFIG, EXIT_STRUCTURE, EXIT_NUMERICAL = 0, 2, 3, 4


def bundled_config_text() -> str:
    return resources.files("hjm_fdr").joinpath("data/svensson.cfg").read_text()


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DomainError)):
        return EXIT_CONFIG
    if isinstance(exc, (RegionError, StructureError, PreconditionError, ConstructionError, GridMismatchError)):
        return EXIT_STRUCTURE
    if isinstance(exc, SolverError):
        return EXIT_NUMERICAL
    return EXIT_NUMERICAL


# -- model assembly ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """A model with its starting curve and, when known, the family it should stay on."""

    model: HjmModel
    h0: ForwardCurve
    target: object | None
    chart: object | None
    z_dynamics: SvenssonZDynamics | None


def build_bundle(cfg: RunConfig) -> ModelBundle:
    grid = cfg.make_grid()
    m = cfg.model
    if m.family == "svensson":
        model, chart, basis = svensson_model(m.alpha, grid, m.z0)
        return ModelBundle(model, model.base_point, SpanFamily(basis), chart, SvenssonZDynamics(m.alpha, m.z0))
    if m.family == "constant":
        model = constant_volatility_model(grid, m.scales, m.decays, name=m.name)
        h0 = base_point_of(cfg, grid)
        model = replace(model, base_point=h0)
        lambdas = [c / float(np.max(np.abs(c.values))) for c in sigma(model, h0) if c.sup_norm() > 0]
        chart = make_chart(h0, ClosedGaussianFlow(model, h0), lambdas, cfg.simulate.T) if lambdas else None
        return ModelBundle(model, h0, chart, chart, None)
    model = m.spec.build(grid)
    if model.base_point is None:
        raise ConfigError("custom model needs a [base_point] block", key="base_point")
    target = SpanFamily(list(model.basis)) if model.basis else None
    return ModelBundle(model, model.base_point, target, None, None)


# -- artifact writing ----------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN to null, infinities to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


class Artifacts:
    """Writes JSON and CSV files that carry the resolved config and its hash."""

    def __init__(self, cfg: RunConfig, directory: Path):
        self.cfg = cfg
        self.text = serialize_config(cfg)
        self.hash = config_hash(cfg)
        self.dir = Path(directory)
        self.written: list[Path] = []

    def _path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.written.append(p)
        return p

    def json(self, name: str, kind: str, payload: dict) -> None:
        if "json" not in self.cfg.output.formats:
            return
        doc = {
            "schema_version": SCHEMA_VERSION,
            "artifact": kind,
            "package_version": __version__,
            "config": self.text,
            "config_sha256": self.hash,
            "result": payload,
        }
        self._path(name).write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header: Sequence[str], rows) -> None:
        if "csv" not in self.cfg.output.formats:
            return
        with self._path(name).open("w", newline="") as fh:
            fh.write(f"# schema_version = {SCHEMA_VERSION}\n")
            fh.write(f"# config_sha256 = {self.hash}\n")
            for line in self.text.rstrip("\n").splitlines():
                fh.write(f"# | {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def curve_rows(times: np.ndarray, grid: MaturityGrid, values: np.ndarray, last: int | None = None):
    """``t, x, value`` rows up to time index ``last`` (inclusive)."""
    n = len(times) if last is None else last + 1
    for k in range(n):
        t = float(times[k])
        for x, v in zip(grid.nodes, values[k]):
            yield (t, float(x), float(v))


def read_curve_path(path, grid: MaturityGrid) -> SpdePath:
    """Inverse of the ``t,x,value`` writer (comment lines skipped)."""
    try:
        with open(path) as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    except OSError as exc:
        raise ConfigError(f"cannot read path file {path}: {exc}", key="path") from exc
    if not rows or rows[0] != ["t", "x", "value"]:
        raise ConfigError(f"{path}: expected header 't,x,value'", key="path")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}", key="path") from exc
    if data.size == 0 or data.shape[0] % grid.n_points:
        raise ConfigError(f"{path}: row count is not a multiple of n_points = {grid.n_points}", key="path")
    data = data.reshape(-1, grid.n_points, 3)
    if not np.allclose(data[:, :, 1], grid.nodes[None, :], rtol=0, atol=1e-9 * grid.x_max):
        raise ConfigError(f"{path}: maturities do not match the configured grid", key="grid")
    times = data[:, 0, 0]
    return SpdePath(times, data[None, :, :, 2], grid, np.array([np.nan]), np.zeros(1, dtype=np.int64))


# -- commands ---------------------------------------------------------------------------------------

def cmd_analyze(cfg: RunConfig, art: Artifacts, bundle: ModelBundle | None = None) -> dict:
    b = bundle or build_bundle(cfg)
    a = cfg.analysis
    rep = generate_dla(b.model, b.h0, a.max_depth, a.tolerance, a.n_test_points, a.seed)
    payload = {"model": b.model.name, "d": b.model.d, "q": b.model.q, "report": rep.to_dict()}
    if cfg.model.family == "svensson":
        off_span = rep.test_points[1:] or sample_test_points(b.model, b.h0, 2, a.seed)[1:]
        payload["bracket_coefficient"] = svensson_bracket_oracle(b.model, off_span, cfg.model.alpha)
    art.json("analysis.json", "lie-algebra-report", payload)
    flag = "stabilized" if rep.stabilized else "not stabilized"
    print(f"analyze: k_D = {rep.k_D} ({flag}, depth {rep.depth_reached}), ranks per point {rep.rank_per_point}")
    return {"report": rep}


def cmd_construct(cfg: RunConfig, art: Artifacts, bundle: ModelBundle | None = None) -> dict:
    b = bundle or build_bundle(cfg)
    a = cfg.analysis
    rep = generate_dla(b.model, b.h0, a.max_depth, a.tolerance, a.n_test_points, a.seed)
    real = gaussian_realization(b.model, rep) if b.model.is_constant else construct_realization(b.model, rep)
    art.json("realization.json", "affine-realization", {"model": b.model.name, "k_D": rep.k_D,
                                                        "realization": real.to_dict()})
    grid = b.model.grid
    for name, curves in (("lambda.csv", real.lambdas), ("delta.csv", real.deltas)):
        head = ["x"] + [f"{name[:-4]}_{k + 1}" for k in range(real.d)]
        art.csv(name, head, ([float(x)] + [float(c.values[i]) for c in curves] for i, x in enumerate(grid.nodes)))
    print(f"construct: realization of dimension {real.d + 1} (d = {real.d}), gamma = {np.asarray(real.gamma).tolist()}")
    return {"report": rep, "realization": real}


def _simulate(b: ModelBundle, cfg: RunConfig, n_paths: int, seed: int):
    dt = cfg.sim_dt()
    from_steps = NoiseRecord.generate(seed, dt, _steps(cfg.simulate.T, dt), n_paths, b.model.d)
    path = simulate_hjm_spde(b.model, b.h0, cfg.simulate.T, dt, from_steps, cfg.simulate.policy)
    return path, from_steps


def _steps(T: float, dt: float) -> int:
    r = T / dt
    n = int(round(r))
    if n < 1 or abs(r - n) > 1e-9 * max(1.0, r):
        raise ConfigError(f"simulate.T = {T} is not a multiple of dt = {dt}", key="simulate.T")
    return n


def _last_valid(path: SpdePath, p: int) -> int:
    return path.valid_steps(p) - 1


def cmd_simulate(cfg: RunConfig, art: Artifacts, bundle: ModelBundle | None = None) -> dict:
    b = bundle or build_bundle(cfg)
    s = cfg.simulate
    path, noise = _simulate(b, cfg, s.n_paths, s.seed)
    grid = b.model.grid
    payload = {
        "model": b.model.name,
        "T": s.T,
        "dt": noise.dt,
        "n_paths": s.n_paths,
        "seed": s.seed,
        "rng": "numpy Philox4x64, key = seed + 2**64 * path",
        "policy": s.policy,
        "exited_region_at": [None if np.isnan(t) else float(t) for t in path.exited_region_at],
        "clip_counts": path.clip_counts.tolist(),
        "times": path.times.tolist(),
    }
    for p in range(s.n_paths):
        art.csv(f"spde_path_{p}.csv", ["t", "x", "value"], curve_rows(path.times, grid, path.values[p], _last_valid(path, p)))
    if b.target is not None:
        payload["invariance_residuals"] = invariance_residuals(path, b.target).tolist()
    if b.z_dynamics is not None:
        z = b.z_dynamics.simulate(s.T, noise.dt, noise)
        real = b.z_dynamics.realize(z, grid)
        payload["z_clip_counts"] = z.clip_counts.tolist()
        for p in range(s.n_paths):
            art.csv(f"z_path_{p}.csv", ["t", "z1", "z2", "z3", "z4"],
                    ([float(t)] + [float(v) for v in z.states[p, k]] for k, t in enumerate(z.times)))
            art.csv(f"realized_path_{p}.csv", ["t", "x", "value"], curve_rows(real.times, grid, real.values[p]))
    art.json("simulate_report.json", "simulation-report", payload)
    exits = int(np.sum(~np.isnan(path.exited_region_at)))
    print(f"simulate: {s.n_paths} paths, {len(path.times) - 1} steps of dt = {noise.dt:.6g}, region exits {exits}")
    return {"path": path, "payload": payload}


def _tangency_points(b: ModelBundle, T: float) -> list[ForwardCurve]:
    pts = [b.h0]
    if b.chart is not None:
        for u in (0.5 * T, T):
            h = b.chart.flow.at(u)
            if b.model.in_region(h):
                pts.append(h)
    return pts


def cmd_verify(cfg: RunConfig, art: Artifacts, bundle: ModelBundle | None = None, paths: Sequence = ()) -> dict:
    b = bundle or build_bundle(cfg)
    v = cfg.verify
    if b.target is None:
        raise ConfigError("verify needs a target family: use a svensson or constant model, or give [basis.k] blocks",
                          key="basis")
    payload: dict = {"model": b.model.name, "tolerance": v.tolerance}
    tang = []
    for h in _tangency_points(b, cfg.simulate.T):
        r = tangency_check(b.model, b.target, h, v.tolerance)
        tang.append({"residuals": r.residuals, "consistent": r.consistent, "distance": r.distance})
    payload["tangency"] = tang
    ok = all(t["consistent"] for t in tang)
    inv = []
    if paths:
        for f in paths:
            res = invariance_residuals(read_curve_path(f, b.model.grid), b.target)[0]
            inv.append({"source": Path(f).name, "residuals": res.tolist(), "sup": float(np.nanmax(res))})
    else:
        path, _ = _simulate(b, cfg, v.n_paths, v.seed)
        res = invariance_residuals(path, b.target)
        for p in range(v.n_paths):
            finite = res[p][np.isfinite(res[p])]
            inv.append({"source": f"spde path {p}", "residuals": res[p].tolist(),
                        "sup": float(finite.max()) if finite.size else None})
    payload["invariance"] = inv
    if b.z_dynamics is not None and b.chart is not None and not paths:
        comp = compare_realization(b.model, b.chart, b.z_dynamics, cfg.simulate.T, cfg.sim_dt(), v.seed, v.n_paths,
                                   cfg.simulate.policy)
        payload["comparison"] = {k: comp[k] for k in ("refinement_ratio", "refinement_ratio_weighted", "initial_gap")}
        payload["comparison"]["levels"] = [
            {k: lvl[k] for k in ("n_points", "dt", "sup_gap", "gap", "sup_gap_weighted", "exited_region_at")}
            for lvl in comp["levels"]
        ]
    payload["tangency_consistent"] = ok
    art.json("verify_report.json", "verification-report", payload)
    sups = [i["sup"] for i in inv if i["sup"] is not None]
    print(f"verify: tangency {'ok' if ok else 'FAILED'}, max invariance residual {max(sups) if sups else float('nan'):.3e}")
    if "comparison" in payload:
        c = payload["comparison"]
        print(f"verify: realization gap (sup norm) {c['levels'][0]['sup_gap']:.3e} -> {c['levels'][1]['sup_gap']:.3e} "
              f"(ratio {c['refinement_ratio']:.3f})")
    return {"payload": payload}


def cmd_demo(cfg: RunConfig, art: Artifacts) -> dict:
    cfg = with_family(cfg, "svensson")
    art.cfg, art.text, art.hash = cfg, serialize_config(cfg), config_hash(cfg)
    b = build_bundle(cfg)
    out = {}
    out.update(cmd_analyze(cfg, art, b))
    out.update(cmd_construct(cfg, art, b))
    out.update(cmd_simulate(cfg, art, b))
    out.update(cmd_verify(cfg, art, b))
    return out


# -- entry points ------------------------------------------------------------------------------

def resolve_config(config_path=None, overrides: Sequence[str] = ()) -> RunConfig:
    cfg = load_config(config_path) if config_path else parse_config(bundled_config_text())
    return apply_overrides(cfg, overrides)


def run(command: str, config_path=None, overrides: Sequence[str] = (), output=None, paths: Sequence = ()) -> int:
    """Run one command; returns the process exit code."""
    try:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}", key="command")
        cfg = resolve_config(config_path, overrides)
        base = Path(output) if output else cfg.output_dir()
        art = Artifacts(cfg, base / command)
        if command == "analyze":
            cmd_analyze(cfg, art)
        elif command == "construct":
            cmd_construct(cfg, art)
        elif command == "simulate":
            cmd_simulate(cfg, art)
        elif command == "verify":
            cmd_verify(cfg, art, paths=paths)
        else:
            cmd_demo(cfg, art)
        for p in art.written:
            print(f"wrote {p}")
        return EXIT_OK
    except HjmError as exc:
        key = getattr(exc, "key", None)
        where = f" [{key}]" if key else ""
        print(f"hjm-fdr {command}: {type(exc).__name__}{where}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"hjm-fdr {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hjm-fdr", description="Finite-dimensional realizations of HJM models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analyze": "Lie algebra rank report",
        "construct": "affine realization (Lambda, Delta, gamma)",
        "simulate": "SPDE and realized factor paths",
        "verify": "tangency, invariance and realization-gap report",
        "demo-svensson": "all of the above for the Svensson model",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="config file (default: bundled Svensson config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--output", help="output directory (overrides config and $HJMFDR_OUTPUT_DIR)")
        if name == "verify":
            p.add_argument("--path", dest="paths", action="append", default=[],
                           help="t,x,value curve path CSV to check instead of simulating (repeatable)")
    sub.add_parser("print-config", help="print the resolved config").add_argument("--config")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "print-config":
        try:
            sys.stdout.write(serialize_config(resolve_config(args.config)))
        except HjmError as exc:
            print(f"hjm-fdr print-config: {exc}", file=sys.stderr)
            return exit_code_for(exc)
        return EXIT_OK
    return run(args.command, args.config, args.overrides, args.output, getattr(args, "paths", ()))


if __name__ == "__main__":
    sys.exit(main())
