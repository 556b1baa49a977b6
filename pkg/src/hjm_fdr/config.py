"""Run configuration for the command-line front end.

A config file uses the sectioned ``key = value`` grammar of
:mod:`hjm_fdr.sections` with the blocks below.  Every key has a default
and :func:`serialize_config` always writes all of them, so a serialized
config is a complete record of a run.  Unknown sections or keys are errors.

``[grid]``
    ``x_max``, ``n_points``, ``weight_alpha``, ``weight_kind``.
``[model]``
    ``family`` (``svensson``, ``constant`` or ``custom``), ``name``,
    ``alpha`` and ``z0`` (svensson), ``scales``, ``decays`` and
    ``base_level`` (constant).  A ``custom`` model is described by the
    model-file blocks ``[functional.k]``, ``[phi.j]``, ``[region]``,
    ``[basis.k]`` and ``[base_point]`` in the same file.
``[analysis]``
    ``max_depth``, ``tolerance``, ``n_test_points``, ``seed``.
``[simulate]``
    ``T``, ``dt`` (``auto`` means the grid spacing), ``n_paths``, ``seed``,
    ``policy`` (``stop`` or ``truncate``).
``[verify]``
    ``tolerance``, ``n_paths``, ``seed``.
``[output]``
    ``directory`` (empty means ``$HJMFDR_OUTPUT_DIR`` or ``./hjm_fdr_output``),
    ``formats`` (subset of ``json, csv``).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .curve_space import ForwardCurve, MaturityGrid
from .errors import ConfigError, DomainError
from .model_file import ModelSpec, is_model_section, model_sections, spec_from_sections
from .sections import (
    Section,
    fmt_float,
    fmt_floats,
    format_sections,
    parse_sections,
    to_float,
    to_floats,
    to_int,
)

OUTPUT_ENV = "HJMFDR_OUTPUT_DIR"
DEFAULT_OUTPUT = "hjm_fdr_output"
FAMILIES = ("svensson", "constant", "custom")
POLICIES = ("stop", "truncate")
FORMATS = ("json", "csv")
CONFIG_VERSION = 1


@dataclass(frozen=True)
class GridBlock:
    x_max: float = 20.0
    n_points: int = 256
    weight_alpha: float = 4.0
    weight_kind: str = "polynomial"


@dataclass(frozen=True)
class ModelBlock:
    family: str = "svensson"
    name: str = "svensson"
    alpha: float = 1.3
    z0: tuple = (0.05, -0.02, 0.01, 0.02)
    scales: tuple = (0.01,)
    decays: tuple = (1.0,)
    base_level: float = 0.03
    spec: ModelSpec | None = None


@dataclass(frozen=True)
class AnalysisBlock:
    max_depth: int = 4
    tolerance: float = 1e-6
    n_test_points: int = 10
    seed: int = 0


@dataclass(frozen=True)
class SimulateBlock:
    T: float = 1.0
    dt: float | None = None
    n_paths: int = 4
    seed: int = 0
    policy: str = "stop"


@dataclass(frozen=True)
class VerifyBlock:
    tolerance: float = 1e-6
    n_paths: int = 1
    seed: int = 0


@dataclass(frozen=True)
class OutputBlock:
    directory: str = ""
    formats: tuple = FORMATS


@dataclass(frozen=True)
class RunConfig:
    grid: GridBlock = field(default_factory=GridBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    analysis: AnalysisBlock = field(default_factory=AnalysisBlock)
    simulate: SimulateBlock = field(default_factory=SimulateBlock)
    verify: VerifyBlock = field(default_factory=VerifyBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def make_grid(self) -> MaturityGrid:
        g = self.grid
        try:
            return MaturityGrid(g.x_max, g.n_points, g.weight_alpha, g.weight_kind)
        except DomainError as exc:
            raise ConfigError(f"[grid] {exc}", key="grid") from exc

    def output_dir(self) -> Path:
        d = self.output.directory or os.environ.get(OUTPUT_ENV, "") or DEFAULT_OUTPUT
        return Path(d)

    def sim_dt(self) -> float:
        return self.make_grid().spacing if self.simulate.dt is None else self.simulate.dt


_KEYS = {
    "grid": ("x_max", "n_points", "weight_alpha", "weight_kind"),
    "model": ("family", "name", "alpha", "z0", "scales", "decays", "base_level"),
    "analysis": ("max_depth", "tolerance", "n_test_points", "seed"),
    "simulate": ("T", "dt", "n_paths", "seed", "policy"),
    "verify": ("tolerance", "n_paths", "seed"),
    "output": ("directory", "formats"),
}


def _positive(x, key):
    if not x > 0:
        raise ConfigError(f"{key} must be > 0, got {x}", key=key)
    return x


def _nonneg_int(x, key):
    if x < 0:
        raise ConfigError(f"{key} must be >= 0, got {x}", key=key)
    return x


def _block(sec: Section | None, name: str) -> dict:
    if sec is None:
        return {}
    sec.check_keys(set(_KEYS[name]))
    return dict(sec.entries)


def _grid(v: dict) -> GridBlock:
    d = GridBlock()
    kind = v.get("weight_kind", d.weight_kind)
    if kind not in ("polynomial", "exponential"):
        raise ConfigError(f"grid.weight_kind must be polynomial or exponential, got {kind!r}", key="grid.weight_kind")
    return GridBlock(
        _positive(to_float(v.get("x_max", fmt_float(d.x_max)), "grid.x_max"), "grid.x_max"),
        to_int(v.get("n_points", str(d.n_points)), "grid.n_points"),
        to_float(v.get("weight_alpha", fmt_float(d.weight_alpha)), "grid.weight_alpha"),
        kind,
    )


def _model(v: dict, spec: ModelSpec | None) -> ModelBlock:
    d = ModelBlock()
    family = v.get("family", d.family)
    if family not in FAMILIES:
        raise ConfigError(f"model.family must be one of {FAMILIES}, got {family!r}", key="model.family")
    if family == "custom" and spec is None:
        raise ConfigError("model.family = custom needs [functional.k] and [phi.j] blocks", key="model.family")
    if family != "custom" and spec is not None:
        raise ConfigError(f"model-file blocks are only allowed with model.family = custom, got {family!r}",
                          key="model.family")
    z0 = to_floats(v.get("z0", fmt_floats(d.z0)), "model.z0")
    if len(z0) != 4:
        raise ConfigError(f"model.z0 needs 4 entries, got {len(z0)}", key="model.z0")
    scales = to_floats(v.get("scales", fmt_floats(d.scales)), "model.scales")
    decays = to_floats(v.get("decays", fmt_floats(d.decays)), "model.decays")
    if len(scales) != len(decays) or not scales:
        raise ConfigError("model.scales and model.decays need the same nonzero length", key="model.decays")
    return ModelBlock(
        family,
        v.get("name", family if family != "custom" else spec.name),
        _positive(to_float(v.get("alpha", fmt_float(d.alpha)), "model.alpha"), "model.alpha"),
        z0,
        scales,
        decays,
        to_float(v.get("base_level", fmt_float(d.base_level)), "model.base_level"),
        spec,
    )


def _analysis(v: dict) -> AnalysisBlock:
    d = AnalysisBlock()
    depth = to_int(v.get("max_depth", str(d.max_depth)), "analysis.max_depth")
    if depth < 1:
        raise ConfigError(f"analysis.max_depth must be >= 1, got {depth}", key="analysis.max_depth")
    npts = to_int(v.get("n_test_points", str(d.n_test_points)), "analysis.n_test_points")
    if npts < 1:
        raise ConfigError(f"analysis.n_test_points must be >= 1, got {npts}", key="analysis.n_test_points")
    return AnalysisBlock(
        depth,
        _positive(to_float(v.get("tolerance", fmt_float(d.tolerance)), "analysis.tolerance"), "analysis.tolerance"),
        npts,
        _nonneg_int(to_int(v.get("seed", str(d.seed)), "analysis.seed"), "analysis.seed"),
    )


def _simulate(v: dict) -> SimulateBlock:
    d = SimulateBlock()
    raw_dt = v.get("dt", "auto")
    dt = None if raw_dt == "auto" else _positive(to_float(raw_dt, "simulate.dt"), "simulate.dt")
    policy = v.get("policy", d.policy)
    if policy not in POLICIES:
        raise ConfigError(f"simulate.policy must be one of {POLICIES}, got {policy!r}", key="simulate.policy")
    n_paths = to_int(v.get("n_paths", str(d.n_paths)), "simulate.n_paths")
    if n_paths < 1:
        raise ConfigError(f"simulate.n_paths must be >= 1, got {n_paths}", key="simulate.n_paths")
    return SimulateBlock(
        _positive(to_float(v.get("T", fmt_float(d.T)), "simulate.T"), "simulate.T"),
        dt,
        n_paths,
        _nonneg_int(to_int(v.get("seed", str(d.seed)), "simulate.seed"), "simulate.seed"),
        policy,
    )


def _verify(v: dict) -> VerifyBlock:
    d = VerifyBlock()
    n_paths = to_int(v.get("n_paths", str(d.n_paths)), "verify.n_paths")
    if n_paths < 1:
        raise ConfigError(f"verify.n_paths must be >= 1, got {n_paths}", key="verify.n_paths")
    return VerifyBlock(
        _positive(to_float(v.get("tolerance", fmt_float(d.tolerance)), "verify.tolerance"), "verify.tolerance"),
        n_paths,
        _nonneg_int(to_int(v.get("seed", str(d.seed)), "verify.seed"), "verify.seed"),
    )


def _output(v: dict) -> OutputBlock:
    raw = v.get("formats", ", ".join(FORMATS))
    formats = tuple(f.strip() for f in raw.split(",") if f.strip())
    bad = [f for f in formats if f not in FORMATS]
    if bad or not formats:
        raise ConfigError(f"output.formats must be a nonempty subset of {FORMATS}, got {raw!r}", key="output.formats")
    return OutputBlock(v.get("directory", ""), tuple(f for f in FORMATS if f in formats))


def config_from_sections(sections: list[Section]) -> RunConfig:
    blocks: dict[str, Section] = {}
    model_secs = []
    for s in sections:
        if s.name in _KEYS:
            if s.name in blocks:
                raise ConfigError(f"section [{s.name}] given twice", key=s.name)
            blocks[s.name] = s
        elif is_model_section(s.name):
            model_secs.append(s)
        else:
            raise ConfigError(f"unknown section [{s.name}]", key=s.name)
    spec = spec_from_sections(model_secs) if model_secs else None
    v = {k: _block(blocks.get(k), k) for k in _KEYS}
    return RunConfig(
        _grid(v["grid"]),
        _model(v["model"], spec),
        _analysis(v["analysis"]),
        _simulate(v["simulate"]),
        _verify(v["verify"]),
        _output(v["output"]),
    )


def parse_config(text: str) -> RunConfig:
    """Parse config text; missing keys take their defaults."""
    return config_from_sections(parse_sections(text))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", key="config") from exc
    return parse_config(text)


def _sections_of(cfg: RunConfig) -> list:
    g, m, a, s, v, o = cfg.grid, cfg.model, cfg.analysis, cfg.simulate, cfg.verify, cfg.output
    out = [
        ("grid", [("x_max", fmt_float(g.x_max)), ("n_points", str(g.n_points)),
                  ("weight_alpha", fmt_float(g.weight_alpha)), ("weight_kind", g.weight_kind)]),
        ("model", [("family", m.family), ("name", m.name), ("alpha", fmt_float(m.alpha)), ("z0", fmt_floats(m.z0)),
                   ("scales", fmt_floats(m.scales)), ("decays", fmt_floats(m.decays)),
                   ("base_level", fmt_float(m.base_level))]),
        ("analysis", [("max_depth", str(a.max_depth)), ("tolerance", fmt_float(a.tolerance)),
                      ("n_test_points", str(a.n_test_points)), ("seed", str(a.seed))]),
        ("simulate", [("T", fmt_float(s.T)), ("dt", "auto" if s.dt is None else fmt_float(s.dt)),
                      ("n_paths", str(s.n_paths)), ("seed", str(s.seed)), ("policy", s.policy)]),
        ("verify", [("tolerance", fmt_float(v.tolerance)), ("n_paths", str(v.n_paths)), ("seed", str(v.seed))]),
        ("output", [("directory", o.directory), ("formats", ", ".join(o.formats))]),
    ]
    if m.spec is not None:
        out += [sec for sec in model_sections(m.spec) if sec[0] != "model"]
    return out


def serialize_config(cfg: RunConfig) -> str:
    """Complete config text with every default written out."""
    return format_sections(_sections_of(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; the key must already exist in the serialized config."""
    sections = [Section(name, list(entries)) for name, entries in _sections_of(cfg)]
    by_name = {s.name: s for s in sections}
    for item in overrides or ():
        lhs, sep, value = item.partition("=")
        sec_name, dot, key = lhs.strip().rpartition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}", key=lhs.strip())
        if sec_name not in by_name:
            if sec_name in _KEYS:
                sec = Section(sec_name, [])
                sections.append(sec)
                by_name[sec_name] = sec
            else:
                raise ConfigError(f"override names unknown section [{sec_name}]", key=lhs.strip())
        sec = by_name[sec_name]
        hits = [i for i, (k, _) in enumerate(sec.entries) if k == key]
        if len(hits) > 1:
            raise ConfigError(f"cannot override repeated key {lhs.strip()!r}", key=lhs.strip())
        if hits:
            sec.entries[hits[0]] = (key, value.strip())
        else:
            sec.entries.append((key, value.strip()))
    return config_from_sections(sections)


def with_family(cfg: RunConfig, family: str) -> RunConfig:
    if cfg.model.family == family:
        return cfg
    return replace(cfg, model=replace(cfg.model, family=family, name=family, spec=None))


def base_point_of(cfg: RunConfig, grid: MaturityGrid) -> ForwardCurve:
    return ForwardCurve.constant(grid, cfg.model.base_level)
