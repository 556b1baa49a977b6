"""Text format for HJM model specifications.

Example::

    [model]
    name = svensson

    [functional.1]
    kind = dual-basis
    nodes = 0.5, 1.0, 2.0, 3.0, 5.0
    weights = ...

    [phi.1]
    # coefficient expression in y1..yq, poly degree, decay
    term = sqrt(1.3*y1), 0, 1.3

    [region]
    lower = 0.0

    [basis.1]
    term = 1.0, 0, 0.0

    [base_point]
    term = 0.05, 0, 0.0

``phi.j`` is the sum of its terms ``coeff(y) x^k e^{-lam x}``; ``basis.k``
and ``base_point`` are exponential-polynomial curves with numeric
coefficients.  ``lower`` lists one bound per functional, ``none`` for an
unbounded coordinate.  Sections are numbered from 1 without gaps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .closed_form import ExpPoly
from .curve_space import FUNCTIONAL_KINDS, ForwardCurve, LinearFunctional, MaturityGrid, format_terms, parse_terms
from .errors import ConfigError, StructureError
from .hjm_core import HjmModel, PhiTerm, StateRegion, parse_coefficient
from .sections import Section, fmt_float, fmt_floats, format_sections, parse_sections, to_float, to_floats, to_int

MODEL_SECTIONS = ("model", "functional", "phi", "region", "basis", "base_point")
_NUMBERED = re.compile(r"^(functional|phi|basis)\.(\d+)$")


@dataclass(frozen=True)
class ModelSpec:
    """Parsed model file; ``phi[j]`` holds ``(coeff_text, degree, decay)`` triples."""

    functionals: tuple
    phi: tuple
    region: tuple
    basis: tuple = ()
    base_point: tuple | None = None
    name: str = "model"

    @property
    def q(self) -> int:
        return len(self.functionals)

    def build(self, grid: MaturityGrid) -> HjmModel:
        """Instantiate on ``grid``."""
        phi = []
        for j, terms in enumerate(self.phi):
            fam = []
            for coeff, k, lam in terms:
                try:
                    parse_coefficient(coeff, self.q)
                except ValueError as exc:
                    raise ConfigError(str(exc), key=f"phi.{j + 1}.term") from exc
                form = ExpPoly.from_terms([(1.0, k, lam)])
                fam.append(PhiTerm(coeff, ForwardCurve.from_form(grid, form)))
            phi.append(tuple(fam))
        basis = tuple(ForwardCurve.from_form(grid, ExpPoly.from_terms(t)) for t in self.basis)
        h0 = None if self.base_point is None else ForwardCurve.from_form(grid, ExpPoly.from_terms(self.base_point))
        functionals = tuple(LinearFunctional(n, w, kind) for kind, n, w in self.functionals)
        return HjmModel(grid, functionals, tuple(phi), StateRegion(self.region), basis, h0, "custom", self.name)


def _numbered(sections: list[Section], prefix: str) -> list[Section]:
    found = {}
    for s in sections:
        m = _NUMBERED.match(s.name)
        if m and m.group(1) == prefix:
            k = int(m.group(2))
            if k in found:
                raise ConfigError(f"section [{s.name}] given twice", key=s.name)
            found[k] = s
    if sorted(found) != list(range(1, len(found) + 1)):
        raise ConfigError(f"[{prefix}.k] sections must be numbered 1..n without gaps, got {sorted(found)}", key=prefix)
    return [found[k] for k in sorted(found)]


def _phi_term(value: str, key: str) -> tuple:
    parts = value.rsplit(",", 2)
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected 'coeff_expr, poly_degree, decay', got {value!r}", key=key)
    coeff = parts[0].strip()
    if not coeff:
        raise ConfigError(f"{key}: empty coefficient", key=key)
    return (coeff, to_int(parts[1].strip(), key), to_float(parts[2].strip(), key))


def _exp_terms(section: Section) -> tuple:
    section.check_keys({"term"}, repeatable={"term"})
    form = parse_terms(f"term = {v}" for v in section.get_all("term"))
    return tuple(form.terms)


def is_model_section(name: str) -> bool:
    return name in ("model", "region", "base_point") or bool(_NUMBERED.match(name))


def spec_from_sections(sections: list[Section]) -> ModelSpec:
    """Build a :class:`ModelSpec` from already split sections (all must be model sections)."""
    for s in sections:
        if not is_model_section(s.name):
            raise ConfigError(f"unknown section [{s.name}]", key=s.name)
    by_name = {}
    for s in sections:
        if not _NUMBERED.match(s.name):
            if s.name in by_name:
                raise ConfigError(f"section [{s.name}] given twice", key=s.name)
            by_name[s.name] = s
    name = "model"
    if "model" in by_name:
        by_name["model"].check_keys({"name"})
        name = by_name["model"].get("name", "model")
    functionals = []
    for s in _numbered(sections, "functional"):
        s.check_keys({"kind", "nodes", "weights"})
        kind = s.get("kind", "point-evaluation")
        if kind not in FUNCTIONAL_KINDS:
            raise ConfigError(f"[{s.name}] kind must be one of {FUNCTIONAL_KINDS}, got {kind!r}", key=f"{s.name}.kind")
        nodes = to_floats(s.get("nodes", ""), f"{s.name}.nodes")
        weights = to_floats(s.get("weights", ""), f"{s.name}.weights")
        if not nodes or len(nodes) != len(weights):
            raise ConfigError(f"[{s.name}] needs matching nonempty nodes and weights", key=f"{s.name}.weights")
        if any(x < 0 for x in nodes):
            raise ConfigError(f"[{s.name}] nodes must be >= 0", key=f"{s.name}.nodes")
        functionals.append((kind, nodes, weights))
    if not functionals:
        raise ConfigError("model needs at least one [functional.k] section", key="functional")
    phi = []
    for s in _numbered(sections, "phi"):
        s.check_keys({"term"}, repeatable={"term"})
        terms = tuple(_phi_term(v, f"{s.name}.term") for v in s.get_all("term"))
        if not terms:
            raise ConfigError(f"[{s.name}] needs at least one term", key=f"{s.name}.term")
        phi.append(terms)
    if not phi:
        raise ConfigError("model needs at least one [phi.j] section", key="phi")
    region = (None,) * len(functionals)
    if "region" in by_name:
        r = by_name["region"]
        r.check_keys({"lower"})
        raw = [v.strip() for v in r.get("lower", "").split(",")]
        if len(raw) != len(functionals):
            raise ConfigError(f"[region] lower needs {len(functionals)} entries, got {len(raw)}", key="region.lower")
        region = tuple(None if v.lower() == "none" else to_float(v, "region.lower") for v in raw)
    basis = tuple(_exp_terms(s) for s in _numbered(sections, "basis"))
    base = _exp_terms(by_name["base_point"]) if "base_point" in by_name else None
    return ModelSpec(tuple(functionals), tuple(phi), region, basis, base, name)


def parse_model(text: str) -> ModelSpec:
    return spec_from_sections(parse_sections(text))


def model_sections(spec: ModelSpec) -> list:
    out = [("model", [("name", spec.name)])]
    for i, (kind, nodes, weights) in enumerate(spec.functionals, 1):
        out.append((f"functional.{i}", [("kind", kind), ("nodes", fmt_floats(nodes)), ("weights", fmt_floats(weights))]))
    for j, terms in enumerate(spec.phi, 1):
        out.append((f"phi.{j}", [("term", f"{c}, {k}, {fmt_float(lam)}") for c, k, lam in terms]))
    out.append(("region", [("lower", ", ".join("none" if b is None else fmt_float(b) for b in spec.region))]))
    for i, terms in enumerate(spec.basis, 1):
        out.append((f"basis.{i}", _term_entries(terms)))
    if spec.base_point is not None:
        out.append(("base_point", _term_entries(spec.base_point)))
    return out


def _term_entries(terms) -> list:
    return [("term", line.partition("=")[2].strip()) for line in format_terms(ExpPoly.from_terms(terms))]


def serialize_model(spec: ModelSpec) -> str:
    return format_sections(model_sections(spec))


def spec_from_model(model: HjmModel) -> ModelSpec:
    """Describe a built model; every curve must carry an exponential-polynomial descriptor."""

    def terms_of(c: ForwardCurve, what: str) -> tuple:
        if not isinstance(c.closed_form, ExpPoly):
            raise StructureError(f"{what} has no exponential-polynomial descriptor")
        return tuple(c.closed_form.terms)

    phi = []
    for j, fam in enumerate(model.phi):
        terms = []
        for t in fam:
            for c, k, lam in terms_of(t.curve, f"phi {j + 1}"):
                coeff = t.coeff if c == 1.0 else f"{c!r}*({t.coeff})"
                terms.append((coeff, k, lam))
        phi.append(tuple(terms))
    functionals = tuple((f.kind, f.nodes, f.weights) for f in model.functionals)
    basis = tuple(terms_of(b, "basis curve") for b in model.basis)
    base = None if model.base_point is None else terms_of(model.base_point, "base point")
    return ModelSpec(functionals, tuple(phi), tuple(model.region.lower), basis, base, model.name)
