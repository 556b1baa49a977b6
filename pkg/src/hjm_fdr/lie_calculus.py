"""Lie brackets of HJM vector fields and the rank of the generated distribution.

Brackets follow ``[X, Y](h) = DX(h) Y(h) - DY(h) X(h)``.  Ranks are numerical:
curves are mapped to ``R^{n+1}`` by :func:`hjm_fdr.curve_space.embed` and the
rank is the number of singular values above ``tolerance * s_max``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curve_space import ForwardCurve, combine, embedding_matrix, project
from .errors import DomainError, RegionError
from .hjm_core import (
    HjmModel,
    VectorField,
    directional_derivative,
    mu_field,
    sigma,
    sigma_field,
    stratonovich_drift,
)

DEFAULT_TOLERANCE = 1e-6
DEFAULT_POINTS = 10
DEFAULT_DEPTH = 4

VectorFieldHandle = VectorField


def lie_bracket(X: VectorField, Y: VectorField, h: ForwardCurve, method: str = "auto") -> ForwardCurve:
    """``DX(h) Y(h) - DY(h) X(h)``."""
    return directional_derivative(X, h, Y(h), method) - directional_derivative(Y, h, X(h), method)


def bracket_field(X: VectorField, Y: VectorField) -> VectorField:
    """The field ``h -> [X, Y](h)`` labelled by its bracket word."""
    return VectorField(f"[{X.label},{Y.label}]", lambda h: lie_bracket(X, Y, h), None, X.depth + Y.depth)


def scaled_field(X: VectorField, c: float) -> VectorField:
    jac = None if X.jacobian is None else (lambda h, v: c * X.jacobian(h, v))
    return VectorField(f"{c!r}*{X.label}", lambda h: c * X(h), jac, X.depth)


def numerical_rank(vectors: Sequence[ForwardCurve], tolerance: float = DEFAULT_TOLERANCE, exact: bool | None = None):
    """Rank of ``span(vectors)`` in the embedded inner product.

    Returns
    -------
    rank : int
        Number of singular values ``>= tolerance * s_max`` (0 for all-zero input).
    singular_values : ndarray
        All singular values, descending.
    """
    if len(vectors) == 0:
        raise DomainError("numerical_rank needs at least one vector")
    M = embedding_matrix(vectors, exact)
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0 or not np.isfinite(s[0]):
        return 0, s
    return int(np.sum(s >= tolerance * s[0])), s


@dataclass
class LieAlgebraReport:
    """Result of :func:`generate_dla`.

    ``singular_values[p]`` is the spectrum of the retained fields at test
    point ``p``; ``candidate_singular_values[p]`` the spectrum of every field
    evaluated at that point (retained and rejected), used to measure the gap.
    """

    test_points: list
    fields: list
    singular_values: list
    rank_per_point: list
    k_D: int | None
    tolerance_used: float
    stabilized: bool
    depth_reached: int
    rank_by_depth: list
    candidate_labels: list = field(default_factory=list)
    candidate_singular_values: list = field(default_factory=list)
    values: list = field(default_factory=list, repr=False)

    @property
    def non_constant(self) -> bool:
        return self.k_D is None

    @property
    def labels(self) -> list:
        return [f.label for f in self.fields]

    def spectral_gap(self) -> float:
        """Smallest ratio ``s_k / s_{k+1}`` over points, where ``k`` is the rank there.

        Infinite when no rejected direction carries a nonzero singular value.
        """
        gaps = []
        for s, k in zip(self.candidate_singular_values, self.rank_per_point):
            if k == 0 or k >= len(s):
                continue
            gaps.append(np.inf if s[k] == 0 else s[k - 1] / s[k])
        return float(min(gaps)) if gaps else float("inf")

    def to_dict(self) -> dict:
        return {
            "k_D": self.k_D,
            "non_constant_rank": self.non_constant,
            "stabilized": self.stabilized,
            "depth_reached": self.depth_reached,
            "rank_by_depth": self.rank_by_depth,
            "tolerance_used": self.tolerance_used,
            "fields": self.labels,
            "rank_per_point": self.rank_per_point,
            "singular_values": [[float(v) for v in s] for s in self.singular_values],
            "candidate_fields": self.candidate_labels,
            "candidate_singular_values": [[float(v) for v in s] for s in self.candidate_singular_values],
            "spectral_gap": self.spectral_gap(),
            "test_points_h0": [float(p.values[0]) for p in self.test_points],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)


def generators(model: HjmModel) -> list[VectorField]:
    """``[mu, sigma^1, ..., sigma^d]``."""
    return [mu_field(model)] + [sigma_field(model, j) for j in range(model.d)]


def sample_test_points(model: HjmModel, h0: ForwardCurve, k: int = DEFAULT_POINTS, seed: int = 0,
                       scale: float = 0.1, max_tries: int = 1000) -> list[ForwardCurve]:
    """``h0`` plus ``k - 1`` random perturbations inside the region.

    Perturbations are random combinations of ``model.basis`` rescaled to
    ``scale * |h0|_inf`` in sup norm; samples outside the region are redrawn.
    """
    if not model.in_region(h0):
        model.region.check(model.ell(h0))
    pts = [h0]
    if k <= 1:
        return pts
    basis = list(model.basis) or [ForwardCurve.constant(model.grid)]
    rng = np.random.Generator(np.random.Philox(seed))
    size = scale * max(h0.sup_norm(), 1e-12)
    tries = 0
    while len(pts) < k:
        tries += 1
        if tries > max_tries:
            raise RegionError(f"could not sample {k} test points inside the region after {max_tries} draws")
        p = combine(basis, rng.standard_normal(len(basis)))
        n = p.sup_norm()
        if n == 0:
            continue
        cand = h0 + (size / n) * p
        if model.in_region(cand):
            pts.append(cand)
    return pts


def generate_dla(
    model: HjmModel,
    h0: ForwardCurve | None = None,
    max_depth: int = DEFAULT_DEPTH,
    tolerance: float = DEFAULT_TOLERANCE,
    n_points: int = DEFAULT_POINTS,
    seed: int = 0,
    test_points: Sequence[ForwardCurve] | None = None,
) -> LieAlgebraReport:
    """Breadth-first generation of the Lie algebra distribution of ``{mu, sigma^j}``.

    Words are left-normed, ``[X_i, W]`` with ``X_i`` a generator and ``W`` a
    word of the previous level.  A field is retained when its values raise
    the numerical rank at some test point.  Generation stops when a whole
    level adds no rank (``stabilized=True``) or at ``max_depth``.
    """
    if max_depth < 1:
        raise DomainError("max_depth must be >= 1")
    if test_points is None:
        if h0 is None:
            h0 = model.base_point
        if h0 is None:
            raise DomainError("generate_dla needs h0, model.base_point or explicit test points")
        test_points = sample_test_points(model, h0, n_points, seed)
    points = list(test_points)
    for p in points:
        model.region.check(model.ell(p))

    gens = generators(model)
    retained: list[VectorField] = []
    retained_vals: list[list[ForwardCurve]] = [[] for _ in points]
    cand_labels: list[str] = []
    cand_vals: list[list[ForwardCurve]] = [[] for _ in points]
    ranks = [0] * len(points)
    rank_by_depth = []

    def consider(f: VectorField) -> bool:
        vals = [f(p) for p in points]
        cand_labels.append(f.label)
        for i, v in enumerate(vals):
            cand_vals[i].append(v)
        raised = False
        new_ranks = []
        for i, v in enumerate(vals):
            r, _ = numerical_rank(retained_vals[i] + [v], tolerance)
            new_ranks.append(r)
            raised |= r > ranks[i]
        if raised:
            retained.append(f)
            for i, v in enumerate(vals):
                retained_vals[i].append(v)
                ranks[i] = new_ranks[i]
        return raised

    level = [(g.label,) for g in gens]
    fields_by_word = {(g.label,): g for g in gens}
    for g in gens:
        consider(g)
    rank_by_depth.append(max(ranks))
    stabilized = False
    depth = 1
    while depth < max_depth:
        depth += 1
        seen = set()
        nxt = []
        added = False
        for g in gens:
            for w in level:
                word = (g.label,) + w
                if len(word) == 2:
                    if word[0] == word[1]:
                        continue
                    key = frozenset(word)
                    if key in seen:
                        continue
                    seen.add(key)
                f = bracket_field(g, fields_by_word[w])
                fields_by_word[word] = f
                nxt.append(word)
                added |= consider(f)
        rank_by_depth.append(max(ranks))
        level = nxt
        if not added:
            stabilized = True
            break

    svals = []
    for i in range(len(points)):
        _, s = numerical_rank(retained_vals[i], tolerance) if retained_vals[i] else (0, np.zeros(0))
        svals.append(s)
    cand_s = [numerical_rank(v, tolerance)[1] for v in cand_vals]
    k_D = ranks[0] if all(r == ranks[0] for r in ranks) else None
    return LieAlgebraReport(
        test_points=points,
        fields=retained,
        singular_values=svals,
        rank_per_point=list(ranks),
        k_D=k_D,
        tolerance_used=tolerance,
        stabilized=stabilized,
        depth_reached=depth,
        rank_by_depth=rank_by_depth,
        candidate_labels=cand_labels,
        candidate_singular_values=cand_s,
        values=retained_vals,
    )


def drift_in_span_test(model: HjmModel, h: ForwardCurve, tolerance: float = DEFAULT_TOLERANCE, drift=None):
    """Is ``mu(h)`` in ``span{sigma^j(h)}``?

    ``drift`` overrides the tested drift field (e.g. the Ito drift).
    Returns ``(in_span, relative_residual)``; an empty or zero span gives
    residual 1 unless the drift itself vanishes.
    """
    target = stratonovich_drift(model, h) if drift is None else drift(h)
    sig = [s for s in sigma(model, h) if s.sup_norm() > 0]
    _, _, rel = project(target, sig)
    return bool(rel < tolerance), float(rel)
