"""Monte Carlo simulation of realized factor dynamics and of the full HJM equation.

Random numbers come from numpy's Philox-4x64 counter-based generator.  Path
``p`` of a run with seed ``s`` uses the 128-bit key ``s + 2**64 * p``, so
adding paths never changes existing ones.  Increments are drawn at the
finest step of a study and coarser records are obtained by summing
consecutive fine increments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .curve_space import ForwardCurve, MaturityGrid, embed, embed_values
from .errors import ConfigError, DomainError, PreconditionError
from .fdr import LeafChart, SpanFamily, leaf_parametrization, project_to_leaf, svensson_basis
from .hjm_core import ArrayKernel, HjmModel, splitting_scheme


def _n_steps(T: float, dt: float) -> int:
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    r = T / dt
    n = int(round(r))
    if n < 1 or abs(r - n) > 1e-9 * max(1.0, r):
        raise DomainError(f"dt = {dt} must divide T = {T}")
    return n


# -- noise ---------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseRecord:
    """Brownian increments ``dW`` of shape ``(n_paths, n_steps, d)`` for step ``dt``."""

    seed: int
    dt: float
    increments: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @classmethod
    def generate(cls, seed: int, dt: float, n_steps: int, n_paths: int = 1, d: int = 1) -> "NoiseRecord":
        """Draw ``sqrt(dt) * N(0, 1)`` increments from per-path Philox streams."""
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        inc = np.empty((n_paths, n_steps, d))
        sq = np.sqrt(dt)
        for p in range(n_paths):
            rng = np.random.Generator(np.random.Philox(key=seed + (p << 64)))
            inc[p] = rng.standard_normal((n_steps, d)) * sq
        inc.flags.writeable = False
        return cls(seed, float(dt), inc)

    @classmethod
    def zeros(cls, dt: float, n_steps: int, n_paths: int = 1, d: int = 1) -> "NoiseRecord":
        return cls(0, float(dt), np.zeros((n_paths, n_steps, d)))

    def coarsen(self, factor: int = 2) -> "NoiseRecord":
        """Record for step ``factor * dt``: each coarse increment is the sum of its fine ones."""
        if self.n_steps % factor:
            raise DomainError(f"{self.n_steps} steps cannot be grouped by {factor}")
        P, N, d = self.increments.shape
        inc = self.increments[:, 0::factor].copy()
        for k in range(1, factor):
            inc += self.increments[:, k::factor]
        inc.flags.writeable = False
        return NoiseRecord(self.seed, self.dt * factor, inc)


# -- paths ------------------------------------------------------------------------------------

@dataclass
class ZPath:
    """Factor paths; ``states`` has shape ``(n_paths, n_times, m)``."""

    times: np.ndarray
    states: np.ndarray
    clip_counts: np.ndarray

    @property
    def m(self) -> int:
        return self.states.shape[2]

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


@dataclass
class SpdePath:
    """Curve paths on one grid; ``values`` has shape ``(n_paths, n_times, n_points)``.

    ``exited_region_at[p]`` is the exit time of path ``p`` (NaN if none); rows
    at and after the exit are NaN.
    """

    times: np.ndarray
    values: np.ndarray
    grid: MaturityGrid
    exited_region_at: np.ndarray
    clip_counts: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def valid_steps(self, p: int = 0) -> int:
        """Number of time points before the exit of path ``p``."""
        t = self.exited_region_at[p]
        if np.isnan(t):
            return len(self.times)
        return int(np.searchsorted(self.times, t - 1e-12))

    def curves(self, p: int = 0) -> list[ForwardCurve]:
        return [ForwardCurve(self.grid, self.values[p, k]) for k in range(self.valid_steps(p))]


def simulate_z_svensson(z0, alpha: float, T: float, dt: float, noise: NoiseRecord) -> ZPath:
    """Factor dynamics of the Svensson realization.

    ``Z1`` is constant, ``Z3`` and ``Z4`` decay exactly (rates ``alpha`` and
    ``2 alpha``) and ``Z2`` follows Euler-Maruyama for
    ``dZ2 = (Z3 + Z4 - alpha Z2) dt + sqrt(alpha max(Z4, 0)) dW`` (full truncation).
    """
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (4,):
        raise DomainError("z0 must have 4 entries")
    if z0[3] < 0:
        raise DomainError(f"z0[3] must be >= 0, got {z0[3]}")
    n = _n_steps(T, dt)
    if noise.n_steps != n or abs(noise.dt - dt) > 1e-12 * dt:
        raise ConfigError(f"noise record has {noise.n_steps} steps of {noise.dt}, need {n} of {dt}", key="dt")
    P = noise.n_paths
    times = np.arange(n + 1) * dt
    Z = np.empty((P, n + 1, 4))
    Z[:, :, 0] = z0[0]
    Z[:, :, 2] = z0[2] * np.exp(-alpha * times)
    Z[:, :, 3] = z0[3] * np.exp(-2 * alpha * times)
    Z[:, 0, 1] = z0[1]
    clips = np.zeros(P, dtype=np.int64)
    z2 = np.full(P, z0[1])
    for k in range(n):
        z4 = Z[:, k, 3]
        clips += z4 < 0
        vol = np.sqrt(alpha * np.maximum(z4, 0.0))
        z2 = z2 + (Z[:, k, 2] + z4 - alpha * z2) * dt + vol * noise.increments[:, k, 0]
        Z[:, k + 1, 1] = z2
    return ZPath(times, Z, clips)


def realize_curve_path(z: ZPath, basis: Sequence[ForwardCurve]) -> SpdePath:
    """Curves ``sum_i Z^i_t g_i``."""
    if len(basis) != z.m:
        raise DomainError(f"need {z.m} basis curves, got {len(basis)}")
    grid = basis[0].grid
    B = np.stack([b.values for b in basis])
    vals = np.einsum("ptm,mn->ptn", z.states, B)
    return SpdePath(z.times, vals, grid, np.full(z.n_paths, np.nan), z.clip_counts.copy())


def simulate_hjm_spde(model: HjmModel, h0: ForwardCurve, T: float, dt: float, noise: NoiseRecord,
                      policy: str = "stop") -> SpdePath:
    """Grid-locked splitting for ``dr = (r' + alpha_HJM(r)) dt + sigma(r) dW`` with ``dt = dx``.

    Raises
    ------
    ConfigError
        If ``dt`` differs from the grid spacing or the noise record does not match.
    """
    grid = model.grid
    if abs(dt - grid.spacing) > 1e-12 * grid.spacing:
        raise ConfigError(f"SPDE step dt = {dt} must equal the grid spacing {grid.spacing}", key="dt")
    n = _n_steps(T, dt)
    if noise.n_steps != n or noise.d != model.d or abs(noise.dt - dt) > 1e-12 * dt:
        raise ConfigError(
            f"noise record ({noise.n_steps} steps of {noise.dt}, d={noise.d}) does not match {n} steps of {dt}, d={model.d}",
            key="dt",
        )
    v0 = np.broadcast_to(h0.values, (noise.n_paths, grid.n_points))
    res = splitting_scheme(ArrayKernel(model), v0, n, 1, dt, np.asarray(noise.increments), policy)
    times = np.arange(n + 1) * dt
    exit_t = np.where(res.exit_step >= 0, res.exit_step * dt, np.nan)
    return SpdePath(times, res.values, grid, exit_t, res.clip_counts)


# -- residuals and comparison ------------------------------------------------------------------

NORMS = ("sup", "weighted")


def _relative_norms(diff: np.ndarray, ref: np.ndarray, norm: str = "weighted") -> np.ndarray:
    """Row-wise ``|diff| / |ref|``: Euclidean on embedded rows or max-abs on samples."""
    if norm == "sup":
        dn, rn = np.max(np.abs(diff), axis=-1), np.max(np.abs(ref), axis=-1)
    else:
        dn, rn = np.linalg.norm(diff, axis=-1), np.linalg.norm(ref, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rn > 0, dn / rn, dn)


def _check_norm(norm: str) -> None:
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")


def invariance_residuals(path: SpdePath, target, norm: str = "sup") -> np.ndarray:
    """Relative distance of every ``r_t`` to ``target`` (a SpanFamily or LeafChart).

    The nearest member is found in the embedded (weighted) inner product.
    ``norm="sup"`` measures the remainder as ``max|r - p| / max|r|`` on the
    samples; ``norm="weighted"`` uses the embedded norm.

    Returns an array ``(n_paths, n_times)``; entries after a region exit are NaN.
    Span residuals use grid-difference embeddings on both sides.
    """
    _check_norm(norm)
    if isinstance(target, SpanFamily):
        B = np.column_stack([embed(c, exact=False) for c in target.curves])
        Q, R = np.linalg.qr(B)
        E = embed_values(path.values, path.grid)
        if norm == "weighted":
            proj = np.einsum("ptk,nk->ptn", E @ Q, Q)
            return _relative_norms(E - proj, E)
        coef = np.linalg.solve(R, np.einsum("ptk,kn->pnt", E, Q)).transpose(0, 2, 1)
        fitted = coef @ np.array([c.values for c in target.curves])
        return _relative_norms(path.values - fitted, path.values, "sup")
    if isinstance(target, LeafChart):
        out = np.full(path.values.shape[:2], np.nan)
        for p in range(path.n_paths):
            for k, c in enumerate(path.curves(p)):
                pr = project_to_leaf(c, target)
                if norm == "weighted":
                    n = float(np.linalg.norm(embed(c, exact=False)))
                    out[p, k] = pr.residual / n if n > 0 else pr.residual
                else:
                    member = leaf_parametrization(target, pr.u, pr.y)
                    out[p, k] = _relative_norms(c.values - member.values, c.values, "sup")
        return out
    raise TypeError(f"unsupported target {type(target).__name__}")


@dataclass
class SvenssonZDynamics:
    """Realized dynamics ``r_t = sum_i Z^i_t g_i`` of the Svensson model."""

    alpha: float
    z0: tuple

    def simulate(self, T: float, dt: float, noise: NoiseRecord) -> ZPath:
        return simulate_z_svensson(self.z0, self.alpha, T, dt, noise)

    def realize(self, z: ZPath, grid: MaturityGrid) -> SpdePath:
        return realize_curve_path(z, svensson_basis(self.alpha, grid))


def _sup(a: np.ndarray) -> float:
    return float(np.nanmax(a)) if np.any(np.isfinite(a)) else float("nan")


def _sup_by_time(a: np.ndarray) -> list:
    """Column-wise ``nanmax`` of ``(P, T)``; NaN where every path has stopped."""
    finite = np.isfinite(a)
    out = np.where(finite, a, -np.inf).max(axis=0)
    return np.where(finite.any(axis=0), out, np.nan).tolist()


def _ratio(levels: list, key: str) -> float:
    c, f = levels[0][key], levels[1][key]
    return c / f if f > 0 else float("inf")


def compare_realization(model: HjmModel, chart: LeafChart, z_dynamics, T: float, dt: float | None = None,
                        seed: int = 0, n_paths: int = 1, policy: str = "stop") -> dict:
    """Couple the SPDE and the realized factor SDE on shared noise at two resolutions.

    The fine level halves ``dx`` and ``dt``; its increments are drawn first
    and summed pairwise for the coarse level.  The gap is
    ``|r_t - phi(Z_t)| / |phi(Z_t)|`` in the sup norm on the samples
    (``gap``, ``sup_gap``, ``refinement_ratio``) and in the embedded norm
    (the ``*_weighted`` entries).
    """
    grid = model.grid
    dt = grid.spacing if dt is None else dt
    base = chart.base_point
    if model.base_point is not None and not np.array_equal(model.base_point.values, base.values):
        raise PreconditionError("chart and model do not share the base point")
    n = _n_steps(T, dt)
    fine_noise = NoiseRecord.generate(seed, dt / 2, 2 * n, n_paths, model.d)
    levels = [(model, dt, fine_noise.coarsen(2)), (model.regrid(grid.refine()), dt / 2, fine_noise)]
    out = {"T": T, "seed": seed, "n_paths": n_paths, "levels": []}
    for m, step, noise in levels:
        h0 = ForwardCurve.from_form(m.grid, base.closed_form) if base.closed_form is not None else base
        spde = simulate_hjm_spde(m, h0, T, step, noise, policy)
        z = z_dynamics.simulate(T, step, noise)
        phi = z_dynamics.realize(z, m.grid)
        gap = _relative_norms(spde.values - phi.values, phi.values, "sup")
        weighted = _relative_norms(embed_values(spde.values, m.grid) - embed_values(phi.values, m.grid),
                                   embed_values(phi.values, m.grid))
        out["levels"].append(
            {
                "n_points": m.grid.n_points,
                "dt": step,
                "times": spde.times.tolist(),
                "gap": gap.tolist(),
                "sup_gap": _sup(gap),
                "gap_weighted": weighted.tolist(),
                "sup_gap_weighted": _sup(weighted),
                "exited_region_at": [None if np.isnan(t) else float(t) for t in spde.exited_region_at],
                "spde_clip_counts": spde.clip_counts.tolist(),
                "z_clip_counts": z.clip_counts.tolist(),
            }
        )
    out["refinement_ratio"] = _ratio(out["levels"], "sup_gap")
    out["refinement_ratio_weighted"] = _ratio(out["levels"], "sup_gap_weighted")
    out["initial_gap"] = float(np.max(np.asarray(out["levels"][0]["gap"])[:, 0]))
    return out


def invariance_study(model: HjmModel, h0: ForwardCurve, family_curves: Sequence[ForwardCurve], T: float,
                     seed: int = 0, n_paths: int = 1, policy: str = "stop") -> dict:
    """Sup-over-time span residual of SPDE paths at two coupled resolutions.

    ``sup_residual`` and ``refinement_ratio`` use the sup norm; the
    ``*_weighted`` entries use the embedded norm.
    """
    grid = model.grid
    n = _n_steps(T, grid.spacing)
    fine_noise = NoiseRecord.generate(seed, grid.spacing / 2, 2 * n, n_paths, model.d)
    levels = [(model, grid.spacing, fine_noise.coarsen(2)), (model.regrid(grid.refine()), grid.spacing / 2, fine_noise)]
    out = {"T": T, "seed": seed, "n_paths": n_paths, "levels": []}
    for m, step, noise in levels:
        h = ForwardCurve.from_form(m.grid, h0.closed_form)
        fam = SpanFamily([ForwardCurve.from_form(m.grid, c.closed_form) for c in family_curves])
        path = simulate_hjm_spde(m, h, T, step, noise, policy)
        res = invariance_residuals(path, fam)
        weighted = invariance_residuals(path, fam, "weighted")
        out["levels"].append(
            {
                "n_points": m.grid.n_points,
                "dt": step,
                "sup_residual": _sup(res),
                "sup_residual_by_time": _sup_by_time(res),
                "sup_residual_weighted": _sup(weighted),
                "exits": int(np.sum(~np.isnan(path.exited_region_at))),
                "clip_counts": int(np.sum(path.clip_counts)),
            }
        )
    out["refinement_ratio"] = _ratio(out["levels"], "sup_residual")
    out["refinement_ratio_weighted"] = _ratio(out["levels"], "sup_residual_weighted")
    return out


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
