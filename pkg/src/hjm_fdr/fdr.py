"""Construction and verification of finite-dimensional realizations.

An affine realization is described by constant directions ``Lambda_k`` whose
span is invariant under ``d/dx`` (``Lambda' = gamma Lambda``), their integrals
``Delta_k``, Riccati coefficients ``Gamma^{k,ij}`` and the diffusion matrix
``a(h)`` defined by ``sigma^j(h) = sum_k rho^{kj}(h) Lambda_k``, ``a = rho rho^T``.
Invariant manifolds are parametrized by leaf charts

    alpha(u, y) = Fl_u(h0) + sum_k y_k Lambda_k,

with ``Fl`` the semiflow of the Ito drift ``nu``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy as sp
from scipy.linalg import expm

from .closed_form import X, SymbolicForm
from .curve_space import (
    ForwardCurve,
    MaturityGrid,
    build_functional,
    combine,
    embed,
    embedding_matrix,
    point_evaluation,
    project,
)
from .errors import DomainError, PreconditionError, RegionError, SolverError, StructureError
from .hjm_core import (
    ArrayKernel,
    HjmModel,
    PhiTerm,
    StateRegion,
    fd_step,
    hjm_drift,
    ito_drift,
    mu_field,
    sigma,
    sigma_field,
    splitting_scheme,
    stratonovich_drift,
)
from .lie_calculus import LieAlgebraReport, lie_bracket

SPAN_TOLERANCE = 1e-6
TANGENCY_TOLERANCE = 1e-5
ON_FAMILY_TOLERANCE = 1e-8
BLOWUP_CAP = 1e6


# -- CIR forward basis --------------------------------------------------------------

@dataclass(frozen=True)
class CirParams:
    """Parameters of the CIR forward-curve basis ``g0 = d (e^{ax}-1)/(e^{ax}+c)``,
    ``g1 = b e^{ax} / (e^{ax}+c)^2``."""

    a: float
    b: float
    c: float
    d_level: float = 0.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.c > 0):
            raise DomainError(f"CIR parameters need a, b, c > 0, got {self}")
        if self.d_level < 0:
            raise DomainError(f"CIR level d must be >= 0, got {self.d_level}")

    def riccati_coefficients(self) -> tuple[float, float]:
        """``(gamma, Gamma)`` of ``Delta' = 1 + gamma Delta - Gamma Delta^2`` whose
        solution has ``Delta'`` proportional to ``g1``."""
        g = self.a
        gam = g * (self.c - 1.0) / (self.c + 1.0)
        return gam, (g * g - gam * gam) / 4.0

    def riccati_delta(self, x):
        """Closed-form ``Delta(x) = 2 (e^{gx} - 1) / ((g - gamma)(e^{gx} - 1) + 2 g)``."""
        gam, _ = self.riccati_coefficients()
        g = self.a
        e = np.expm1(g * np.asarray(x, dtype=float))
        return 2.0 * e / ((g - gam) * e + 2.0 * g)

    def lambda_form(self) -> SymbolicForm:
        """``g1`` rescaled to value 1 at ``x = 0``."""
        a, c = sp.Float(self.a), sp.Float(self.c)
        return SymbolicForm((1 + c) ** 2 * sp.exp(a * X) / (sp.exp(a * X) + c) ** 2)


def cir_forward_basis(p: CirParams, grid: MaturityGrid) -> tuple[ForwardCurve, ForwardCurve]:
    """The CIR forward-curve basis ``(g0, g1)`` with analytic descriptors."""
    a, b, c, d = (sp.Float(v) for v in (p.a, p.b, p.c, p.d_level))
    e = sp.exp(a * X)
    g0 = SymbolicForm(d * (e - 1) / (e + c))
    g1 = SymbolicForm(b * e / (e + c) ** 2)
    c0 = ForwardCurve.from_form(grid, g0)
    v0 = np.array(c0.values)
    v0[0] = 0.0
    return ForwardCurve(grid, v0, g0), ForwardCurve.from_form(grid, g1)


# -- ODE systems in x ---------------------------------------------------------------------

def _rk4_path(rhs, y0: np.ndarray, dx: float, n_cells: int, m: int, cap: float) -> np.ndarray:
    h = dx / m
    y = np.array(y0, dtype=float)
    out = np.empty((n_cells + 1, y.size))
    out[0] = y
    for i in range(n_cells):
        for s in range(m):
            k1 = rhs(y)
            k2 = rhs(y + 0.5 * h * k1)
            k3 = rhs(y + 0.5 * h * k2)
            k4 = rhs(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > cap:
                x_star = i * dx + (s + 1) * h
                raise SolverError(f"solution exceeds |y| <= {cap:g} at x* = {x_star:.6g}", location=x_star)
        out[i + 1] = y
    return out


def integrate_ode(rhs, y0, grid: MaturityGrid, substeps: int | None = None, tol: float = 1e-11,
                  cap: float = BLOWUP_CAP, max_substeps: int = 4096) -> np.ndarray:
    """Classical RK4 for an autonomous system on the grid nodes.

    With ``substeps=None`` the number of steps per grid cell doubles until two
    successive solutions differ by at most ``tol * max(1, |y|_inf)``.
    Returns an array of shape ``(n_points, dim)``.
    """
    n_cells = grid.n_points - 1
    if substeps is not None:
        return _rk4_path(rhs, y0, grid.spacing, n_cells, int(substeps), cap)
    m = 1
    prev = _rk4_path(rhs, y0, grid.spacing, n_cells, m, cap)
    while m < max_substeps:
        m *= 2
        cur = _rk4_path(rhs, y0, grid.spacing, n_cells, m, cap)
        if np.max(np.abs(cur - prev)) <= tol * max(1.0, np.max(np.abs(cur))):
            return cur
        prev = cur
    raise SolverError(f"RK4 did not converge to {tol:g} with {max_substeps} substeps per cell")


def _warn_gamma(gamma: np.ndarray) -> None:
    ev = np.linalg.eigvals(np.atleast_2d(gamma))
    if np.any(ev.real >= 0):
        warnings.warn(
            f"gamma has eigenvalues with nonnegative real part {ev[ev.real >= 0]}; the directions need not decay",
            RuntimeWarning,
            stacklevel=3,
        )


def solve_linear_lambda(gamma, lambda0, grid: MaturityGrid, substeps: int | None = None, tol: float = 1e-11,
                        with_deltas: bool = False):
    """Integrate ``Lambda' = gamma Lambda``, ``Lambda(0) = lambda0``.

    Returns the ``d`` curves ``Lambda_k``; with ``with_deltas=True`` also
    their integrals ``Delta_k`` (solved jointly as ``Delta' = Lambda``).
    """
    G = np.atleast_2d(np.asarray(gamma, dtype=float))
    l0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    d = l0.size
    if G.shape != (d, d):
        raise DomainError(f"gamma must be {d}x{d}, got {G.shape}")
    _warn_gamma(G)

    def rhs(z):
        lam = z[:d]
        return np.concatenate([G @ lam, lam])

    sol = integrate_ode(rhs, np.concatenate([l0, np.zeros(d)]), grid, substeps, tol, cap=np.inf)
    lambdas = [ForwardCurve(grid, sol[:, k]) for k in range(d)]
    if not with_deltas:
        return lambdas
    dv = sol[:, d:].copy()
    dv[0] = 0.0
    return lambdas, [ForwardCurve(grid, dv[:, k]) for k in range(d)]


def solve_riccati_delta(gamma, big_gamma, lambda0, grid: MaturityGrid, substeps: int | None = None,
                        tol: float = 1e-11, cap: float = BLOWUP_CAP):
    """Integrate ``Delta_k' = lambda0_k + sum_i gamma^{ki} Delta_i - sum_ij Gamma^{k,ij} Delta_i Delta_j``.

    Returns ``(deltas, lambdas)`` with ``Lambda_k = Delta_k'`` evaluated from
    the right-hand side at the nodes.

    Raises
    ------
    SolverError
        If ``|Delta|`` exceeds ``cap`` (finite-x blow-up); ``location`` is x*.
    """
    G = np.atleast_2d(np.asarray(gamma, dtype=float))
    l0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    d = l0.size
    BG = np.asarray(big_gamma, dtype=float).reshape(d, d, d)
    if G.shape != (d, d):
        raise DomainError(f"gamma must be {d}x{d}, got {G.shape}")
    _warn_gamma(G)

    def rhs(z):
        return l0 + G @ z - np.einsum("kij,i,j->k", BG, z, z)

    sol = integrate_ode(rhs, np.zeros(d), grid, substeps, tol, cap)
    sol[0] = 0.0
    lam = np.array([rhs(z) for z in sol])
    deltas = [ForwardCurve(grid, sol[:, k]) for k in range(d)]
    lambdas = [ForwardCurve(grid, lam[:, k]) for k in range(d)]
    return deltas, lambdas


def check_delta_independence(deltas: Sequence[ForwardCurve], threshold: float = 1e10) -> float:
    """Condition number of the Gram matrix of ``{Delta_i} + {Delta_i Delta_j, i <= j}``.

    Warns when it exceeds ``threshold``: the constancy of ``gamma`` and
    ``Gamma`` is then not supported by the data.
    """
    curves = list(deltas) + [deltas[i] * deltas[j] for i in range(len(deltas)) for j in range(i, len(deltas))]
    M = embedding_matrix(curves)
    cond = float(np.linalg.cond(M.T @ M))
    if not cond <= threshold:
        warnings.warn(f"Gram matrix of Delta products has condition {cond:.3e} > {threshold:g}", RuntimeWarning,
                      stacklevel=2)
    return cond


# -- realizations ------------------------------------------------------------------------------

@dataclass
class AffineRealization:
    """Constant directions and coefficient data of an affine realization.

    ``a_map(h)`` returns the ``d x d`` diffusion matrix; ``a_constant`` holds
    it when it does not depend on the state.
    """

    lambdas: list
    deltas: list
    gamma: np.ndarray
    big_gamma: np.ndarray
    a_map: Callable[[ForwardCurve], np.ndarray] | None = None
    a_constant: np.ndarray | None = None
    v_functionals: list | None = None
    notes: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return len(self.lambdas)

    def a(self, h: ForwardCurve | None = None) -> np.ndarray:
        if self.a_constant is not None:
            return np.asarray(self.a_constant)
        if self.a_map is None or h is None:
            raise StructureError("state-dependent diffusion matrix needs a state")
        return self.a_map(h)

    def to_dict(self) -> dict:
        grid = self.lambdas[0].grid
        return {
            "d": self.d,
            "grid": {"x_max": grid.x_max, "n_points": grid.n_points, "weight_alpha": grid.weight_alpha},
            "x": [float(x) for x in grid.nodes],
            "lambdas": [[float(v) for v in c.values] for c in self.lambdas],
            "deltas": [[float(v) for v in c.values] for c in self.deltas],
            "gamma": np.asarray(self.gamma).tolist(),
            "big_gamma": np.asarray(self.big_gamma).tolist(),
            "a_map": {"kind": "constant", "value": np.asarray(self.a_constant).tolist()}
            if self.a_constant is not None
            else {"kind": "state-dependent"},
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _orthonormal_span(curves: Sequence[ForwardCurve], tolerance: float) -> list[ForwardCurve]:
    M = embedding_matrix(curves)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return []
    r = int(np.sum(s >= tolerance * s[0]))
    out = []
    for i in range(r):
        coeffs = Vt[i] / s[i]
        c = combine(list(curves), coeffs)
        k = int(np.argmax(np.abs(c.values)))
        out.append(c if c.values[k] >= 0 else -c)
    return out


def extract_constant_directions(report: LieAlgebraReport, model: HjmModel,
                                tolerance: float = SPAN_TOLERANCE) -> list[ForwardCurve]:
    """Orthonormal basis ``Lambda`` of the span of the non-drift retained fields over all test points.

    Raises
    ------
    StructureError
        If the report has no constant rank, the span dimension differs from
        ``k_D - 1``, or some ``sigma^j(h)`` leaves the span.
    """
    if report.k_D is None:
        raise StructureError(f"not in the affine class: D_LA rank is not constant ({report.rank_per_point})")
    keep = [i for i, f in enumerate(report.fields) if f.label not in ("mu", "nu")]
    stacked = [report.values[p][i] for p in range(len(report.test_points)) for i in keep]
    for p in report.test_points:
        stacked.extend(sigma(model, p))
    lambdas = _orthonormal_span(stacked, tolerance)
    if len(lambdas) != report.k_D - 1:
        raise StructureError(
            f"not in the affine class: volatility directions span dimension {len(lambdas)}, expected k_D - 1 = {report.k_D - 1}"
        )
    worst = 0.0
    for p in report.test_points:
        for s in sigma(model, p):
            if s.sup_norm() == 0:
                continue
            worst = max(worst, project(s, lambdas)[2])
    if worst >= tolerance:
        raise StructureError(f"not in the affine class: sigma leaves span(Lambda) with residual {worst:.3e}")
    return lambdas


def constant_direction_residual(model: HjmModel, lambdas: Sequence[ForwardCurve], points: Sequence[ForwardCurve]) -> float:
    """Max relative residual of ``sigma^j(h)`` projected onto ``span(lambdas)``."""
    worst = 0.0
    for p in points:
        for s in sigma(model, p):
            if s.sup_norm() > 0:
                worst = max(worst, project(s, lambdas)[2])
    return worst


def _volatility_loadings(model: HjmModel, lambdas, h) -> np.ndarray:
    """``rho`` with ``sigma^j(h) = sum_k rho[k, j] Lambda_k``."""
    return np.column_stack([project(s, lambdas)[0] for s in sigma(model, h)])


def construct_realization(model: HjmModel, report: LieAlgebraReport, tolerance: float = SPAN_TOLERANCE) -> AffineRealization:
    """Affine realization data for a model whose report passes :func:`extract_constant_directions`.

    ``gamma`` comes from projecting ``Lambda_k'`` onto ``span(Lambda)``;
    ``Gamma^{k,ij} = 1/2 D a^{ij}(h0) Lambda_k`` (central differences).
    """
    lambdas = extract_constant_directions(report, model, tolerance)
    d = len(lambdas)
    gamma = np.zeros((d, d))
    for k, lam in enumerate(lambdas):
        coeffs, _, rel = project(lam.derivative(), lambdas)
        if rel >= tolerance:
            raise StructureError(f"span(Lambda) is not invariant under d/dx (residual {rel:.3e})")
        gamma[k] = coeffs
    deltas = [lam.antiderivative() for lam in lambdas]

    def a_map(h):
        rho = _volatility_loadings(model, lambdas, h)
        return rho @ rho.T

    h0 = report.test_points[0]
    a_vals = [a_map(p) for p in report.test_points]
    scale = max(1.0, max(float(np.max(np.abs(a))) for a in a_vals))
    const = all(np.max(np.abs(a - a_vals[0])) <= 1e-10 * scale for a in a_vals)
    big_gamma = np.zeros((d, d, d))
    for k, lam in enumerate(lambdas):
        eps = fd_step(h0, lam)
        big_gamma[k] = 0.25 * (a_map(h0 + eps * lam) - a_map(h0 - eps * lam)) / eps
    big_gamma[np.abs(big_gamma) < 1e-9 * scale] = 0.0
    notes = []
    if d == 1 and gamma[0, 0] >= 0:
        notes.append("gamma is not negative")
    return AffineRealization(
        lambdas, deltas, gamma, big_gamma, a_map, a_vals[0] if const else None, None, notes
    )


def gaussian_realization(model: HjmModel, report: LieAlgebraReport) -> AffineRealization:
    """Realization of a constant-volatility model (constant ``a``, ``Gamma = 0``)."""
    if not model.is_constant:
        raise StructureError("gaussian_realization needs state-independent volatilities")
    r = construct_realization(model, report)
    if r.a_constant is None:
        raise StructureError("diffusion matrix is not constant")
    return r


# -- Gaussian global leaf and the integrated criterion --------------------------------------------------------

def gaussian_global_leaf(a, deltas: Sequence[ForwardCurve], b: float, c) -> ForwardCurve:
    """``b * 1 + sum_j c_j Delta_j - 1/2 sum_ij a^{ij} Delta_i Delta_j``."""
    A = np.atleast_2d(np.asarray(a, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    d = len(deltas)
    if A.shape != (d, d) or c.shape != (d,):
        raise DomainError("a must be d x d and c must have d entries")
    if not np.allclose(A, A.T, atol=0, rtol=1e-12):
        raise DomainError("a must be symmetric")
    if d and np.min(np.linalg.eigvalsh(A)) <= 0:
        raise DomainError("a must be positive definite")
    grid = deltas[0].grid
    out = ForwardCurve.constant(grid, b)
    for j in range(d):
        out = out + c[j] * deltas[j]
    for i in range(d):
        for j in range(d):
            out = out - (0.5 * A[i, j]) * (deltas[i] * deltas[j])
    return out


def nu_in_span_criterion(h: ForwardCurve, realization: AffineRealization, tolerance: float = SPAN_TOLERANCE):
    """Is ``h - h(0) + 1/2 sum a^{ij} Delta_i Delta_j`` in ``span(Delta)``?

    Equivalent to ``nu(h)`` lying in ``span(Lambda)`` for constant ``a``.
    Returns ``(in_span, relative_residual)``.
    """
    if realization.a_constant is None:
        raise StructureError("the integrated criterion needs a constant diffusion matrix")
    A = np.asarray(realization.a_constant)
    D = realization.deltas
    g = h - float(h.values[0])
    for i in range(len(D)):
        for j in range(len(D)):
            g = g + (0.5 * A[i, j]) * (D[i] * D[j])
    _, _, rel = project(g, D)
    return bool(rel < tolerance), float(rel)


# -- semiflow of nu ----------------------------------------------------------------------------------------------------

def _check_dt(grid: MaturityGrid, u: float, dt: float) -> tuple[int, int]:
    cells = grid.cells(dt)
    if cells is None or cells < 1:
        raise DomainError(f"dt = {dt} must be a positive integer multiple of dx = {grid.spacing}")
    r = u / dt
    n = int(round(r))
    if abs(r - n) > 1e-9:
        raise DomainError(f"dt = {dt} must divide u = {u}")
    return n, cells


def nu_semiflow(model: HjmModel, h0: ForwardCurve, u: float, dt: float | None = None, method: str = "auto") -> ForwardCurve:
    """``Fl_u(h0)`` for the semiflow of ``d/du r = r' + alpha_HJM(r)``.

    ``method="splitting"`` runs the grid-locked splitting scheme (exact shift
    by ``dt`` then an explicit drift step), the same code path as the SPDE
    simulator with zero noise.  ``method="closed"`` (default for constant
    volatilities via ``"auto"``) uses ``S(u) h0 + I(x + u) - I(x)`` with
    ``I`` the exact antiderivative of the constant drift.
    """
    if u < 0:
        raise DomainError(f"u must be >= 0, got {u}")
    if method not in ("auto", "splitting", "closed"):
        raise ValueError(f"unknown method {method!r}")
    if method == "closed" or (method == "auto" and model.is_constant and h0.closed_form is not None):
        if not model.is_constant:
            raise StructureError("closed-form semiflow needs state-independent volatilities")
        return _gaussian_flow(model, h0, u)
    if u == 0:
        return h0
    dt = model.grid.spacing if dt is None else dt
    n, cells = _check_dt(model.grid, u, dt)
    res = splitting_scheme(ArrayKernel(model), h0.values[None, :], n, cells, dt)
    if res.exit_step[0] >= 0:
        raise RegionError(f"semiflow left the region at u = {res.exit_step[0] * dt:.6g}", time=res.exit_step[0] * dt)
    return ForwardCurve(model.grid, res.values[0, -1])


def _gaussian_flow(model: HjmModel, h0: ForwardCurve, u: float) -> ForwardCurve:
    alpha = hjm_drift(model, h0)
    I = alpha.antiderivative()
    return h0.shift(u) + I.shift(u) - I


# -- leaf charts ------------------------------------------------------------------------------------------------------------------

class ClosedGaussianFlow:
    """Exact semiflow for state-independent volatilities."""

    kind = "closed-gaussian"

    def __init__(self, model: HjmModel, h0: ForwardCurve):
        self.model, self.h0 = model, h0

    def at(self, u: float) -> ForwardCurve:
        return _gaussian_flow(self.model, self.h0, u)

    def du(self, u: float) -> ForwardCurve:
        return ito_drift(self.model, self.at(u))


class SvenssonSpanFlow:
    """Semiflow on ``span{g1..g4}``: ``z' = M z`` solved by the matrix exponential."""

    kind = "svensson-span"

    def __init__(self, alpha: float, basis: Sequence[ForwardCurve], z0):
        self.alpha = float(alpha)
        self.basis = list(basis)
        self.z0 = np.asarray(z0, dtype=float)
        a = self.alpha
        self.M = np.array([[0, 0, 0, 0], [0, -a, 1, 1], [0, 0, -a, 0], [0, 0, 0, -2 * a]], dtype=float)

    def z(self, u: float) -> np.ndarray:
        return expm(self.M * u) @ self.z0

    def at(self, u: float) -> ForwardCurve:
        return combine(self.basis, self.z(u))

    def du(self, u: float) -> ForwardCurve:
        return combine(self.basis, self.M @ self.z(u))


class NumericalFlow:
    """Splitting snapshots at multiples of ``dt`` with cubic Hermite interpolation in ``u``.

    Node derivatives are ``nu`` at the snapshots; ``du`` is the derivative of
    the interpolant.
    """

    kind = "numerical"

    def __init__(self, model: HjmModel, h0: ForwardCurve, u_max: float, dt: float | None = None):
        self.model, self.h0 = model, h0
        self.dt = model.grid.spacing if dt is None else float(dt)
        n = int(np.ceil(u_max / self.dt - 1e-9)) + 1
        _, cells = _check_dt(model.grid, n * self.dt, self.dt)
        res = splitting_scheme(ArrayKernel(model), h0.values[None, :], n, cells, self.dt)
        if res.exit_step[0] >= 0:
                raise RegionError(f"semiflow left the region at u = {res.exit_step[0] * self.dt:.6g}")
        self.snaps = res.values[0]
        self.slopes = np.stack([ito_drift(model, ForwardCurve(model.grid, v)).values for v in self.snaps])
        self.u_max = n * self.dt

    def _locate(self, u):
        if u < 0 or u > self.u_max + 1e-12:
            raise DomainError(f"u = {u} outside [0, {self.u_max}]")
        k = min(int(u / self.dt), len(self.snaps) - 2)
        return k, (u - k * self.dt) / self.dt

    def at(self, u: float) -> ForwardCurve:
        k, s = self._locate(u)
        if s == 0.0:
            return ForwardCurve(self.model.grid, self.snaps[k])
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        v = h00 * self.snaps[k] + h10 * self.dt * self.slopes[k] + h01 * self.snaps[k + 1] + h11 * self.dt * self.slopes[k + 1]
        return ForwardCurve(self.model.grid, v)

    def du(self, u: float) -> ForwardCurve:
        k, s = self._locate(u)
        d00 = (6 * s**2 - 6 * s) / self.dt
        d10 = 3 * s**2 - 4 * s + 1
        d01 = (-6 * s**2 + 6 * s) / self.dt
        d11 = 3 * s**2 - 2 * s
        v = d00 * self.snaps[k] + d10 * self.slopes[k] + d01 * self.snaps[k + 1] + d11 * self.slopes[k + 1]
        return ForwardCurve(self.model.grid, v)


@dataclass
class LeafChart:
    """``alpha(u, y) = Fl_u(h0) + sum_k y_k Lambda_k`` on ``[0, u_max) x box``."""

    base_point: ForwardCurve
    flow: object
    lambdas: list
    u_range: tuple = (0.0, 1.0)
    y_range: tuple = ((-1.0, 1.0),)

    @property
    def d(self) -> int:
        return len(self.lambdas)

    def check(self, u, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape != (self.d,):
            raise DomainError(f"y must have {self.d} entries")
        if not (self.u_range[0] <= u <= self.u_range[1]):
            raise DomainError(f"u = {u} outside {self.u_range}")
        for k, (lo, hi) in enumerate(self.y_range):
            if not lo <= y[k] <= hi:
                raise DomainError(f"y_{k + 1} = {y[k]} outside [{lo}, {hi}]")
        return y

    def jacobian(self, u: float, y) -> list[ForwardCurve]:
        """Tangent vectors ``[d alpha/du, Lambda_1, ..., Lambda_d]`` at ``(u, y)``."""
        self.check(u, y)
        return [self.flow.du(u)] + list(self.lambdas)


def make_chart(base_point: ForwardCurve, flow, lambdas: Sequence[ForwardCurve], u_max: float = 1.0,
               y_scale: float | None = None) -> LeafChart:
    """Chart with the default ranges ``u in [0, u_max]``, ``y in [-s, s]^d``, ``s = |h0|_inf``."""
    s = base_point.sup_norm() if y_scale is None else y_scale
    s = s if s > 0 else 1.0
    return LeafChart(base_point, flow, list(lambdas), (0.0, float(u_max)), tuple((-s, s) for _ in lambdas))


def leaf_parametrization(chart: LeafChart, u: float, y) -> ForwardCurve:
    """``Fl_u(h0) + sum_k y_k Lambda_k``."""
    y = chart.check(u, y)
    out = chart.flow.at(u)
    for k, lam in enumerate(chart.lambdas):
        if y[k] != 0.0:
            out = out + y[k] * lam
    return out


@dataclass
class LeafProjection:
    u: float
    y: np.ndarray
    residual: float
    converged: bool
    iterations: int


def project_to_leaf(h: ForwardCurve, chart: LeafChart, max_iter: int = 50, step_tol: float = 1e-10) -> LeafProjection:
    """Gauss-Newton fit of ``(u, y)`` minimizing ``|h - alpha(u, y)|`` in the embedded norm.

    Starts at ``u = 0`` with ``y`` from the linear projection of
    ``h - h0`` onto ``span(Lambda)``; ``u`` is kept inside ``u_range``.
    """
    exact = h.closed_form is not None and chart.base_point.closed_form is not None and all(
        l.closed_form is not None for l in chart.lambdas)

    def E(c):
        return embed(c, exact and c.closed_form is not None)

    target = E(h)
    u = chart.u_range[0]
    y, _, _ = project(h - chart.base_point, chart.lambdas, exact=False) if chart.d else (np.zeros(0), 0, 0)
    y = np.asarray(y, dtype=float)
    lo = np.array([r[0] for r in chart.y_range])
    hi = np.array([r[1] for r in chart.y_range])
    Lmat = np.column_stack([E(l) for l in chart.lambdas]) if chart.d else np.zeros((target.size, 0))

    def residual(u, y):
        a = chart.flow.at(u)
        return (E(a) + Lmat @ y) - target if chart.d else E(a) - target

    y = np.clip(y, lo, hi)
    r = residual(u, y)
    best = (float(np.linalg.norm(r)), u, y.copy())
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = np.column_stack([E(chart.flow.du(u)), Lmat])
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        u_new = float(np.clip(u + step[0], chart.u_range[0], chart.u_range[1]))
        y_new = np.clip(y + step[1:], lo, hi)
        actual = np.concatenate([[u_new - u], y_new - y])
        u, y = u_new, y_new
        r = residual(u, y)
        nr = float(np.linalg.norm(r))
        if nr < best[0]:
            best = (nr, u, y.copy())
        if np.linalg.norm(actual) < step_tol:
            converged = True
            break
    return LeafProjection(best[1], best[2], best[0], converged, it)


# -- families and tangency --------------------------------------------------------------------------------------------

@dataclass
class SpanFamily:
    """The linear manifold ``span(curves)``."""

    curves: list

    def __post_init__(self):
        self.curves = list(self.curves)


@dataclass
class TangencyResult:
    residuals: dict
    consistent: bool
    distance: float


def tangency_check(model: HjmModel, family, h: ForwardCurve, tolerance: float = TANGENCY_TOLERANCE) -> TangencyResult:
    """Relative residuals of ``mu(h)`` and ``sigma^j(h)`` against the tangent space of ``family`` at ``h``.

    Raises
    ------
    PreconditionError
        If ``h`` is not on the family (relative distance ``>= 1e-8``).
    """
    if isinstance(family, SpanFamily):
        _, _, dist = project(h, family.curves)
        tangent = family.curves
    elif isinstance(family, LeafChart):
        pr = project_to_leaf(h, family)
        norm = float(np.linalg.norm(embed(h)))
        dist = pr.residual / norm if norm > 0 else pr.residual
        tangent = family.jacobian(pr.u, pr.y)
    else:
        raise TypeError(f"unsupported family {type(family).__name__}")
    if dist >= ON_FAMILY_TOLERANCE:
        raise PreconditionError(f"h is not on the family (relative distance {dist:.3e})", distance=dist)
    res = {"mu": project(stratonovich_drift(model, h), tangent)[2]}
    for j, s in enumerate(sigma(model, h)):
        res["sigma" if model.d == 1 else f"sigma{j + 1}"] = project(s, tangent)[2]
    return TangencyResult(res, all(v < tolerance for v in res.values()), float(dist))


# -- Svensson model -------------------------------------------------------------------------------------------------------

SVENSSON_NODES = (0.5, 1.0, 2.0, 3.0, 5.0)
DEFAULT_SVENSSON_Z0 = (0.05, -0.02, 0.01, 0.02)


def svensson_basis(alpha: float, grid: MaturityGrid) -> list[ForwardCurve]:
    """``[1, e^{-alpha x}, x e^{-alpha x}, x e^{-2 alpha x}]``."""
    return [
        ForwardCurve.constant(grid),
        ForwardCurve.exponential(grid, alpha),
        ForwardCurve.exponential(grid, alpha, 1),
        ForwardCurve.exponential(grid, 2 * alpha, 1),
    ]


def snap_to_grid(grid: MaturityGrid, xs: Sequence[float]) -> list[float]:
    return [float(grid.nodes[min(int(round(x / grid.spacing)), grid.n_points - 1)]) for x in xs]


def svensson_model(alpha: float, grid: MaturityGrid, z0=DEFAULT_SVENSSON_Z0, nodes: Sequence[float] = SVENSSON_NODES,
                   u_max: float = 1.0):
    """Consistent Svensson model ``sigma(h) = sqrt(alpha l(h)) e^{-alpha x}``.

    ``l`` is the minimum-norm point-evaluation functional with
    ``l(g1) = l(g2) = l(g3) = 0`` and ``l(g4) = 1`` at ``nodes`` (snapped to
    the grid); the region is ``{l > 0}``.  Returns ``(model, chart, basis)``
    with the chart based at ``sum z0_i g_i``.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (4,):
        raise DomainError("z0 must have 4 entries")
    basis = svensson_basis(alpha, grid)
    ell = build_functional([(basis[0], 0.0), (basis[1], 0.0), (basis[2], 0.0), (basis[3], 1.0)], snap_to_grid(grid, nodes))
    h0 = combine(basis, z0)
    extra = (ForwardCurve.exponential(grid, 0.5 * alpha), ForwardCurve.exponential(grid, alpha, 2))
    model = HjmModel(
        grid,
        (ell,),
        ((PhiTerm(f"sqrt({float(alpha)!r}*y1)", basis[1]),),),
        StateRegion((0.0,)),
        tuple(basis) + extra,
        h0,
        kind="svensson-sqrt",
        name=f"svensson(alpha={alpha!r})",
    )
    model.region.check(model.ell(h0))
    lam = basis[1] / float(np.linalg.norm(embed(basis[1])))
    chart = make_chart(h0, SvenssonSpanFlow(alpha, basis, z0), [lam], u_max)
    return model, chart, basis


def svensson_bracket_coefficients(model: HjmModel, h: ForwardCurve, alpha: float) -> dict:
    """The ``g2``-coefficient of ``[mu, sigma](h)`` in two candidate forms.

    ``corrected``: ``-alpha sqrt(alpha l) - alpha l(mu(h)) / (2 sqrt(alpha l))``
    (direct differentiation of ``sqrt(alpha l(h)) g2``);
    ``printed``: the same without the factor ``alpha`` on the second term.
    """
    l = float(model.ell(h)[0])
    lmu = float(model.ell(stratonovich_drift(model, h))[0])
    root = np.sqrt(alpha * l)
    return {
        "corrected": -alpha * root - alpha * lmu / (2 * root),
        "printed": -alpha * root - lmu / (2 * root),
    }


def svensson_bracket_oracle(model: HjmModel, points: Sequence[ForwardCurve], alpha: float, rtol: float = 1e-5) -> dict:
    """Compare the finite-difference ``[mu, sigma]`` with both candidate coefficients.

    At each point the bracket is projected onto ``g2 = e^{-alpha x}``; the
    cross-component residual and the relative errors against the two forms
    of :func:`svensson_bracket_coefficients` are recorded.  ``observed`` is
    the form matched to ``rtol`` at every point, ``"both"`` when they
    coincide (``alpha = 1``) and ``"neither"`` when no form matches.
    On the span itself the bracket vanishes, so callers should pass points
    off the span.
    """
    g2 = ForwardCurve.exponential(model.grid, alpha)
    rows = []
    for h in points:
        b = lie_bracket(mu_field(model), sigma_field(model, 0), h, method="fd")
        coeffs, _, cross = project(b, [g2])
        forms = svensson_bracket_coefficients(model, h, alpha)
        fd = float(coeffs[0])
        rows.append({
            "fd": fd,
            "corrected": float(forms["corrected"]),
            "printed": float(forms["printed"]),
            "cross_residual": float(cross),
            "error_corrected": abs(fd - forms["corrected"]) / abs(fd),
            "error_printed": abs(fd - forms["printed"]) / abs(fd),
        })
    matched = [n for n in ("corrected", "printed") if rows and all(r[f"error_{n}"] < rtol for r in rows)]
    observed = {0: "neither", 1: matched[0] if matched else "", 2: "both"}[len(matched)]
    return {"points": rows, "observed": observed, "rtol": rtol}


# -- CIR-type short-rate model ----------------------------------------------------------------------------------------

def cir_model(p: CirParams, grid: MaturityGrid, base_point: ForwardCurve | None = None) -> HjmModel:
    """``sigma(h) = s sqrt(h(0)) Lambda`` with ``Lambda = g1 / g1(0)`` and ``s^2 = 2 Gamma``.

    The factor ``2 Gamma`` makes ``D a(h) Lambda = 2 Gamma`` for ``a(h) = s^2 h(0)``,
    matching the Riccati equation of the direction.
    """
    _, G = p.riccati_coefficients()
    s = float(np.sqrt(2.0 * G))
    lam = ForwardCurve.from_form(grid, p.lambda_form())
    basis = (ForwardCurve.constant(grid), ForwardCurve.exponential(grid, 1.0), ForwardCurve.exponential(grid, 1.0, 1))
    return HjmModel(grid, (point_evaluation(0.0),), ((PhiTerm(f"{s!r}*sqrt(y1)", lam),),), StateRegion((0.0,)),
                    basis, base_point, kind="custom", name="cir")
