"""Discrete forward-curve space.

Curves are sampled on a uniform maturity grid ``x_i = i * dx`` and may carry
an exact analytic descriptor (see :mod:`hjm_fdr.closed_form`).  When a
descriptor is present, differentiation, shifts and the HJM bilinear map are
exact; otherwise second-order grid formulas are used.

The space is the weighted Sobolev-type space with norm

    ||h||_w^2 = |h(0)|^2 + int_0^x_max |h'(x)|^2 w(x) dx,

with ``w(x) = (1 + x)**alpha`` (default ``alpha = 4``) or ``w(x) = exp(alpha x)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator

from .closed_form import ClosedForm, ExpPoly
from .errors import ConfigError, ConstructionError, DomainError, GridMismatchError

_NODE_TOL = 1e-9


@dataclass(frozen=True)
class MaturityGrid:
    """Uniform maturity grid on ``[0, x_max]`` with its norm weight."""

    x_max: float = 20.0
    n_points: int = 256
    weight_alpha: float = 4.0
    weight_kind: str = "polynomial"

    def __post_init__(self):
        if self.n_points < 16:
            raise DomainError(f"n_points must be >= 16, got {self.n_points}")
        if not self.x_max > 0:
            raise DomainError(f"x_max must be > 0, got {self.x_max}")
        if self.weight_kind == "polynomial":
            if not self.weight_alpha > 3:
                raise DomainError(f"polynomial weight needs weight_alpha > 3, got {self.weight_alpha}")
        elif self.weight_kind == "exponential":
            if not self.weight_alpha > 0:
                raise DomainError(f"exponential weight needs weight_alpha > 0, got {self.weight_alpha}")
        else:
            raise DomainError(f"unknown weight_kind {self.weight_kind!r}")

    @property
    def spacing(self) -> float:
        return self.x_max / (self.n_points - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.arange(self.n_points) * self.spacing
        x.flags.writeable = False
        return x

    def weight(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.weight_kind == "polynomial":
            return (1.0 + x) ** self.weight_alpha
        return np.exp(self.weight_alpha * x)

    @cached_property
    def embedding_scale(self) -> np.ndarray:
        """``sqrt(trapezoid weight * w(x_i))`` per node."""
        q = np.full(self.n_points, self.spacing)
        q[0] = q[-1] = 0.5 * self.spacing
        s = np.sqrt(q * self.weight(self.nodes))
        s.flags.writeable = False
        return s

    def node_index(self, x: float) -> int | None:
        """Index of the node at ``x``, or None when ``x`` is not a node."""
        r = x / self.spacing
        i = int(round(r))
        if 0 <= i < self.n_points and abs(r - i) < _NODE_TOL:
            return i
        return None

    def cells(self, t: float) -> int | None:
        """Number of cells ``t`` spans when it is an integer multiple of dx."""
        r = t / self.spacing
        m = int(round(r))
        return m if abs(r - m) < _NODE_TOL else None

    def refine(self) -> "MaturityGrid":
        """Same interval with half the spacing."""
        return MaturityGrid(self.x_max, 2 * self.n_points - 1, self.weight_alpha, self.weight_kind)


def fd_derivative(values: np.ndarray, dx: float) -> np.ndarray:
    """Second-order differences along the last axis (one-sided at the ends)."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2.0 * dx)
    out[..., 0] = (-3.0 * v[..., 0] + 4.0 * v[..., 1] - v[..., 2]) / (2.0 * dx)
    out[..., -1] = (3.0 * v[..., -1] - 4.0 * v[..., -2] + v[..., -3]) / (2.0 * dx)
    return out


def shift_cells(values: np.ndarray, m: int) -> np.ndarray:
    """Shift samples left by ``m`` cells along the last axis, flat-filling the tail."""
    v = np.asarray(values, dtype=float)
    if m == 0:
        return v.copy()
    n = v.shape[-1]
    out = np.empty_like(v)
    if m >= n:
        out[...] = v[..., -1:]
        return out
    out[..., : n - m] = v[..., m:]
    out[..., n - m :] = v[..., -1:]
    return out


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ForwardCurve:
    """A forward curve sampled on a :class:`MaturityGrid`.

    ``closed_form``, when present, is an exact descriptor whose evaluation
    at the nodes reproduces ``values``.
    """

    grid: MaturityGrid
    values: np.ndarray
    closed_form: ClosedForm | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise DomainError(f"curve has {v.shape} samples, grid has {self.grid.n_points} nodes")
        if not np.all(np.isfinite(v)):
            raise DomainError("curve samples must be finite")
        if v.flags.writeable or v is not self.values:
            object.__setattr__(self, "values", _frozen(v))

    # -- constructors -------------------------------------------------------
    @classmethod
    def from_form(cls, grid: MaturityGrid, form: ClosedForm) -> "ForwardCurve":
        return cls(grid, form.evaluate(grid.nodes), form)

    @classmethod
    def constant(cls, grid: MaturityGrid, c: float = 1.0) -> "ForwardCurve":
        return cls.from_form(grid, ExpPoly.constant(c))

    @classmethod
    def exponential(cls, grid: MaturityGrid, decay: float, degree: int = 0, coeff: float = 1.0) -> "ForwardCurve":
        """``coeff * x**degree * exp(-decay * x)``."""
        return cls.from_form(grid, ExpPoly.exponential(decay, degree, coeff))

    @classmethod
    def zeros(cls, grid: MaturityGrid) -> "ForwardCurve":
        return cls.from_form(grid, ExpPoly())

    def sampled(self) -> "ForwardCurve":
        """The same samples without the analytic descriptor."""
        return ForwardCurve(self.grid, self.values)

    # -- basic operations ---------------------------------------------------
    @cached_property
    def _interp(self) -> PchipInterpolator:
        return PchipInterpolator(self.grid.nodes, self.values, extrapolate=False)

    def evaluate(self, x):
        """Rate at maturity ``x`` (scalar or array) in ``[0, x_max]``."""
        xa = np.asarray(x, dtype=float)
        if np.any(xa < -_NODE_TOL * self.grid.spacing) or np.any(xa > self.grid.x_max * (1 + 1e-12)):
            raise DomainError(f"maturity outside [0, {self.grid.x_max}]: {x}")
        flat = np.atleast_1d(xa).ravel()
        out = np.empty_like(flat)
        for j, xv in enumerate(flat):
            i = self.grid.node_index(xv)
            if i is not None:
                out[j] = self.values[i]
            elif self.closed_form is not None:
                out[j] = self.closed_form.evaluate(xv)
            else:
                out[j] = self._interp(min(max(xv, 0.0), self.grid.x_max))
        return out.reshape(xa.shape) if xa.ndim else float(out[0])

    __call__ = evaluate

    def derivative(self) -> "ForwardCurve":
        """``A h = h'``; analytic when a descriptor is present."""
        if self.closed_form is not None:
            return ForwardCurve.from_form(self.grid, self.closed_form.derivative())
        return ForwardCurve(self.grid, fd_derivative(self.values, self.grid.spacing))

    def derivative_values(self) -> np.ndarray:
        if self.closed_form is not None:
            return self.closed_form.derivative().evaluate(self.grid.nodes)
        return fd_derivative(self.values, self.grid.spacing)

    def shift(self, t: float) -> "ForwardCurve":
        """Right shift ``x -> h(t + x)``."""
        if t < 0:
            raise DomainError(f"shift requires t >= 0, got {t}")
        if self.closed_form is not None:
            return ForwardCurve.from_form(self.grid, self.closed_form.shift(t))
        m = self.grid.cells(t)
        if m is not None:
            return ForwardCurve(self.grid, shift_cells(self.values, m))
        xs = np.minimum(self.grid.nodes + t, self.grid.x_max)
        return ForwardCurve(self.grid, self._interp(xs))

    def antiderivative(self) -> "ForwardCurve":
        """``x -> int_0^x h``; exact for exponential polynomials, trapezoid otherwise."""
        if self.closed_form is not None:
            F = self.closed_form.antiderivative()
            if F is not None:
                vals = F.evaluate(self.grid.nodes)
                vals[0] = 0.0
                return ForwardCurve(self.grid, vals, F)
        return ForwardCurve(self.grid, cumulative_trapezoid(self.values, dx=self.grid.spacing, initial=0.0))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    # -- arithmetic ----------------------------------------------------------
    def _check(self, other: "ForwardCurve"):
        if other.grid != self.grid:
            raise GridMismatchError(f"grid mismatch: {self.grid} vs {other.grid}")

    def __add__(self, other):
        if isinstance(other, ForwardCurve):
            self._check(other)
            form = None
            if self.closed_form is not None and other.closed_form is not None:
                form = self.closed_form.add(other.closed_form)
            return ForwardCurve(self.grid, self.values + other.values, form)
        c = float(other)
        form = self.closed_form.add(ExpPoly.constant(c)) if self.closed_form is not None else None
        return ForwardCurve(self.grid, self.values + c, form)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, ForwardCurve):
            self._check(other)
            form = None
            if self.closed_form is not None and other.closed_form is not None:
                form = self.closed_form.multiply(other.closed_form)
            return ForwardCurve(self.grid, self.values * other.values, form)
        c = float(other)
        form = self.closed_form.scale(c) if self.closed_form is not None else None
        return ForwardCurve(self.grid, self.values * c, form)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def __repr__(self) -> str:
        kind = type(self.closed_form).__name__ if self.closed_form is not None else "sampled"
        return f"ForwardCurve(n={self.grid.n_points}, x_max={self.grid.x_max}, {kind}, h(0)={self.values[0]:.6g})"


def combine(curves: Sequence[ForwardCurve], coeffs) -> ForwardCurve:
    """Linear combination ``sum_k coeffs[k] * curves[k]`` preserving descriptors."""
    coeffs = np.asarray(coeffs, dtype=float)
    if len(curves) == 0:
        raise ValueError("combine needs at least one curve")
    grid = curves[0].grid
    for c in curves[1:]:
        if c.grid != grid:
            raise GridMismatchError("combine: curves on different grids")
    values = coeffs @ np.stack([c.values for c in curves])
    form = None
    if all(c.closed_form is not None for c in curves):
        form = curves[0].closed_form.scale(coeffs[0])
        for c, a in zip(curves[1:], coeffs[1:]):
            form = form.add(c.closed_form.scale(a))
    return ForwardCurve(grid, values, form)


# -- module-level operations ------------------------------------------------------

def evaluate(h: ForwardCurve, x):
    """Point evaluation ``ev_x(h)``."""
    return h.evaluate(x)


def shift(h: ForwardCurve, t: float) -> ForwardCurve:
    """Shift semigroup ``S(t) h``."""
    return h.shift(t)


def derivative(h: ForwardCurve) -> ForwardCurve:
    """Generator ``A h = h'``."""
    return h.derivative()


def hw_norm(h: ForwardCurve) -> float:
    """Weighted norm ``sqrt(h(0)^2 + int |h'|^2 w)`` by trapezoid quadrature."""
    e = embed(h)
    return float(np.sqrt(e @ e))


def hjm_bilinear(f: ForwardCurve, g: ForwardCurve, method: str = "auto") -> ForwardCurve:
    """``S(f, g)(x) = f(x) * int_0^x g``.

    ``method="auto"`` is exact when both inputs carry descriptors and ``g``
    has an exact primitive, and uses cumulative trapezoid quadrature
    otherwise; ``"trapezoid"`` forces the grid path.  The value at ``x = 0``
    is exactly 0.
    """
    if f.grid != g.grid:
        raise GridMismatchError("hjm_bilinear: f and g live on different grids")
    if method not in ("auto", "trapezoid"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto" and f.closed_form is not None and g.closed_form is not None:
        G = g.closed_form.antiderivative()
        if G is not None:
            form = f.closed_form.multiply(G)
            vals = form.evaluate(f.grid.nodes)
            vals[0] = 0.0
            return ForwardCurve(f.grid, vals, form)
    G = cumulative_trapezoid(g.values, dx=g.grid.spacing, initial=0.0)
    vals = f.values * G
    vals[0] = 0.0
    return ForwardCurve(f.grid, vals)


def product_rule_residual(f: ForwardCurve, g: ForwardCurve) -> float:
    """Sup norm of ``A S(f, g) - S(Af, g) - S(f, Ag) - f g(0)`` on the samples.

    Both inputs are stripped of descriptors so the residual measures the
    grid discretization (trapezoid integrals and difference stencils).
    """
    f, g = f.sampled(), g.sampled()
    r = (hjm_bilinear(f, g).derivative() - hjm_bilinear(f.derivative(), g)
         - hjm_bilinear(f, g.derivative()) - f * float(g.values[0]))
    return r.sup_norm()


# -- embedding into R^{n+1} ---------------------------------------------------------

def embed(h: ForwardCurve, exact: bool = True) -> np.ndarray:
    """Vector ``(h(0), h'(x_i) * sqrt(q_i w(x_i)))`` whose Euclidean norm is ``hw_norm``.

    ``exact=False`` forces grid differences even when a descriptor exists,
    so sampled and analytic curves can be compared consistently.
    """
    d = h.derivative_values() if exact else fd_derivative(h.values, h.grid.spacing)
    return np.concatenate(([h.values[0]], d * h.grid.embedding_scale))


def embed_values(values: np.ndarray, grid: MaturityGrid) -> np.ndarray:
    """Embedding of raw sample arrays of shape ``(..., n)`` via grid differences."""
    v = np.asarray(values, dtype=float)
    d = fd_derivative(v, grid.spacing) * grid.embedding_scale
    return np.concatenate((v[..., :1], d), axis=-1)


def embedding_matrix(curves: Sequence[ForwardCurve], exact: bool | None = None) -> np.ndarray:
    """Columns are the embeddings of ``curves``.

    With ``exact=None`` analytic derivatives are used only if every curve has
    a descriptor, otherwise all curves use grid differences.
    """
    if exact is None:
        exact = all(c.closed_form is not None for c in curves)
    return np.column_stack([embed(c, exact) for c in curves])


def project(target: ForwardCurve, basis: Sequence[ForwardCurve], exact: bool | None = None):
    """Least-squares projection of ``target`` onto ``span(basis)`` in the embedded inner product.

    Returns
    -------
    coeffs : ndarray
    residual : float
        Norm of the orthogonal remainder.
    relative : float
        ``residual / ||target||`` (1.0 for an empty or zero basis, 0.0 when target is 0).
    """
    if exact is None:
        exact = all(c.closed_form is not None for c in (target, *basis))
    t = embed(target, exact)
    tn = float(np.linalg.norm(t))
    if len(basis) == 0:
        return np.zeros(0), tn, (0.0 if tn == 0 else 1.0)
    B = embedding_matrix(basis, exact)
    coeffs, *_ = np.linalg.lstsq(B, t, rcond=None)
    r = float(np.linalg.norm(t - B @ coeffs))
    if tn == 0:
        return coeffs, r, 0.0
    return coeffs, r, r / tn


# -- linear functionals ---------------------------------------------------------------

FUNCTIONAL_KINDS = ("point-evaluation", "benchmark-yield", "dual-basis")


def _interpolate(v: np.ndarray, grid: MaturityGrid, x: float) -> np.ndarray:
    """Node value at nodes, cubic Lagrange interpolation on four neighbours otherwise."""
    i = grid.node_index(x)
    if i is not None:
        return v[..., i]
    k = min(max(int(x / grid.spacing) - 1, 0), grid.n_points - 4)
    s = x / grid.spacing - k
    idx = np.arange(4)
    w = np.array([np.prod([(s - m) / (j - m) for m in idx if m != j]) for j in idx])
    return v[..., k:k + 4] @ w


@dataclass(frozen=True, eq=False)
class LinearFunctional:
    """``l(h) = sum_i weights[i] * e_i(h)`` where ``e_i`` is either the point
    evaluation at ``nodes[i]`` (kinds ``point-evaluation`` and ``dual-basis``)
    or the average yield ``(1/x_i) int_0^{x_i} h`` (kind ``benchmark-yield``).
    """

    nodes: tuple
    weights: tuple
    kind: str = "point-evaluation"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(float(x) for x in self.nodes))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.nodes) != len(self.weights):
            raise ValueError("nodes and weights must have the same length")
        if self.kind not in FUNCTIONAL_KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if any(x < 0 for x in self.nodes):
            raise DomainError("functional nodes must be >= 0")

    def _check_nodes(self, grid: MaturityGrid):
        if any(x > grid.x_max * (1 + 1e-12) for x in self.nodes):
            raise DomainError(f"functional node beyond x_max = {grid.x_max}")

    def __call__(self, h: ForwardCurve) -> float:
        return float(self.apply_values(h.values, h.grid))

    apply = __call__

    def apply_values(self, values: np.ndarray, grid: MaturityGrid) -> np.ndarray:
        """Apply to raw sample arrays of shape ``(..., n)``.

        Only linear rules on the samples are used (node values, four-point
        Lagrange interpolation between nodes, trapezoid integrals), so the
        result is exactly linear in the curve.
        """
        self._check_nodes(grid)
        v = np.asarray(values, dtype=float)
        out = np.zeros(v.shape[:-1])
        cum = None
        for x, w in zip(self.nodes, self.weights):
            if self.kind == "benchmark-yield" and x > 0:
                if cum is None:
                    cum = cumulative_trapezoid(v, dx=grid.spacing, initial=0.0, axis=-1)
                out = out + w * _interpolate(cum, grid, x) / x
            else:
                out = out + w * _interpolate(v, grid, x)
        return out

    def __repr__(self) -> str:
        return f"LinearFunctional(kind={self.kind!r}, nodes={self.nodes}, weights={self.weights})"


def point_evaluation(x: float) -> LinearFunctional:
    return LinearFunctional((x,), (1.0,), "point-evaluation")


def benchmark_yield(x: float) -> LinearFunctional:
    return LinearFunctional((x,), (1.0,), "benchmark-yield")


def build_functional(
    targets: Sequence[tuple[ForwardCurve, float]],
    candidate_nodes: Sequence[float],
    tol: float = 1e-10,
) -> LinearFunctional:
    """Minimum-norm point-evaluation functional with ``l(f_k) = c_k``.

    Raises
    ------
    ConstructionError
        When the constraint curves are linearly dependent at the nodes (the
        first dependent constraint is named) or a constraint is not reproduced.
    """
    nodes = [float(x) for x in candidate_nodes]
    if len(nodes) < len(targets):
        raise ConstructionError(f"{len(targets)} constraints need at least as many nodes, got {len(nodes)}")
    M = np.array([[float(_interpolate(f.values, f.grid, x)) for x in nodes] for f, _ in targets], dtype=float)
    c = np.array([v for _, v in targets], dtype=float)
    scale = np.max(np.abs(M)) if M.size else 1.0
    for k in range(1, len(targets) + 1):
        s = np.linalg.svd(M[:k], compute_uv=False)
        if s[-1] <= 1e-12 * max(scale, 1e-300):
            raise ConstructionError(
                f"constraint {k - 1} is linearly dependent on the preceding constraints at the candidate nodes",
                dependent_constraint=k - 1,
            )
    w, *_ = np.linalg.lstsq(M, c, rcond=None)
    res = M @ w - c
    if np.max(np.abs(res)) > tol * max(1.0, np.max(np.abs(c))):
        raise ConstructionError(f"constraint residual {np.max(np.abs(res)):.3e} exceeds {tol}")
    return LinearFunctional(tuple(nodes), tuple(w), "dual-basis")


# -- text I/O ---------------------------------------------------------------------------

def write_curve_csv(h: ForwardCurve, path) -> None:
    """Write ``x,value`` rows at full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "value"])
        for x, v in zip(h.grid.nodes, h.values):
            w.writerow([repr(float(x)), repr(float(v))])


def read_curve_csv(path, grid: MaturityGrid | None = None, weight_alpha: float = 4.0) -> ForwardCurve:
    """Read an ``x,value`` CSV; the grid is inferred when not given."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["x", "value"]:
        raise ConfigError(f"{path}: expected header 'x,value'", key="header")
    try:
        xs = np.array([float(r[0]) for r in rows[1:]])
        vs = np.array([float(r[1]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed row ({exc})") from exc
    if grid is None:
        grid = MaturityGrid(float(xs[-1]), len(xs), weight_alpha)
    if len(xs) != grid.n_points or not np.allclose(xs, grid.nodes, rtol=0, atol=1e-9 * grid.x_max):
        raise GridMismatchError(f"{path}: nodes do not match the grid")
    return ForwardCurve(grid, vs)


def format_terms(form: ExpPoly) -> list[str]:
    """``term = coeff, poly_degree, decay_lambda`` lines for a descriptor."""
    return [f"term = {c!r}, {k}, {lam!r}" for c, k, lam in form.terms]


def parse_terms(lines: Iterable[str]) -> ExpPoly:
    """Inverse of :func:`format_terms`; blank lines and ``#`` comments are skipped."""
    triples = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rhs = line.partition("=")
        if not sep or key.strip() != "term":
            raise ConfigError(f"expected 'term = coeff, poly_degree, decay_lambda', got {raw!r}", key=key.strip())
        parts = [p.strip() for p in rhs.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"term needs 3 fields, got {raw!r}", key="term")
        try:
            triples.append((float(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise ConfigError(f"bad term {raw!r}: {exc}", key="term") from exc
    return ExpPoly.from_terms(triples)
