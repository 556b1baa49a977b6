"""Exact analytic descriptors carried alongside sampled curves.

Two descriptor kinds exist:

* :class:`ExpPoly` -- finite sums ``c * x**k * exp(-lam * x)``.  Closed under
  addition, multiplication, differentiation, right shifts and integration
  from 0, so every built-in model ingredient stays exact.
* :class:`SymbolicForm` -- a linear combination of sympy expressions in ``x``
  plus an :class:`ExpPoly` part (used for the CIR forward basis).  Each
  distinct expression is compiled and differentiated once and shared, so
  sums of many curves stay cheap.  Differentiation and shifts are exact;
  integration from 0 is attempted symbolically and callers fall back to
  quadrature when it fails.
"""

from __future__ import annotations

from math import comb, factorial
from typing import Iterable

import numpy as np
import sympy as sp

X = sp.Symbol("x", real=True)
CANCEL_MAX_OPS = 40


class ClosedForm:
    """Interface of an exact curve descriptor."""

    def evaluate(self, x):
        raise NotImplementedError

    def derivative(self) -> "ClosedForm":
        raise NotImplementedError

    def shift(self, t: float) -> "ClosedForm":
        raise NotImplementedError

    def scale(self, c: float) -> "ClosedForm":
        raise NotImplementedError

    def add(self, other: "ClosedForm") -> "ClosedForm":
        raise NotImplementedError

    def multiply(self, other: "ClosedForm") -> "ClosedForm | None":
        return None

    def antiderivative(self) -> "ClosedForm | None":
        return None

    def to_sympy(self) -> sp.Expr:
        raise NotImplementedError


def _key(k: int, lam: float) -> tuple[int, float]:
    lam = float(lam)
    return int(k), (0.0 if lam == 0.0 else lam)


class ExpPoly(ClosedForm):
    """Sum of terms ``coeff * x**degree * exp(-decay * x)``.

    Terms sharing ``(degree, decay)`` are merged.  The descriptor is
    immutable; all operations return new instances.
    """

    __slots__ = ("_terms",)

    def __init__(self, terms: dict[tuple[int, float], float] | None = None):
        self._terms = dict(terms or {})

    @classmethod
    def from_terms(cls, terms: Iterable[tuple[float, int, float]]) -> "ExpPoly":
        """Build from ``(coeff, poly_degree, decay_lambda)`` triples."""
        acc: dict[tuple[int, float], float] = {}
        for coeff, k, lam in terms:
            if int(k) < 0:
                raise ValueError(f"poly_degree must be >= 0, got {k}")
            key = _key(k, lam)
            acc[key] = acc.get(key, 0.0) + float(coeff)
        return cls(acc)

    @classmethod
    def constant(cls, c: float) -> "ExpPoly":
        return cls({(0, 0.0): float(c)})

    @classmethod
    def exponential(cls, decay: float, degree: int = 0, coeff: float = 1.0) -> "ExpPoly":
        return cls({_key(degree, decay): float(coeff)})

    @property
    def terms(self) -> list[tuple[float, int, float]]:
        """``(coeff, degree, decay)`` triples in a canonical order."""
        return [(c, k, lam) for (k, lam), c in sorted(self._terms.items(), key=lambda kv: (kv[0][1], kv[0][0]))]

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for (k, lam), c in self._terms.items():
            if c == 0.0:
                continue
            term = np.exp(-lam * x) if lam != 0.0 else np.ones_like(x)
            if k:
                term = term * x**k
            out = out + c * term
        return out

    def derivative(self) -> "ExpPoly":
        acc: dict[tuple[int, float], float] = {}
        for (k, lam), c in self._terms.items():
            if k:
                key = (k - 1, lam)
                acc[key] = acc.get(key, 0.0) + c * k
            if lam != 0.0:
                acc[(k, lam)] = acc.get((k, lam), 0.0) - c * lam
        return ExpPoly(acc)

    def shift(self, t: float) -> "ExpPoly":
        # (x + t)^k e^{-lam (x + t)} = e^{-lam t} sum_j C(k, j) t^{k-j} x^j e^{-lam x}
        t = float(t)
        acc: dict[tuple[int, float], float] = {}
        for (k, lam), c in self._terms.items():
            damp = np.exp(-lam * t) if lam != 0.0 else 1.0
            for j in range(k + 1):
                key = (j, lam)
                acc[key] = acc.get(key, 0.0) + c * damp * comb(k, j) * t ** (k - j)
        return ExpPoly(acc)

    def scale(self, c: float) -> "ExpPoly":
        c = float(c)
        return ExpPoly({key: c * v for key, v in self._terms.items()})

    def add(self, other: ClosedForm) -> ClosedForm:
        if isinstance(other, ExpPoly):
            acc = dict(self._terms)
            for key, v in other._terms.items():
                acc[key] = acc.get(key, 0.0) + v
            return ExpPoly(acc)
        return other.add(self)

    def multiply(self, other: ClosedForm) -> ClosedForm | None:
        if isinstance(other, ExpPoly):
            acc: dict[tuple[int, float], float] = {}
            for (k1, l1), c1 in self._terms.items():
                for (k2, l2), c2 in other._terms.items():
                    key = _key(k1 + k2, l1 + l2)
                    acc[key] = acc.get(key, 0.0) + c1 * c2
            return ExpPoly(acc)
        return other.multiply(self)

    def antiderivative(self) -> "ExpPoly":
        """Exact ``x -> int_0^x`` of the form."""
        acc: dict[tuple[int, float], float] = {}

        def put(key, v):
            acc[key] = acc.get(key, 0.0) + v

        for (k, lam), c in self._terms.items():
            if lam == 0.0:
                put((k + 1, 0.0), c / (k + 1))
                continue
            # int_0^x s^k e^{-lam s} ds = k!/lam^{k+1} - e^{-lam x} sum_j k!/(j! lam^{k-j+1}) x^j
            base = factorial(k) / lam ** (k + 1)
            put((0, 0.0), c * base)
            for j in range(k + 1):
                put((j, lam), -c * factorial(k) / (factorial(j) * lam ** (k - j + 1)))
        return ExpPoly(acc)

    def to_sympy(self) -> sp.Expr:
        expr = sp.Integer(0)
        for c, k, lam in self.terms:
            expr += sp.Float(c) * X**k * sp.exp(-sp.Float(lam) * X)
        return expr

    def __repr__(self) -> str:
        return f"ExpPoly({self.terms})"

    def __eq__(self, other) -> bool:
        return isinstance(other, ExpPoly) and self.terms == other.terms

    __hash__ = None


class _Atom:
    """One sympy expression with its compiled evaluator, derivative and primitive."""

    __slots__ = ("expr", "_fn", "_d", "_anti")

    def __init__(self, expr: sp.Expr):
        self.expr = expr
        self._fn = None
        self._d = None
        self._anti = False

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if self._fn is None:
            self._fn = sp.lambdify(X, self.expr, "numpy")
        return np.broadcast_to(np.asarray(self._fn(x), dtype=float), x.shape)

    def derivative(self) -> sp.Expr:
        if self._d is None:
            d = sp.diff(self.expr, X)
            # a single cancelled fraction avoids catastrophic cancellation for large x;
            # skipped for large expressions where cancel dominates the run time
            if sp.count_ops(d) <= CANCEL_MAX_OPS:
                d = sp.cancel(sp.together(d))
            self._d = d
        return self._d

    def antiderivative(self) -> sp.Expr | None:
        if self._anti is False:
            F = sp.integrate(self.expr, X)
            if F.has(sp.Integral) or F.has(sp.Piecewise):
                self._anti = None
            else:
                self._anti = sp.cancel(sp.together(F - F.subs(X, 0)))
        return self._anti


_ATOMS: dict = {}


def _atom(expr: sp.Expr) -> _Atom:
    a = _ATOMS.get(expr)
    if a is None:
        a = _ATOMS[expr] = _Atom(expr)
    return a


class SymbolicForm(ClosedForm):
    """``poly(x) + sum_i c_i f_i(x)`` with sympy expressions ``f_i`` in ``x``."""

    __slots__ = ("atoms", "poly")

    def __init__(self, expr: sp.Expr | None = None, atoms: dict | None = None, poly: ExpPoly | None = None):
        self.atoms = dict(atoms or {})
        self.poly = poly if poly is not None else ExpPoly()
        if expr is not None:
            e = sp.sympify(expr)
            self.atoms[e] = self.atoms.get(e, 0.0) + 1.0
        self.atoms = {e: c for e, c in self.atoms.items() if c != 0.0}

    @property
    def expr(self) -> sp.Expr:
        return self.to_sympy()

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        out = np.array(self.poly.evaluate(x), dtype=float)
        for e, c in self.atoms.items():
            out = out + c * _atom(e).evaluate(x)
        return out

    def _combine(self, pairs, poly: ExpPoly) -> "SymbolicForm":
        acc: dict = {}
        for e, c in pairs:
            acc[e] = acc.get(e, 0.0) + c
        return SymbolicForm(atoms=acc, poly=poly)

    def derivative(self) -> "SymbolicForm":
        return self._combine(((_atom(e).derivative(), c) for e, c in self.atoms.items()), self.poly.derivative())

    def shift(self, t: float) -> "SymbolicForm":
        tt = sp.Float(float(t))
        return self._combine(((e.subs(X, X + tt), c) for e, c in self.atoms.items()), self.poly.shift(t))

    def scale(self, c: float) -> "SymbolicForm":
        c = float(c)
        return SymbolicForm(atoms={e: c * v for e, v in self.atoms.items()}, poly=self.poly.scale(c))

    def add(self, other: ClosedForm) -> "SymbolicForm":
        if isinstance(other, ExpPoly):
            return SymbolicForm(atoms=self.atoms, poly=self.poly.add(other))
        if isinstance(other, SymbolicForm):
            return self._combine(list(self.atoms.items()) + list(other.atoms.items()), self.poly.add(other.poly))
        return self._combine(list(self.atoms.items()) + [(other.to_sympy(), 1.0)], self.poly)

    def multiply(self, other: ClosedForm) -> "SymbolicForm":
        if isinstance(other, ExpPoly):
            other = SymbolicForm(poly=other)
        elif not isinstance(other, SymbolicForm):
            other = SymbolicForm(other.to_sympy())
        P, Q = self.poly.to_sympy(), other.poly.to_sympy()
        pairs = []
        for e, c in self.atoms.items():
            if Q != 0:
                pairs.append((e * Q, c))
            for f, d in other.atoms.items():
                pairs.append((e * f, c * d))
        if P != 0:
            pairs.extend((P * f, d) for f, d in other.atoms.items())
        return self._combine(pairs, self.poly.multiply(other.poly))

    def antiderivative(self) -> "SymbolicForm | None":
        """``x -> int_0^x`` when sympy finds elementary primitives, else None."""
        pairs = []
        for e, c in self.atoms.items():
            F = _atom(e).antiderivative()
            if F is None:
                return None
            pairs.append((F, c))
        return self._combine(pairs, self.poly.antiderivative())

    def to_sympy(self) -> sp.Expr:
        expr = self.poly.to_sympy()
        for e, c in self.atoms.items():
            expr += sp.Float(c) * e
        return expr

    def __repr__(self) -> str:
        return f"SymbolicForm({self.to_sympy()})"
