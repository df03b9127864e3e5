"""Polynomial vector fields on R^n and control-affine frames.

A vector field is stored componentwise as a list of monomials with exact
rational coefficients (floats are converted exactly via ``Fraction``), so
Lie brackets, Jacobians and iterated brackets are computed without rounding.
Evaluation at a floating-point position returns floats.

The bracket convention used throughout the package is

    [f, g] = Dg . f - Df . g

which pairs with the Poisson convention {h_a, h_b} = h_ab used in
:mod:`fullerflow.hamsym`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Monomial",
    "PolyVectorField",
    "ControlAffineSystem",
    "MultiIndex",
    "DimensionMismatchError",
    "evaluate",
    "jacobian",
    "lie_bracket",
    "iterated_bracket",
    "frame_independent",
    "system_to_jsonable",
    "system_from_jsonable",
]

# A multi-index over {0, ..., 2m}; entry 0 refers to the drift field.
MultiIndex = tuple[int, ...]

# Internal exact polynomial table: exponent tuple -> coefficient.
_Table = dict[tuple[int, ...], Fraction]


class DimensionMismatchError(ValueError):
    """Raised when operands live on spaces of different dimension."""


def _frac(x: int | float | str | Fraction) -> Fraction:
    if isinstance(x, Fraction):
        return x
    return Fraction(x)


@dataclass(frozen=True)
class Monomial:
    """A single term ``coefficient * q^exponents`` of one field component."""

    coefficient: Fraction
    exponents: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "coefficient", _frac(self.coefficient))
        object.__setattr__(self, "exponents", tuple(int(e) for e in self.exponents))
        if any(e < 0 for e in self.exponents):
            raise ValueError("monomial exponents must be non-negative")


def _table_of(monomials: Iterable[Monomial]) -> _Table:
    out: _Table = {}
    for mono in monomials:
        out[mono.exponents] = out.get(mono.exponents, Fraction(0)) + mono.coefficient
    return {e: c for e, c in out.items() if c != 0}


def _monomials_of(table: _Table) -> tuple[Monomial, ...]:
    return tuple(Monomial(c, e) for e, c in sorted(table.items()))


def _tab_add(a: _Table, b: _Table) -> _Table:
    out = dict(a)
    for e, c in b.items():
        out[e] = out.get(e, Fraction(0)) + c
    return {e: c for e, c in out.items() if c != 0}


def _tab_mul(a: _Table, b: _Table) -> _Table:
    out: _Table = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, Fraction(0)) + ca * cb
    return {e: c for e, c in out.items() if c != 0}


def _tab_diff(a: _Table, j: int) -> _Table:
    """Exact formal derivative of a polynomial table with respect to q_j."""
    out: _Table = {}
    for e, c in a.items():
        if e[j] == 0:
            continue
        de = list(e)
        de[j] -= 1
        out[tuple(de)] = out.get(tuple(de), Fraction(0)) + c * e[j]
    return out


def _tab_eval(a: _Table, q: np.ndarray) -> float:
    total = 0.0
    for e, c in a.items():
        term = float(c)
        for qi, ei in zip(q, e):
            if ei:
                term *= qi ** ei
        total += term
    return total


@dataclass(frozen=True)
class PolyVectorField:
    """Polynomial vector field on R^n with exact coefficients."""

    dim: int
    components: tuple[tuple[Monomial, ...], ...]

    def __post_init__(self):
        if len(self.components) != self.dim:
            raise DimensionMismatchError(
                f"{len(self.components)} components for dimension {self.dim}"
            )
        normalized = []
        for comp in self.components:
            for mono in comp:
                if len(mono.exponents) != self.dim:
                    raise DimensionMismatchError(
                        f"exponent tuple {mono.exponents} has length "
                        f"{len(mono.exponents)}, expected {self.dim}"
                    )
            normalized.append(_monomials_of(_table_of(comp)))
        object.__setattr__(self, "components", tuple(normalized))

    # -- constructors -------------------------------------------------

    @classmethod
    def from_tables(cls, dim: int, tables: Sequence[_Table]) -> "PolyVectorField":
        return cls(dim, tuple(_monomials_of(t) for t in tables))

    @classmethod
    def from_terms(
        cls, dim: int, terms: Sequence[Sequence[tuple]]
    ) -> "PolyVectorField":
        """Build from ``[(coef, exponents), ...]`` per component."""
        comps = []
        for comp in terms:
            comps.append(tuple(Monomial(_frac(c), tuple(e)) for c, e in comp))
        return cls(dim, tuple(comps))

    @classmethod
    def constant(cls, values: Sequence) -> "PolyVectorField":
        dim = len(values)
        zero = (0,) * dim
        comps = []
        for v in values:
            f = _frac(v)
            comps.append((Monomial(f, zero),) if f != 0 else ())
        return cls(dim, tuple(comps))

    @classmethod
    def zero(cls, dim: int) -> "PolyVectorField":
        return cls(dim, tuple(() for _ in range(dim)))

    # -- views ---------------------------------------------------------

    def tables(self) -> list[_Table]:
        return [_table_of(comp) for comp in self.components]

    def is_zero(self) -> bool:
        return all(len(comp) == 0 for comp in self.components)

    def max_degree(self) -> int:
        deg = 0
        for comp in self.components:
            for mono in comp:
                deg = max(deg, sum(mono.exponents))
        return deg


def evaluate(f: PolyVectorField, q: Sequence[float]) -> np.ndarray:
    """Evaluate the field at a point, exactly substituting each monomial."""
    q = np.asarray(q, dtype=float)
    if q.shape != (f.dim,):
        raise DimensionMismatchError(f"point of shape {q.shape} for dim {f.dim}")
    return np.array([_tab_eval(_table_of(c), q) for c in f.components])


def jacobian(f: PolyVectorField, q: Sequence[float]) -> np.ndarray:
    """Jacobian matrix at q: entry (i, j) is d f_i / d q_j, formally derived."""
    q = np.asarray(q, dtype=float)
    if q.shape != (f.dim,):
        raise DimensionMismatchError(f"point of shape {q.shape} for dim {f.dim}")
    out = np.zeros((f.dim, f.dim))
    for i, comp in enumerate(f.components):
        tab = _table_of(comp)
        for j in range(f.dim):
            out[i, j] = _tab_eval(_tab_diff(tab, j), q)
    return out


def lie_bracket(f: PolyVectorField, g: PolyVectorField) -> PolyVectorField:
    """Exact Lie bracket [f, g] = Dg.f - Df.g."""
    if f.dim != g.dim:
        raise DimensionMismatchError(f"dims {f.dim} and {g.dim}")
    n = f.dim
    ft = f.tables()
    gt = g.tables()
    comps = []
    for k in range(n):
        acc: _Table = {}
        for j in range(n):
            acc = _tab_add(acc, _tab_mul(_tab_diff(gt[k], j), ft[j]))
            acc = _tab_add(
                acc, {e: -c for e, c in _tab_mul(_tab_diff(ft[k], j), gt[j]).items()}
            )
        comps.append(acc)
    return PolyVectorField.from_tables(n, comps)


@dataclass(frozen=True)
class ControlAffineSystem:
    """Frame (f_0, ..., f_2m) on R^n; index 0 is the drift."""

    n: int
    m: int
    fields: tuple[PolyVectorField, ...]
    _bracket_cache: dict = field(
        default_factory=dict, repr=False, compare=False, hash=False
    )

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if 2 * self.m + 1 > self.n:
            raise ValueError(f"need 2m+1 <= n, got m={self.m}, n={self.n}")
        if len(self.fields) != 2 * self.m + 1:
            raise ValueError(
                f"expected {2 * self.m + 1} fields, got {len(self.fields)}"
            )
        for f in self.fields:
            if f.dim != self.n:
                raise DimensionMismatchError(
                    f"field of dimension {f.dim} in a system on R^{self.n}"
                )

    @property
    def drift(self) -> PolyVectorField:
        return self.fields[0]

    @property
    def controlled(self) -> tuple[PolyVectorField, ...]:
        return self.fields[1:]

    def check_index(self, i: int) -> None:
        if not 0 <= i <= 2 * self.m:
            raise IndexError(f"field index {i} out of range 0..{2 * self.m}")

    def bracket_field(self, D: MultiIndex) -> PolyVectorField:
        """Right-nested iterated bracket f_D, cached per multi-index."""
        D = tuple(int(i) for i in D)
        if not D:
            raise ValueError("multi-index must be nonempty")
        for i in D:
            self.check_index(i)
        cached = self._bracket_cache.get(D)
        if cached is not None:
            return cached
        if len(D) == 1:
            out = self.fields[D[0]]
        else:
            out = lie_bracket(self.fields[D[0]], self.bracket_field(D[1:]))
        self._bracket_cache[D] = out
        return out


def iterated_bracket(sys: ControlAffineSystem, D: MultiIndex) -> PolyVectorField:
    """f_D = [f_{i1}, [... [f_{i_{k-1}}, f_{i_k}] ...]]; |D| = 1 gives f_{i1}."""
    return sys.bracket_field(tuple(D))


def frame_independent(
    sys: ControlAffineSystem, q: Sequence[float], tol: float = 1e-10
) -> bool:
    """True iff the frame values at q have full row rank 2m+1.

    Rank is decided by counting singular values above tol times the largest
    one; degenerate input simply returns False.
    """
    rows = np.array([evaluate(f, q) for f in sys.fields])
    sigma = np.linalg.svd(rows, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return False
    return int(np.sum(sigma > tol * sigma[0])) == 2 * sys.m + 1


# -- JSON wire format ------------------------------------------------------


def _coef_to_jsonable(c: Fraction):
    if c.denominator == 1:
        return int(c)
    as_float = float(c)
    if Fraction(as_float) == c:
        return as_float
    return f"{c.numerator}/{c.denominator}"


def system_to_jsonable(sys: ControlAffineSystem) -> dict:
    """``{"n":, "m":, "fields": [[[{"coef":, "exp":}, ...] x n] x (2m+1)]}``."""
    return {
        "n": sys.n,
        "m": sys.m,
        "fields": [
            [
                [
                    {"coef": _coef_to_jsonable(mono.coefficient),
                     "exp": list(mono.exponents)}
                    for mono in comp
                ]
                for comp in f.components
            ]
            for f in sys.fields
        ],
    }


def system_from_jsonable(obj: dict) -> ControlAffineSystem:
    n = int(obj["n"])
    m = int(obj["m"])
    fields = []
    for f in obj["fields"]:
        comps = []
        for comp in f:
            comps.append(
                tuple(Monomial(_frac(t["coef"]), tuple(t["exp"])) for t in comp)
            )
        fields.append(PolyVectorField(n, tuple(comps)))
    return ControlAffineSystem(n, m, tuple(fields))
