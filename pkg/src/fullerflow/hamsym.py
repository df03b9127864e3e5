"""Symbolic polynomials in the Hamiltonian bracket generators h_D, Poisson
derivations, the Goh matrix, and the two recursive ladders of vanishing
functions: phi_l on states with invertible Goh matrix and the mu_r machine on
degenerate strata.

Generators
----------
A generator is either a bracket symbol ``('h', D)`` with ``D`` a multi-index
over {0, ..., 2m} (0 = drift), or an opaque word symbol ``('x', tag, word)``
used to track iterated Poisson derivations of a base function without
expanding it.  Bracket symbols are normally ordered: the innermost bracket
pair (the last two indices of D) is stored ascending, with the sign absorbed
into the coefficient, and h_{...aa} collapses to zero.

All rank and index-set decisions in the mu ladder are made numerically at a
frozen basepoint and recorded; the mu functions themselves stay symbolic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import skewalg
from .skewalg import SkewMatrix, even_rank, block_decompose, perfect_matchings
from .vecfield import ControlAffineSystem, MultiIndex, evaluate as vf_evaluate

__all__ = [
    "ExtremalState",
    "BracketPoly",
    "MuState",
    "KappaG",
    "BudgetExceededError",
    "GohSingularError",
    "FullRankGohError",
    "NumericalDegeneracyError",
    "StructureCertificateError",
    "DEFAULT_TERM_BUDGET",
    "h_eval",
    "Evaluator",
    "poisson_ad",
    "goh_matrix",
    "h0I",
    "phi0",
    "phi0_symbolic",
    "phi_sequence",
    "phi_symbolic",
    "structure_split",
    "singular_control",
    "kappa_g",
    "mu_sequence",
    "relh0_check",
    "sym_det",
    "sym_pfaffian",
    "sym_adj_pfaffian",
]

DEFAULT_TERM_BUDGET = 10**6

GenKey = tuple
Mono = tuple  # sorted tuple of GenKey


class BudgetExceededError(RuntimeError):
    """A symbolic result outgrew the configured term budget."""


class GohSingularError(ValueError):
    """Goh matrix numerically singular where invertibility is required."""


class FullRankGohError(ValueError):
    """Goh matrix has full rank; the degenerate-stratum machinery does not
    apply (use singular_control instead)."""


class NumericalDegeneracyError(RuntimeError):
    """No index set passed the invertibility tolerance at the basepoint."""


class StructureCertificateError(AssertionError):
    """A structural split failed its coefficient-scan certificate."""


@dataclass(frozen=True)
class ExtremalState:
    """Cotangent point (q, p) with p != 0."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError("q and p must be 1-d arrays of equal length")
        if not np.any(p != 0.0):
            raise ValueError("covector p must be nonzero")
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def dim(self) -> int:
        return self.q.shape[0]


# -- generator normalization -------------------------------------------------


def _norm_h(D: Sequence[int]) -> tuple[int, GenKey | None]:
    """Normalize an h-generator; returns (sign, key) or (0, None) if zero."""
    D = tuple(int(i) for i in D)
    if not D:
        raise ValueError("empty multi-index")
    if len(D) >= 2:
        a, b = D[-2], D[-1]
        if a == b:
            return 0, None
        if a > b:
            return -1, ("h", D[:-2] + (b, a))
    return 1, ("h", D)


def _prepend(i: int, gen: GenKey) -> tuple[int, GenKey | None]:
    if gen[0] == "h":
        return _norm_h((i,) + gen[1])
    if gen[0] == "x":
        return 1, ("x", gen[1], (i,) + gen[2])
    raise ValueError(f"unknown generator kind {gen[0]!r}")


class BracketPoly:
    """Polynomial with rational coefficients in bracket generators.

    Instances are immutable; all arithmetic returns new objects.  Trailing
    zero coefficients are pruned so equality is structural.
    """

    __slots__ = ("terms",)

    def __init__(self, terms: dict[Mono, Fraction] | None = None):
        clean = {}
        if terms:
            for mono, c in terms.items():
                if c != 0:
                    clean[mono] = c
        self.terms = clean

    # -- constructors --------------------------------------------------

    @classmethod
    def zero(cls) -> "BracketPoly":
        return cls()

    @classmethod
    def const(cls, c) -> "BracketPoly":
        c = Fraction(c)
        return cls({(): c}) if c != 0 else cls()

    @classmethod
    def h(cls, D: MultiIndex) -> "BracketPoly":
        sign, key = _norm_h(D)
        if sign == 0:
            return cls()
        return cls({(key,): Fraction(sign)})

    @classmethod
    def opaque(cls, tag: str, word: tuple[int, ...] = ()) -> "BracketPoly":
        return cls({(("x", tag, tuple(word)),): Fraction(1)})

    # -- structure -------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def term_count(self) -> int:
        return len(self.terms)

    def generators(self) -> set[GenKey]:
        out: set[GenKey] = set()
        for mono in self.terms:
            out.update(mono)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, BracketPoly):
            return NotImplemented
        return self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def __repr__(self):
        if not self.terms:
            return "BracketPoly(0)"
        bits = []
        for mono, c in sorted(self.terms.items())[:6]:
            names = "*".join(_gen_name(g) for g in mono) or "1"
            bits.append(f"{c}*{names}")
        more = "" if len(self.terms) <= 6 else f" ... ({len(self.terms)} terms)"
        return f"BracketPoly({' + '.join(bits)}{more})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other: "BracketPoly") -> "BracketPoly":
        if not isinstance(other, BracketPoly):
            return NotImplemented
        out = dict(self.terms)
        for mono, c in other.terms.items():
            out[mono] = out.get(mono, Fraction(0)) + c
        return BracketPoly(out)

    def __sub__(self, other: "BracketPoly") -> "BracketPoly":
        if not isinstance(other, BracketPoly):
            return NotImplemented
        out = dict(self.terms)
        for mono, c in other.terms.items():
            out[mono] = out.get(mono, Fraction(0)) - c
        return BracketPoly(out)

    def __neg__(self) -> "BracketPoly":
        return BracketPoly({m: -c for m, c in self.terms.items()})

    def scaled(self, c) -> "BracketPoly":
        c = Fraction(c)
        if c == 0:
            return BracketPoly()
        return BracketPoly({m: c * v for m, v in self.terms.items()})

    def __mul__(self, other: "BracketPoly") -> "BracketPoly":
        if not isinstance(other, BracketPoly):
            return NotImplemented
        budget = DEFAULT_TERM_BUDGET
        out: dict[Mono, Fraction] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                mono = tuple(sorted(m1 + m2))
                out[mono] = out.get(mono, Fraction(0)) + c1 * c2
            if len(out) > budget:
                raise BudgetExceededError(
                    f"product exceeds the term budget of {budget}"
                )
        return BracketPoly(out)

    def power(self, k: int) -> "BracketPoly":
        if k < 0:
            raise ValueError("negative power")
        out = BracketPoly.const(1)
        for _ in range(k):
            out = out * self
        return out

    # -- evaluation --------------------------------------------------------

    def evaluate(self, value_of: Callable[[GenKey], float]) -> float:
        total = 0.0
        for mono, c in self.terms.items():
            term = float(c)
            for g in mono:
                term *= value_of(g)
            total += term
        return total

    def compiled(self) -> "CompiledPoly":
        return CompiledPoly(self)


def _gen_name(g: GenKey) -> str:
    if g[0] == "h":
        return "h" + "".join(str(i) for i in g[1])
    return f"{g[1]}[{','.join(str(i) for i in g[2])}]"


class CompiledPoly:
    """Index-compiled form of a BracketPoly for fast repeated evaluation."""

    __slots__ = ("gens", "coefs", "idx")

    def __init__(self, poly: BracketPoly):
        gens = sorted(poly.generators())
        pos = {g: k for k, g in enumerate(gens)}
        pad = len(gens)  # virtual generator with value 1.0
        max_deg = max((len(m) for m in poly.terms), default=0)
        coefs = []
        idx = []
        for mono, c in sorted(poly.terms.items()):
            coefs.append(float(c))
            row = [pos[g] for g in mono] + [pad] * (max_deg - len(mono))
            idx.append(row)
        self.gens = gens
        self.coefs = np.array(coefs) if coefs else np.zeros(0)
        self.idx = (
            np.array(idx, dtype=int) if idx else np.zeros((0, max(max_deg, 1)), int)
        )

    def evaluate(self, value_of: Callable[[GenKey], float]) -> float:
        if self.coefs.size == 0:
            return 0.0
        vals = np.array([value_of(g) for g in self.gens] + [1.0])
        if self.idx.shape[1] == 0:
            return float(self.coefs.sum())
        return float(np.sum(self.coefs * np.prod(vals[self.idx], axis=1)))


def poisson_ad(i: int, P: BracketPoly) -> BracketPoly:
    """Leibniz derivation: on a generator h_D returns h_{iD}; opaque word
    symbols get the letter prepended to their word."""
    out: dict[Mono, Fraction] = {}
    for mono, c in P.terms.items():
        for k, g in enumerate(mono):
            sign, ng = _prepend(i, g)
            if sign == 0:
                continue
            new = tuple(sorted(mono[:k] + (ng,) + mono[k + 1 :]))
            out[new] = out.get(new, Fraction(0)) + c * sign
    return BracketPoly(out)


def ad_word(word: Sequence[int], base: BracketPoly) -> BracketPoly:
    """ad_{h_{w1}} o ... o ad_{h_{wn}} applied to base."""
    out = base
    for i in reversed(tuple(word)):
        out = poisson_ad(i, out)
    return out


# -- symbolic matrices (lists of lists of BracketPoly) ----------------------


def sym_det(rows: list[list[BracketPoly]]) -> BracketPoly:
    """Determinant by first-column cofactor expansion, skipping zero entries."""
    n = len(rows)
    if n == 0:
        return BracketPoly.const(1)
    if n == 1:
        return rows[0][0]
    total = BracketPoly.zero()
    for s in range(n):
        entry = rows[s][0]
        if entry.is_zero():
            continue
        minor = [r[1:] for k, r in enumerate(rows) if k != s]
        sub = sym_det(minor)
        term = entry * sub
        total = total + (term if s % 2 == 0 else -term)
    return total


def sym_pfaffian(rows: list[list[BracketPoly]]) -> BracketPoly:
    """Pfaffian of a symbolic skew matrix via the signed matching sum."""
    k = len(rows)
    if k == 0:
        return BracketPoly.const(1)
    total = BracketPoly.zero()
    for sign, pairs in perfect_matchings(k):
        term = BracketPoly.const(sign)
        for i, j in pairs:
            term = term * rows[i][j]
        total = total + term
    return total


def sym_adj_pfaffian(rows: list[list[BracketPoly]]) -> list[list[BracketPoly]]:
    """Symbolic adjoint Pfaffian, same sign convention as skewalg."""
    k = len(rows)
    out = [[BracketPoly.zero() for _ in range(k)] for _ in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            keep = [x for x in range(k) if x != i and x != j]
            minor = [[rows[a][b] for b in keep] for a in keep]
            val = sym_pfaffian(minor)
            if (i + j) % 2:
                val = -val
            out[i][j] = val
            out[j][i] = -val
    return out


def _sym_matvec_quadform(S, v):
    """<S v, v> for a symbolic matrix S and vector v."""
    total = BracketPoly.zero()
    n = len(v)
    for i in range(n):
        for j in range(n):
            if S[i][j].is_zero():
                continue
            total = total + S[i][j] * v[i] * v[j]
    return total


# -- numeric evaluation ------------------------------------------------------


def h_eval(sys: ControlAffineSystem, D: MultiIndex, lam: ExtremalState) -> float:
    """<p, f_D(q)> with f_D the iterated bracket field."""
    f = sys.bracket_field(tuple(D))
    return float(lam.p @ vf_evaluate(f, lam.q))


class Evaluator:
    """Caching valuation of h-generators at a fixed state."""

    def __init__(self, sys: ControlAffineSystem, lam: ExtremalState):
        self.sys = sys
        self.lam = lam
        self._cache: dict[GenKey, float] = {}

    def __call__(self, gen: GenKey) -> float:
        got = self._cache.get(gen)
        if got is not None:
            return got
        if gen[0] != "h":
            raise ValueError(f"cannot evaluate opaque symbol {gen!r}")
        val = h_eval(self.sys, gen[1], self.lam)
        self._cache[gen] = val
        return val

    def matrix(self, rows: list[list[BracketPoly]]) -> np.ndarray:
        return np.array([[p.evaluate(self) for p in row] for row in rows])


def goh_matrix(sys: ControlAffineSystem, lam: ExtremalState) -> SkewMatrix:
    """2m x 2m matrix of {h_i, h_j} = h_ij over the controlled indices."""
    m2 = 2 * sys.m
    upper = {}
    for i in range(m2):
        for j in range(i + 1, m2):
            upper[(i, j)] = h_eval(sys, (i + 1, j + 1), lam)
    return SkewMatrix.from_upper(m2, upper)


def h0I(sys: ControlAffineSystem, lam: ExtremalState) -> np.ndarray:
    """Vector (h_{0i})_{i=1..2m}."""
    return np.array([h_eval(sys, (0, i + 1), lam) for i in range(2 * sys.m)])


# -- the phi ladder ----------------------------------------------------------


def _goh_symbolic(m: int) -> list[list[BracketPoly]]:
    m2 = 2 * m
    return [
        [BracketPoly.h((s + 1, t + 1)) if s != t else BracketPoly.zero()
         for t in range(m2)]
        for s in range(m2)
    ]


def _h0I_symbolic(m: int) -> list[BracketPoly]:
    return [BracketPoly.h((0, i + 1)) for i in range(2 * m)]


def phi0(sys: ControlAffineSystem, lam: ExtremalState) -> float:
    """<S_H h_0I, h_0I> + det(H_II), with S_H = adjPf(H_II)^2 numeric."""
    H = goh_matrix(sys, lam)
    adj = skewalg.adj_pfaffian(H).data
    S_H = adj @ adj
    b = h0I(sys, lam)
    return float(b @ S_H @ b + np.linalg.det(H.data))


def phi0_symbolic(m: int) -> BracketPoly:
    H = _goh_symbolic(m)
    adj = sym_adj_pfaffian(H)
    m2 = 2 * m
    S_H = [
        [
            sum(
                (adj[i][k] * adj[k][j] for k in range(m2)),
                BracketPoly.zero(),
            )
            for j in range(m2)
        ]
        for i in range(m2)
    ]
    b = _h0I_symbolic(m)
    return _sym_matvec_quadform(S_H, b) + sym_det(H)


def _phi_step_matrix(
    m: int, phi: BracketPoly
) -> list[list[BracketPoly]]:
    """Phi_l: rows (h_0I | -H_II) stacked over ({h_0, phi}, {h_I, phi}^T)."""
    H = _goh_symbolic(m)
    b = _h0I_symbolic(m)
    m2 = 2 * m
    rows = [[b[s]] + [-H[s][t] for t in range(m2)] for s in range(m2)]
    rows.append([poisson_ad(0, phi)] + [poisson_ad(i + 1, phi) for i in range(m2)])
    return rows


def phi_symbolic(m: int, lmax: int) -> list[BracketPoly]:
    """Symbolic phi_0, ..., phi_lmax (practical for m = 1, lmax <= 4;
    guarded by the term budget)."""
    if lmax < 0:
        raise ValueError("lmax must be >= 0")
    phis = [phi0_symbolic(m)]
    for _ in range(lmax):
        phis.append(sym_det(_phi_step_matrix(m, phis[-1])))
    return phis


def phi_sequence(
    sys: ControlAffineSystem, lam: ExtremalState, lmax: int
) -> list[float]:
    """Numeric phi_0, ..., phi_lmax.

    Each step evaluates the Poisson brackets of the symbolic phi_l at lam and
    closes the recursion with a numeric determinant of the (2m+1) x (2m+1)
    matrix.
    """
    if lmax < 0:
        raise ValueError("lmax must be >= 0")
    m = sys.m
    ev = Evaluator(sys, lam)
    vals = [phi0(sys, lam)]
    if lmax == 0:
        return vals
    H = goh_matrix(sys, lam).data
    b = h0I(sys, lam)
    m2 = 2 * m
    top = np.hstack([b.reshape(-1, 1), -H])
    phis = phi_symbolic(m, lmax - 1)
    for phi in phis:
        last = np.array(
            [poisson_ad(0, phi).evaluate(ev)]
            + [poisson_ad(i + 1, phi).evaluate(ev) for i in range(m2)]
        )
        mat = np.vstack([top, last.reshape(1, -1)])
        vals.append(float(np.linalg.det(mat)))
    return vals


# -- structural split of phi_l ------------------------------------------------


def _coefficient_of(poly: BracketPoly, key: GenKey) -> tuple[BracketPoly, BracketPoly]:
    """Split poly = key * C + rest, requiring linearity in key.

    Returns (C, rest); raises StructureCertificateError if any monomial
    contains key with multiplicity >= 2.
    """
    coef: dict[Mono, Fraction] = {}
    rest: dict[Mono, Fraction] = {}
    for mono, c in poly.terms.items():
        mult = sum(1 for g in mono if g == key)
        if mult == 0:
            rest[mono] = c
        elif mult == 1:
            reduced = list(mono)
            reduced.remove(key)
            coef[tuple(reduced)] = coef.get(tuple(reduced), Fraction(0)) + c
        else:
            raise StructureCertificateError(
                f"monomial contains {key!r} with multiplicity {mult}"
            )
    return BracketPoly(coef), BracketPoly(rest)


def _expand_words(
    poly: BracketPoly, bases: dict[str, BracketPoly]
) -> BracketPoly:
    """Substitute every opaque symbol ('x', tag, word) by ad_word(base)."""
    cache: dict[GenKey, BracketPoly] = {}

    def expansion(g: GenKey) -> BracketPoly:
        got = cache.get(g)
        if got is None:
            got = ad_word(g[2], bases[g[1]])
            cache[g] = got
        return got

    total = BracketPoly.zero()
    for mono, c in poly.terms.items():
        term = BracketPoly.const(c)
        for g in mono:
            if g[0] == "x":
                term = term * expansion(g)
            else:
                term = term * BracketPoly({(g,): Fraction(1)})
        total = total + term
    return total


def structure_split(ell: int, m: int) -> tuple[BracketPoly, BracketPoly]:
    """Split phi_ell = ad_{h0}^ell(phi_0) * det(H_II)^ell + B_ell.

    The recursion is run with phi_0 kept opaque, so the certificate that the
    remainder carries no pure ad_{h0}^ell word is a direct coefficient scan:
    phi_ell must be linear in the word symbol 0^ell with coefficient exactly
    det(H_II)^ell.  Both summands are returned fully expanded in the h_D
    generators.
    """
    if ell < 0:
        raise ValueError("ell must be >= 0")
    phi0_raw = phi0_symbolic(m)
    det_sym = sym_det(_goh_symbolic(m))
    if ell == 0:
        return phi0_raw, BracketPoly.zero()
    word_phi = BracketPoly.opaque("phi0", ())
    for _ in range(ell):
        word_phi = sym_det(_phi_step_matrix(m, word_phi))
    key = ("x", "phi0", (0,) * ell)
    coef, rest = _coefficient_of(word_phi, key)
    if coef != det_sym.power(ell):
        raise StructureCertificateError(
            "coefficient of the pure ad_h0 word is not det(H_II)^ell"
        )
    for mono in rest.terms:
        if any(g == key for g in mono):
            raise StructureCertificateError("remainder contains the pure word")
    leading = ad_word((0,) * ell, phi0_raw) * det_sym.power(ell)
    B = _expand_words(rest, {"phi0": phi0_raw})
    return leading, B


# -- singular controls and the degenerate stratum -----------------------------


def singular_control(
    sys: ControlAffineSystem, lam: ExtremalState, tol: float = 1e-9
) -> tuple[np.ndarray, float, bool]:
    """u* = H_II^{-1} h_0I on singular arcs; feasible iff ||u*|| <= 1 + tol."""
    H = goh_matrix(sys, lam)
    det = float(np.linalg.det(H.data))
    if abs(det) <= tol:
        raise GohSingularError(f"|det H_II| = {abs(det):.3e} <= tol = {tol:.3e}")
    u = np.linalg.solve(H.data, h0I(sys, lam))
    norm = float(np.linalg.norm(u))
    return u, norm, norm <= 1.0 + tol


@dataclass(frozen=True)
class KappaG:
    """Symbolic kernel pairings and degeneracy relations at a basepoint with
    rank(H_II) = 2(m - a)."""

    a: int
    perm: tuple[int, ...]
    J0: tuple[int, ...]
    kappa: tuple[BracketPoly, ...]
    g: tuple[BracketPoly, ...]


def _permuted_goh_symbolic(m: int, perm: Sequence[int]) -> list[list[BracketPoly]]:
    m2 = 2 * m
    return [
        [
            BracketPoly.h((perm[s] + 1, perm[t] + 1)) if s != t else BracketPoly.zero()
            for t in range(m2)
        ]
        for s in range(m2)
    ]


def kappa_g(
    sys: ControlAffineSystem, lam: ExtremalState, tol: float = 1e-9
) -> KappaG:
    """Block-decompose H_II(lam), then build the kernel pairings kappa_i and
    the a(2a-1) degeneracy relations g_l as symbolic polynomials.

    The permutation and J0 are decided numerically at lam (lexicographically
    minimal invertible principal blocks) and frozen; when a = m the relation
    matrix degenerates to the Goh matrix itself.
    """
    m = sys.m
    m2 = 2 * m
    H = goh_matrix(sys, lam)
    rank = even_rank(H, tol)
    if rank == m2:
        raise FullRankGohError("Goh matrix has full rank at this state")
    a = m - rank // 2
    if rank > 0:
        dec = block_decompose(H, tol)
        perm = dec.permutation
        J0 = dec.J0
    else:
        perm = tuple(range(m2))
        J0 = ()
    r = rank
    Hp = _permuted_goh_symbolic(m, perm)
    A1 = [row[:r] for row in Hp[:r]]
    E = [row[r:] for row in Hp[:r]]
    F = [row[r:] for row in Hp[r:]]
    adj = sym_adj_pfaffian(A1)
    pf = sym_pfaffian(A1)
    h0p = [BracketPoly.h((0, perm[s] + 1)) for s in range(m2)]
    two_a = 2 * a
    kappa = []
    for i in range(two_a):
        top = []
        for s in range(r):
            acc = BracketPoly.zero()
            for t in range(r):
                if adj[s][t].is_zero() or E[t][i].is_zero():
                    continue
                acc = acc + adj[s][t] * E[t][i]
            top.append(-acc)
        k_i = BracketPoly.zero()
        for s in range(r):
            k_i = k_i + h0p[s] * top[s]
        k_i = k_i + h0p[r + i] * pf
        kappa.append(k_i)
    # G = E^T adjPf(A1) E + Pf(A1) F, skew of size 2a
    G = [[BracketPoly.zero() for _ in range(two_a)] for _ in range(two_a)]
    for s in range(two_a):
        for t in range(two_a):
            acc = BracketPoly.zero()
            for u in range(r):
                for v in range(r):
                    if adj[u][v].is_zero():
                        continue
                    acc = acc + E[u][s] * adj[u][v] * E[v][t]
            G[s][t] = acc + pf * F[s][t]
    g = []
    for s in range(two_a):
        for t in range(s + 1, two_a):
            g.append(G[s][t])
    return KappaG(a=a, perm=perm, J0=J0, kappa=tuple(kappa), g=tuple(g))


@dataclass
class MuState:
    """Frozen trace of the inductive mu ladder at a degenerate basepoint.

    rho, J, mu, S_hist, V_hist, Z_hist hold one entry per step 0..r; S, T, V,
    Z are the current matrices.  Branch decisions were made numerically at
    the basepoint with the recorded tolerance.
    """

    a: int
    basepoint: ExtremalState
    perm: tuple[int, ...]
    tol: float
    r: int
    rho: list[int]
    J: list[tuple[int, ...]]
    mu: list[BracketPoly]
    S: list[list[BracketPoly]]
    T: list[list[BracketPoly]]
    V: list[BracketPoly]
    Z: list[list[BracketPoly]]
    S_hist: list[list[list[BracketPoly]]]
    V_hist: list[list[BracketPoly]]
    Z_hist: list[list[list[BracketPoly]]]
    branches: list[str]
    flags: list[str]
    kappa: tuple[BracketPoly, ...]
    g: tuple[BracketPoly, ...]


def _numeric_rank(mat: np.ndarray, tol: float) -> int:
    if mat.size == 0:
        return 0
    sigma = np.linalg.svd(mat, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > tol * sigma[0]))


def _lexmin_columns(
    mat: np.ndarray, size: int, tol: float
) -> tuple[int, ...]:
    """Lexicographically minimal column set with invertible extraction."""
    ncols = mat.shape[1]
    for cand in itertools.combinations(range(ncols), size):
        if size == 0:
            return cand
        if abs(np.linalg.det(mat[:, cand])) > tol:
            return cand
    raise NumericalDegeneracyError(
        f"no {size}-column extraction above tolerance {tol}"
    )


def mu_sequence(
    sys: ControlAffineSystem,
    lambase: ExtremalState,
    rmax: int,
    tol: float = 1e-9,
) -> MuState:
    """Run the inductive mu ladder for rmax steps from a degenerate basepoint.

    All rank decisions are evaluated numerically at lambase and frozen; the
    mu functions stay symbolic.  rho_0 = 2(m - a), mu_0 = g_1; a rank
    increase consumes the next kappa, a stagnant step takes the determinant
    of the bordered extraction.  Ambiguous rank readings fall back to the
    stagnant branch with a diagnostic flag.
    """
    if rmax < 0:
        raise ValueError("rmax must be >= 0")
    kg = kappa_g(sys, lambase, tol)
    m2 = 2 * sys.m
    a = kg.a
    perm = kg.perm
    rho0 = m2 - 2 * a
    ev = Evaluator(sys, lambase)
    Hp = _permuted_goh_symbolic(sys.m, perm)
    S = [list(Hp[s]) for s in range(rho0)]
    V = [BracketPoly.h((0, perm[s] + 1)) for s in range(rho0)]
    J0 = tuple(range(rho0))
    Z = [[S[s][c] for c in J0] for s in range(rho0)]
    state = MuState(
        a=a,
        basepoint=lambase,
        perm=perm,
        tol=tol,
        r=0,
        rho=[rho0],
        J=[J0],
        mu=[kg.g[0]],
        S=S,
        T=[],
        V=V,
        Z=Z,
        S_hist=[S],
        V_hist=[V],
        Z_hist=[Z],
        branches=[],
        flags=[],
        kappa=kg.kappa,
        g=kg.g,
    )
    for r in range(rmax):
        mu_r = state.mu[r]
        rho_r = state.rho[r]
        last_row = [poisson_ad(0, mu_r)] + [
            poisson_ad(perm[t] + 1, mu_r) for t in range(m2)
        ]
        T = [row for row in state.S] + [last_row[1:]]
        state.T = T
        rank_T = _numeric_rank(ev.matrix(T), tol)
        if rank_T == rho_r + 1:
            state.branches.append("increase")
            S_new = T
            V_new = state.V + [last_row[0]]
            rho_new = rho_r + 1
            S_val = ev.matrix(S_new)
            J_new = _lexmin_columns(S_val, rho_new, tol)
            kappa_index = rho_new - rho0
            if kappa_index > 2 * a:
                raise NumericalDegeneracyError(
                    "kappa index out of range; rank bookkeeping is inconsistent"
                )
            mu_new = kg.kappa[kappa_index - 1]
            state.S = S_new
            state.V = V_new
            state.Z = [[S_new[s][c] for c in J_new] for s in range(rho_new)]
        else:
            if rank_T != rho_r:
                state.flags.append(
                    f"step {r}: ambiguous rank {rank_T} (expected {rho_r} or "
                    f"{rho_r + 1}); taking the stagnant branch"
                )
            state.branches.append("stagnant")
            rho_new = rho_r
            J_new = state.J[r]
            Z = state.Z
            rows = [
                [state.V[s]] + [Z[s][c] for c in range(rho_r)]
                for s in range(rho_r)
            ]
            rows.append(
                [last_row[0]] + [last_row[1 + c] for c in J_new]
            )
            mu_new = sym_det(rows)
        state.rho.append(rho_new)
        state.J.append(J_new)
        state.mu.append(mu_new)
        state.S_hist.append(state.S)
        state.V_hist.append(state.V)
        state.Z_hist.append(state.Z)
        state.r = r + 1
    return state


def relh0_check(
    sys: ControlAffineSystem,
    state: MuState,
    r: int,
    k: int,
    samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Check mu_{r+j} = (-1)^{rho_r j} ad_{h0}^j(mu_r) det(Z_r)^j + P_j on a
    stagnation plateau.

    The recursion is re-run with mu_r kept opaque; the certificate requires
    the coefficient of the pure word 0^j to be exactly the signed power of
    det(Z_r) and the remainder to be free of that word.  (The cofactor of the
    {h_0, mu} entry carries (-1)^{rho_r} per step, so the signed form is the
    one the determinant actually produces.)  Returns the maximum relative
    residual between the re-expanded split and the directly built mu_{r+j}
    over random evaluation states.
    """
    if not 0 <= r <= r + k <= state.r:
        raise ValueError("plateau window out of range")
    if any(state.rho[r + i] != state.rho[r] for i in range(k + 1)):
        raise ValueError("rho is not constant on the requested window")
    if r > 0 and state.rho[r - 1] >= state.rho[r]:
        raise ValueError("plateau must start at r = 0 or at a rank increase")
    rho_r = state.rho[r]
    V = state.V_hist[r]
    Z = state.Z_hist[r]
    det_Z = sym_det(Z)
    sign = -1 if rho_r % 2 else 1
    base = state.mu[r]
    perm = state.perm
    J_r = state.J[r]
    word = BracketPoly.opaque("mu", ())
    word_mus = [word]
    for _ in range(k):
        prev = word_mus[-1]
        rows = [[V[s]] + [Z[s][c] for c in range(rho_r)] for s in range(rho_r)]
        rows.append(
            [poisson_ad(0, prev)]
            + [poisson_ad(perm[c] + 1, prev) for c in J_r]
        )
        word_mus.append(sym_det(rows))
    splits = []
    for j in range(k + 1):
        key = ("x", "mu", (0,) * j) if j > 0 else None
        if j == 0:
            leading = base
            remainder = BracketPoly.zero()
        else:
            coef, rest = _coefficient_of(word_mus[j], key)
            expected = det_Z.power(j).scaled(sign**j)
            if coef != expected:
                raise StructureCertificateError(
                    f"step {j}: pure-word coefficient differs from "
                    f"(-1)^(rho*j) det(Z_r)^{j}"
                )
            for mono in rest.terms:
                if any(g == key for g in mono):
                    raise StructureCertificateError(
                        f"step {j}: remainder contains the pure word"
                    )
            leading = ad_word((0,) * j, base) * det_Z.power(j)
            leading = leading.scaled(sign**j)
            remainder = _expand_words(rest, {"mu": base})
        splits.append((leading, remainder))
    if rng is None:
        rng = np.random.default_rng(0)
    n = sys.n
    worst = 0.0
    for _ in range(samples):
        q = rng.normal(size=n)
        p = rng.normal(size=n)
        while not np.any(p):
            p = rng.normal(size=n)
        lam = ExtremalState(q, p)
        ev = Evaluator(sys, lam)
        for j in range(k + 1):
            direct = state.mu[r + j].evaluate(ev)
            leading, remainder = splits[j]
            split_val = leading.evaluate(ev) + remainder.evaluate(ev)
            worst = max(worst, abs(direct - split_val) / (1.0 + abs(direct)))
    return worst
