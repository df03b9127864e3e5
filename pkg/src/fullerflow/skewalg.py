"""Skew-symmetric matrix algebra: Pfaffian, adjoint Pfaffian, even rank,
principal-block permutation with lexicographically minimal index set, and
polynomial kernel bases.

Sign conventions (pinned once, validated by the test suite):

* ``Pf([[0, a], [-a, 0]]) = a`` with the standard signed perfect-matching sum.
* ``adj_pfaffian(A)[i, j] = (-1)**(i+j) * Pf(A with rows/cols i, j removed)``
  for i < j, which makes ``adj_pfaffian(A) @ A == pfaffian(A) * Id`` hold.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "SkewMatrix",
    "BlockDecomposition",
    "SkewalgError",
    "OddSizeError",
    "DegenerateMatrixError",
    "pfaffian",
    "adj_pfaffian",
    "even_rank",
    "block_decompose",
    "kernel_basis",
    "parskew_residual",
    "perfect_matchings",
    "random_skew",
    "random_skew_of_rank",
]


class SkewalgError(ValueError):
    pass


class OddSizeError(SkewalgError):
    """Pfaffian-type operations require even size."""


class DegenerateMatrixError(SkewalgError):
    """No invertible principal block exists (zero or ill-conditioned input)."""


@dataclass(frozen=True)
class SkewMatrix:
    """Numeric skew-symmetric matrix, stored dense; built from its strict
    upper triangle so skewness holds exactly."""

    size: int
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=float)
        if a.shape != (self.size, self.size):
            raise SkewalgError(f"data shape {a.shape} != ({self.size}, {self.size})")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @classmethod
    def from_upper(cls, size: int, upper) -> "SkewMatrix":
        """Build from the strict upper triangle.

        ``upper`` is either a dict ``{(i, j): value}`` with i < j, or a flat
        row-major sequence of length size*(size-1)//2.
        """
        a = np.zeros((size, size))
        if isinstance(upper, dict):
            for (i, j), v in upper.items():
                if not 0 <= i < j < size:
                    raise SkewalgError(f"upper-triangle index ({i}, {j}) invalid")
                a[i, j] = float(v)
        else:
            flat = list(upper)
            if len(flat) != size * (size - 1) // 2:
                raise SkewalgError(
                    f"expected {size * (size - 1) // 2} strict-upper entries, "
                    f"got {len(flat)}"
                )
            it = iter(flat)
            for i in range(size):
                for j in range(i + 1, size):
                    a[i, j] = float(next(it))
        a = a - a.T
        return cls(size, a)

    @classmethod
    def from_dense(cls, arr) -> "SkewMatrix":
        """Accept a dense array, checking skew-symmetry exactly."""
        a = np.asarray(arr, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise SkewalgError("square matrix required")
        if not np.array_equal(a, -a.T):
            raise SkewalgError("matrix is not exactly skew-symmetric")
        return cls(a.shape[0], a.copy())

    @property
    def dense(self) -> np.ndarray:
        return self.data.copy()

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __neg__(self) -> "SkewMatrix":
        return SkewMatrix(self.size, -self.data)


# -- Pfaffian ---------------------------------------------------------------

_MATCHING_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def perfect_matchings(k: int) -> list[tuple[int, list[tuple[int, int]]]]:
    """All perfect matchings of {0..k-1} with the Pfaffian sign of each."""
    if k % 2:
        raise OddSizeError(f"no perfect matchings of odd size {k}")
    out: list[tuple[int, list[tuple[int, int]]]] = []

    def rec(ids: list[int], sign: int, pairs: list[tuple[int, int]]):
        if not ids:
            out.append((sign, list(pairs)))
            return
        i0 = ids[0]
        for pos in range(1, len(ids)):
            j = ids[pos]
            pairs.append((i0, j))
            rest = ids[1:pos] + ids[pos + 1 :]
            rec(rest, sign * (-1) ** (pos - 1), pairs)
            pairs.pop()

    rec(list(range(k)), 1, [])
    return out


def _matching_arrays(k: int):
    """Vectorized matching table: (signs, row indices, col indices)."""
    cached = _MATCHING_CACHE.get(k)
    if cached is not None:
        return cached
    matchings = perfect_matchings(k)
    signs = np.array([s for s, _ in matchings], dtype=float)
    rows = np.array([[i for i, _ in pairs] for _, pairs in matchings])
    cols = np.array([[j for _, j in pairs] for _, pairs in matchings])
    _MATCHING_CACHE[k] = (signs, rows, cols)
    return signs, rows, cols


def _pf_expansion(a: np.ndarray, ids: tuple[int, ...], memo: dict) -> float:
    """Recursive first-row expansion with memoization on index subsets."""
    if not ids:
        return 1.0
    got = memo.get(ids)
    if got is not None:
        return got
    i0 = ids[0]
    total = 0.0
    for pos in range(1, len(ids)):
        j = ids[pos]
        if a[i0, j] == 0.0:
            continue
        rest = ids[1:pos] + ids[pos + 1 :]
        total += (-1) ** (pos - 1) * a[i0, j] * _pf_expansion(a, rest, memo)
    memo[ids] = total
    return total


def _pf_dense(a: np.ndarray) -> float:
    k = a.shape[0]
    if k == 0:
        return 1.0
    if k <= 8:
        signs, rows, cols = _matching_arrays(k)
        return float(np.sum(signs * np.prod(a[rows, cols], axis=1)))
    return _pf_expansion(a, tuple(range(k)), {})


def pfaffian(A: SkewMatrix) -> float:
    """Pfaffian: combinatorial matching sum up to size 8, memoized first-row
    expansion beyond; satisfies Pf(A)^2 = det(A)."""
    if A.size % 2:
        raise OddSizeError(f"Pfaffian undefined for odd size {A.size}")
    return _pf_dense(A.data)


def adj_pfaffian(A: SkewMatrix) -> SkewMatrix:
    """Adjoint Pfaffian: skew matrix with adj_pfaffian(A) @ A = Pf(A) * Id,
    entries homogeneous of degree m-1 in the entries of A."""
    if A.size % 2:
        raise OddSizeError(f"adjoint Pfaffian undefined for odd size {A.size}")
    k = A.size
    a = A.data
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            keep = [x for x in range(k) if x != i and x != j]
            out[i, j] = (-1) ** (i + j) * _pf_dense(a[np.ix_(keep, keep)])
    return SkewMatrix(k, out - out.T)


# -- rank and block structure ----------------------------------------------


def even_rank(A: SkewMatrix, tol: float = 1e-10) -> int:
    """Numeric rank via singular values (threshold tol * sigma_max), rounded
    down to the nearest even integer; an odd raw count is a floating-point
    artifact and triggers a RuntimeWarning."""
    if tol <= 0:
        raise SkewalgError("tol must be positive")
    if A.size == 0:
        return 0
    sigma = np.linalg.svd(A.data, compute_uv=False)
    if sigma[0] == 0.0:
        return 0
    raw = int(np.sum(sigma > tol * sigma[0]))
    if raw % 2:
        warnings.warn(
            f"odd raw rank {raw} for a skew matrix; rounding down",
            RuntimeWarning,
            stacklevel=2,
        )
        raw -= 1
    return raw


@dataclass(frozen=True)
class BlockDecomposition:
    """Permuted block form P^T A P = [[A1, A2], [-A2^T, A3]] with A1 the
    invertible principal block on the lexicographically minimal index set."""

    permutation: tuple[int, ...]
    m0: int
    A1: SkewMatrix
    A2: np.ndarray
    A3: SkewMatrix
    J0: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.permutation)

    @property
    def P(self) -> np.ndarray:
        k = self.size
        P = np.zeros((k, k))
        for newpos, orig in enumerate(self.permutation):
            P[orig, newpos] = 1.0
        return P

    @classmethod
    def rank_zero(cls, A: SkewMatrix) -> "BlockDecomposition":
        """Treat A as rank 0: empty A1, A3 = A.  Used for the corank-m Goh
        convention; block_decompose itself rejects the zero matrix."""
        k = A.size
        return cls(
            permutation=tuple(range(k)),
            m0=0,
            A1=SkewMatrix(0, np.zeros((0, 0))),
            A2=np.zeros((0, k)),
            A3=A,
            J0=(),
        )


def block_decompose(A: SkewMatrix, tol: float = 1e-10) -> BlockDecomposition:
    """Find rank 2*m0, the lexicographically minimal J0 of size 2*m0 whose
    principal submatrix has |Pf| > tol, and the permuted block form.

    The permutation lists J0 ascending, then its complement ascending.
    Indices are 0-based.
    """
    k = A.size
    rank = even_rank(A, tol)
    if rank == 0:
        raise DegenerateMatrixError(
            "matrix has numeric rank 0; no invertible principal block"
        )
    m0 = rank // 2
    a = A.data
    J0 = None
    for cand in itertools.combinations(range(k), 2 * m0):
        sub = a[np.ix_(cand, cand)]
        if abs(_pf_dense(sub)) > tol:
            J0 = cand
            break
    if J0 is None:
        raise DegenerateMatrixError(
            f"no principal {2 * m0}x{2 * m0} submatrix with |Pf| > {tol}"
        )
    complement = tuple(i for i in range(k) if i not in J0)
    perm = J0 + complement
    b = a[np.ix_(perm, perm)]
    r = 2 * m0
    return BlockDecomposition(
        permutation=perm,
        m0=m0,
        A1=SkewMatrix(r, b[:r, :r]),
        A2=b[:r, r:].copy(),
        A3=SkewMatrix(k - r, b[r:, r:]),
        J0=J0,
    )


def kernel_basis(A: SkewMatrix, dec: BlockDecomposition) -> list[np.ndarray]:
    """Kernel vectors v_i = P (-adjPf(A1) A2 e_i, Pf(A1) e_i); when
    rank(A) = 2*m0 each satisfies A v_i = 0, and the components are
    homogeneous polynomials of degree m0 in the entries of A."""
    if dec.size != A.size:
        raise SkewalgError("decomposition size does not match matrix")
    k = A.size
    r = 2 * dec.m0
    pf1 = _pf_dense(dec.A1.data)
    adj1 = adj_pfaffian(dec.A1).data
    P = dec.P
    out = []
    for i in range(k - r):
        e = np.zeros(k - r)
        e[i] = 1.0
        w = np.concatenate([-adj1 @ dec.A2 @ e, pf1 * e])
        out.append(P @ w)
    return out


def parskew_residual(dec: BlockDecomposition) -> float:
    """Frobenius norm of A2^T adjPf(A1) A2 + Pf(A1) A3 (the Pfaffian-cleared
    form of A2^T A1^{-1} A2 + A3 = 0); zero iff rank(A) = 2*m0."""
    pf1 = _pf_dense(dec.A1.data)
    adj1 = adj_pfaffian(dec.A1).data
    res = dec.A2.T @ adj1 @ dec.A2 + pf1 * dec.A3.data
    return float(np.linalg.norm(res))


# -- random ensembles (shared by tests and the identities CLI) --------------


def random_skew(rng: np.random.Generator, k: int) -> SkewMatrix:
    """Skew matrix with strict-upper entries uniform in [-1, 1]."""
    upper = rng.uniform(-1.0, 1.0, size=k * (k - 1) // 2)
    return SkewMatrix.from_upper(k, upper)


def random_skew_of_rank(
    rng: np.random.Generator, k: int, rank: int
) -> SkewMatrix:
    """Random skew matrix of exact rank 2*m0, built as a sum of m0 elementary
    skew outer products x y^T - y x^T."""
    if rank % 2 or rank > k:
        raise SkewalgError(f"rank {rank} must be even and at most {k}")
    a = np.zeros((k, k))
    for _ in range(rank // 2):
        x = rng.normal(size=k)
        y = rng.normal(size=k)
        a += np.outer(x, y) - np.outer(y, x)
    upper = {(i, j): a[i, j] for i in range(k) for j in range(i + 1, k)}
    return SkewMatrix.from_upper(k, upper)
