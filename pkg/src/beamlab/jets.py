"""Truncated multivariate polynomial jets.

A `Jet` is a polynomial in `nvars` variables truncated at total degree `degree`,
with coefficients stored in a fixed graded monomial order along the last axis of
`coeffs`. Every leading axis is a batch axis (nodes along a geodesic, matrix
indices, lattice points) and broadcasts like numpy.

    >>> x, y = Jet.variable(0, 2, 3), Jet.variable(1, 2, 3)
    >>> ((1 + x) * (1 + y)).part(2)   # coefficients of x^2, xy, y^2
    array([0., 1., 0.])

Products drop every term above `degree`, so the arithmetic is exact for the
coefficients it keeps. Beam phases, amplitudes and chart metrics are all carried
as jets in the transverse variables, with one jet per node of the s grid.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Self

import numpy as np
from scipy.interpolate import CubicSpline

from beamlab.lib.errors import InvalidInputError
from beamlab.lib.types import FieldArray, RealArray


@dataclass(frozen=True)
class MonomialBasis:
    """Graded monomial order for (nvars, degree) with the lookup tables jets need"""

    nvars: int
    degree: int
    exponents: np.ndarray
    """(M, nvars) exponent table, graded by total degree"""
    index: dict[tuple[int, ...], int]
    degree_slices: tuple[slice, ...]
    mul_left: np.ndarray
    mul_right: np.ndarray
    mul_starts: np.ndarray
    diff_tables: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]

    @property
    def size(self) -> int:
        return len(self.exponents)


def _homogeneous_exponents(nvars: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for combo in combinations_with_replacement(range(nvars), degree):
        exps = [0] * nvars
        for var in combo:
            exps[var] += 1
        out.append(tuple(exps))
    return out


@lru_cache(maxsize=None)
def basis(nvars: int, degree: int) -> MonomialBasis:
    """Monomial tables, built once per (nvars, degree)"""
    if nvars < 1 or degree < 0:
        raise InvalidInputError(f"bad jet shape ({nvars}, {degree})")

    exponents: list[tuple[int, ...]] = []
    slices = []
    for d in range(degree + 1):
        start = len(exponents)
        exponents.extend(_homogeneous_exponents(nvars, d))
        slices.append(slice(start, len(exponents)))
    index = {exps: i for i, exps in enumerate(exponents)}
    table = np.array(exponents, dtype=int).reshape(len(exponents), nvars)

    left, right, target = [], [], []
    totals = table.sum(axis=1)
    for i, a in enumerate(exponents):
        for j, b in enumerate(exponents):
            if totals[i] + totals[j] > degree:
                # graded order: every later j is at least as high
                break
            left.append(i)
            right.append(j)
            target.append(index[tuple(x + y for x, y in zip(a, b))])
    left_arr, right_arr, target_arr = np.array(left), np.array(right), np.array(target)
    order = np.argsort(target_arr, kind="stable")
    left_arr, right_arr, target_arr = left_arr[order], right_arr[order], target_arr[order]
    starts = np.searchsorted(target_arr, np.arange(len(exponents)))

    diffs = []
    for var in range(nvars):
        source, dest, factor = [], [], []
        for i, a in enumerate(exponents):
            if a[var] == 0:
                continue
            lowered = list(a)
            lowered[var] -= 1
            source.append(i)
            dest.append(index[tuple(lowered)])
            factor.append(a[var])
        diffs.append((np.array(source, dtype=int), np.array(dest, dtype=int), np.array(factor, dtype=float)))

    return MonomialBasis(
        nvars=nvars,
        degree=degree,
        exponents=table,
        index=index,
        degree_slices=tuple(slices),
        mul_left=left_arr,
        mul_right=right_arr,
        mul_starts=starts,
        diff_tables=tuple(diffs),
    )


def _batch_index(item) -> tuple:
    """Index the batch axes only; the coefficient axis is always kept whole"""
    if not isinstance(item, tuple):
        item = (item,)
    if any(part is Ellipsis for part in item):
        return (*item, slice(None))
    return (*item, Ellipsis, slice(None))


def monomial_values(points: RealArray, nvars: int, degree: int) -> np.ndarray:
    """Every monomial of the basis evaluated at `points` (..., nvars) -> (..., M)"""
    points = np.asarray(points)
    exps = basis(nvars, degree).exponents
    return np.prod(points[..., None, :] ** exps, axis=-1)


class Jet:
    """A batch of truncated polynomials sharing one monomial basis"""

    __slots__ = ("nvars", "degree", "coeffs")

    def __init__(self, coeffs: FieldArray, nvars: int, degree: int):
        coeffs = np.asarray(coeffs)
        size = basis(nvars, degree).size
        if coeffs.shape[-1:] != (size,):
            raise InvalidInputError(f"expected {size} coefficients, got shape {coeffs.shape}")
        self.nvars = nvars
        self.degree = degree
        self.coeffs = coeffs

    # construction

    @classmethod
    def zeros(cls, nvars: int, degree: int, shape: tuple[int, ...] = (), dtype=float) -> Self:
        return cls(np.zeros((*shape, basis(nvars, degree).size), dtype=dtype), nvars, degree)

    @classmethod
    def constant(cls, value: FieldArray | float, nvars: int, degree: int) -> Self:
        value = np.asarray(value)
        out = cls.zeros(nvars, degree, value.shape, np.result_type(value, float))
        out.coeffs[..., 0] = value
        return out

    @classmethod
    def variable(cls, var: int, nvars: int, degree: int) -> Self:
        out = cls.zeros(nvars, degree)
        if degree >= 1:
            exps = [0] * nvars
            exps[var] = 1
            out.coeffs[basis(nvars, degree).index[tuple(exps)]] = 1.0
        return out

    @classmethod
    def linear(cls, matrix: FieldArray, nvars: int, degree: int) -> Self:
        """Jets of the linear maps z -> matrix[..., :] . z"""
        matrix = np.asarray(matrix)
        out = cls.zeros(nvars, degree, matrix.shape[:-1], matrix.dtype)
        if degree >= 1:
            out.coeffs[..., basis(nvars, degree).degree_slices[1]] = matrix
        return out

    @classmethod
    def stack(cls, jets: Sequence["Jet"], axis: int = 0) -> Self:
        first = jets[0]
        if axis < 0:
            axis -= 1
        coeffs = np.stack([np.broadcast_to(j.coeffs, np.broadcast_shapes(*[k.coeffs.shape for k in jets])) for j in jets], axis=axis)
        return cls(coeffs, first.nvars, first.degree)

    # shape

    @property
    def basis(self) -> MonomialBasis:
        return basis(self.nvars, self.degree)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.coeffs.shape[:-1]

    @property
    def dtype(self):
        return self.coeffs.dtype

    def __getitem__(self, item) -> "Jet":
        return Jet(self.coeffs[_batch_index(item)], self.nvars, self.degree)

    def __setitem__(self, item, value: "Jet") -> None:
        self.coeffs[_batch_index(item)] = value.coeffs

    def sum(self, axis: int | tuple[int, ...]) -> "Jet":
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a - 1 if a < 0 else a for a in axes)
        return Jet(self.coeffs.sum(axis=axes), self.nvars, self.degree)

    def expand(self, axis: int) -> "Jet":
        """Insert a length-one batch axis"""
        if axis < 0:
            axis -= 1
        return Jet(np.expand_dims(self.coeffs, axis), self.nvars, self.degree)

    def copy(self) -> "Jet":
        return Jet(self.coeffs.copy(), self.nvars, self.degree)

    def astype(self, dtype) -> "Jet":
        return Jet(self.coeffs.astype(dtype), self.nvars, self.degree)

    # degree bookkeeping

    def part(self, degree: int) -> np.ndarray:
        """Coefficients of the homogeneous part of the given degree"""
        if degree > self.degree:
            shape = (*self.shape, len(_homogeneous_exponents(self.nvars, degree)))
            return np.zeros(shape, dtype=self.dtype)
        return self.coeffs[..., self.basis.degree_slices[degree]]

    def homogeneous(self, degree: int) -> "Jet":
        out = Jet.zeros(self.nvars, self.degree, self.shape, self.dtype)
        if degree <= self.degree:
            sl = self.basis.degree_slices[degree]
            out.coeffs[..., sl] = self.coeffs[..., sl]
        return out

    def truncate(self, degree: int) -> "Jet":
        """Drop every homogeneous part above `degree` while keeping the basis"""
        out = self.copy()
        if degree < self.degree:
            out.coeffs[..., self.basis.degree_slices[degree + 1].start :] = 0.0
        return out

    def with_degree(self, degree: int) -> "Jet":
        """Same polynomial in the basis of another truncation degree"""
        if degree == self.degree:
            return self
        size = basis(self.nvars, degree).size
        out = np.zeros((*self.shape, size), dtype=self.dtype)
        keep = min(size, self.basis.size)
        out[..., :keep] = self.coeffs[..., :keep]
        return Jet(out, self.nvars, degree)

    @property
    def constant_term(self) -> np.ndarray:
        return self.coeffs[..., 0]

    # arithmetic

    def _coerce(self, other) -> "Jet":
        if isinstance(other, Jet):
            if other.nvars != self.nvars:
                raise InvalidInputError("jets over different variables")
            return other.with_degree(self.degree) if other.degree != self.degree else other
        return Jet.constant(np.asarray(other), self.nvars, self.degree)

    def __add__(self, other) -> "Jet":
        other = self._coerce(other)
        return Jet(self.coeffs + other.coeffs, self.nvars, self.degree)

    __radd__ = __add__

    def __sub__(self, other) -> "Jet":
        other = self._coerce(other)
        return Jet(self.coeffs - other.coeffs, self.nvars, self.degree)

    def __rsub__(self, other) -> "Jet":
        return (-self) + other

    def __neg__(self) -> "Jet":
        return Jet(-self.coeffs, self.nvars, self.degree)

    def scale(self, factor: FieldArray | float) -> "Jet":
        """Multiply by a batch of scalars (broadcast over the leading axes)"""
        return Jet(self.coeffs * np.asarray(factor)[..., None], self.nvars, self.degree)

    def __mul__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            return self.scale(other)
        other = self._coerce(other)
        b = self.basis
        prod = self.coeffs[..., b.mul_left] * other.coeffs[..., b.mul_right]
        return Jet(np.add.reduceat(prod, b.mul_starts, axis=-1), self.nvars, self.degree)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Jet":
        if isinstance(other, Jet):
            return self * other.reciprocal()
        return self.scale(1.0 / np.asarray(other))

    def __pow__(self, power: int) -> "Jet":
        out = Jet.constant(np.ones(self.shape, dtype=self.dtype), self.nvars, self.degree)
        for _ in range(power):
            out = out * self
        return out

    def diff(self, var: int) -> "Jet":
        source, dest, factor = self.basis.diff_tables[var]
        out = np.zeros_like(self.coeffs)
        out[..., dest] = self.coeffs[..., source] * factor
        return Jet(out, self.nvars, self.degree)

    def gradient(self) -> "Jet":
        """Jets of all first partials, stacked on a new trailing batch axis"""
        return Jet.stack([self.diff(var) for var in range(self.nvars)], axis=-1)

    # series

    def _series(self, coefficients: Callable[[np.ndarray, int], np.ndarray]) -> "Jet":
        """sum_k c_k(a0) (J - a0)^k with c_k supplied per order"""
        a0 = self.constant_term
        rest = self - a0
        out = Jet.constant(coefficients(a0, 0), self.nvars, self.degree)
        power = Jet.constant(np.ones(self.shape, dtype=self.dtype), self.nvars, self.degree)
        for k in range(1, self.degree + 1):
            power = power * rest
            out = out + power.scale(coefficients(a0, k))
        return out

    def reciprocal(self) -> "Jet":
        return self._series(lambda a0, k: (-1.0) ** k / a0 ** (k + 1))

    def log(self) -> "Jet":
        def coefficients(a0, k):
            if k == 0:
                return np.log(a0)
            return (-1.0) ** (k + 1) / (k * a0**k)

        return self._series(coefficients)

    def exp(self) -> "Jet":
        from math import factorial

        return self._series(lambda a0, k: np.exp(a0) / factorial(k))

    # composition and evaluation

    def compose(self, subs: Sequence["Jet"]) -> "Jet":
        """Substitute jets without constant terms for the variables"""
        if len(subs) != self.nvars:
            raise InvalidInputError(f"need {self.nvars} substitutions, got {len(subs)}")
        target = subs[0]
        for sub in subs:
            if np.any(sub.constant_term != 0):
                raise InvalidInputError("substituted jets must vanish at the origin")
        b = self.basis
        degree = target.degree
        powers: list[Jet | None] = [None] * b.size
        one = Jet.constant(1.0, target.nvars, degree)
        powers[0] = one
        out_shape = np.broadcast_shapes(self.shape, *[s.shape for s in subs])
        dtype = np.result_type(self.dtype, *[s.dtype for s in subs])
        out = np.zeros((*out_shape, basis(target.nvars, degree).size), dtype=dtype)
        out += self.coeffs[..., 0:1] * one.coeffs
        for i in range(1, b.size):
            exps = b.exponents[i]
            if exps.sum() > degree:
                break
            var = int(np.nonzero(exps)[0][0])
            lowered = exps.copy()
            lowered[var] -= 1
            powers[i] = powers[b.index[tuple(lowered)]] * subs[var]
            out = out + self.coeffs[..., i : i + 1] * powers[i].coeffs
        return Jet(out, target.nvars, degree)

    def __call__(self, points: RealArray) -> np.ndarray:
        """Evaluate at `points` (..., nvars), broadcasting against the batch shape"""
        mono = monomial_values(np.asarray(points), self.nvars, self.degree)
        return np.sum(self.coeffs * mono, axis=-1)

    def __repr__(self) -> str:
        return f"Jet(nvars={self.nvars}, degree={self.degree}, shape={self.shape})"


def matmul(a: Jet, b: Jet) -> Jet:
    """Matrix product of jet-valued matrices (..., p, q) @ (..., q, r)"""
    p, q = a.shape[-2:]
    q2, r = b.shape[-2:]
    if q != q2:
        raise InvalidInputError("inner dimensions differ")
    rows = []
    for i in range(p):
        row = []
        for k in range(r):
            acc = a[..., i, 0] * b[..., 0, k]
            for j in range(1, q):
                acc = acc + a[..., i, j] * b[..., j, k]
            row.append(acc)
        rows.append(Jet.stack(row, axis=-1))
    return Jet.stack(rows, axis=-2)


def matinv(a: Jet) -> Jet:
    """Inverse of a jet-valued matrix via the Neumann series around its constant part"""
    a0 = a.constant_term
    inv0 = np.linalg.inv(a0)
    inv0_jet = Jet.constant(inv0, a.nvars, a.degree)
    rest = a - a0
    # (a0 + R)^-1 = sum_k (-a0^-1 R)^k a0^-1, terminating at the jet degree
    step = -matmul(inv0_jet, rest)
    term = inv0_jet
    out = inv0_jet
    for _ in range(a.degree):
        term = matmul(step, term)
        out = out + term
    return out


def det(a: Jet) -> Jet:
    """Determinant of a small jet-valued matrix by cofactor expansion"""
    size = a.shape[-1]
    if size == 1:
        return a[..., 0, 0]
    if size == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    out = None
    for col in range(size):
        keep = [c for c in range(size) if c != col]
        minor = Jet(a.coeffs[..., 1:, :, :][..., keep, :], a.nvars, a.degree)
        term = a[..., 0, col] * det(minor)
        term = term if col % 2 == 0 else -term
        out = term if out is None else out + term
    return out


def quadratic_form(matrix: Jet, left: Jet, right: Jet) -> Jet:
    """sum_ij left_i matrix_ij right_j over the last batch axes"""
    out = None
    p, q = matrix.shape[-2:]
    for i in range(p):
        for j in range(q):
            term = matrix[..., i, j] * left[..., i] * right[..., j]
            out = term if out is None else out + term
    return out


class JetSpline:
    """Jets tabulated along a parameter grid, interpolated by cubic splines"""

    def __init__(self, grid: RealArray, jets: Jet):
        self.grid = np.asarray(grid, dtype=float)
        self.nvars = jets.nvars
        self.degree = jets.degree
        self.batch = jets.shape[1:]
        self._spline = CubicSpline(self.grid, jets.coeffs, axis=0)

    def __call__(self, s: float | RealArray, nu: int = 0) -> Jet:
        return Jet(self._spline(s, nu), self.nvars, self.degree)

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])
