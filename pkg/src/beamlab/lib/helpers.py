from collections.abc import Iterator, Sequence
from typing import Any, overload

import numpy as np
from typeguard import TypeCheckError, check_type as _check_type

from beamlab.lib.errors import BranchError, InvalidInputError
from beamlab.lib.const import CUTOFF_PLATEAU, SIGNIFICANT_DIGITS
from beamlab.lib.types import ComplexArray, RealArray


def check_type(value: Any, expected: Any, name: str) -> Any:
    """Runtime type check that raises our own input error instead of typeguard's"""
    try:
        return _check_type(value, expected)
    except TypeCheckError as err:
        raise InvalidInputError(f"{name}: {err}") from err


def format_float(value: float | complex) -> str:
    """Round-trip exact text for a float"""
    return f"{value:.{SIGNIFICANT_DIGITS}g}"


def fit_slope(x: Sequence[float] | RealArray, y: Sequence[float] | RealArray) -> tuple[float, float]:
    """Least-squares slope and intercept of log|y| against log x.

    Args:
        x: positive abscissae (radii, rho values)
        y: magnitudes; zeros are not allowed

    Returns:
        (slope, intercept) of the fitted line
    """
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.abs(np.asarray(y)))
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


def _psi(x: RealArray) -> RealArray:
    out = np.zeros_like(x)
    positive = x > 0
    out[positive] = np.exp(-1.0 / x[positive])
    return out


def smooth_step(q: RealArray | float) -> RealArray:
    """C-infinity step: 1 for q <= 0, 0 for q >= 1"""
    q = np.asarray(q, dtype=float)
    a = _psi(1.0 - q)
    b = _psi(q)
    return a / (a + b)


def smooth_cutoff(tau: RealArray | float) -> RealArray:
    """Beam cutoff: 1 on |tau| <= 1/4, 0 on |tau| >= 1/2, smooth in between"""
    tau = np.abs(np.asarray(tau, dtype=float))
    return smooth_step((tau - CUTOFF_PLATEAU) / CUTOFF_PLATEAU)


def compact_bump(q: RealArray | float) -> RealArray:
    """exp(1 - 1/(1 - q^2)) inside |q| < 1, zero outside; equals 1 at q = 0"""
    q = np.asarray(q, dtype=float)
    out = np.zeros_like(q)
    inside = np.abs(q) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - q[inside] ** 2))
    return out


def set_partitions(items: Sequence[int]) -> Iterator[list[tuple[int, ...]]]:
    """All set partitions of `items`, each as a list of blocks"""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for partition in set_partitions(rest):
        # put `first` into each existing block, or into a block of its own
        for index in range(len(partition)):
            yield partition[:index] + [(first, *partition[index])] + partition[index + 1 :]
        yield [(first,)] + partition


@overload
def continuous_sqrt(values: ComplexArray, *, inverse: bool = False) -> ComplexArray: ...
@overload
def continuous_sqrt(values: complex, *, inverse: bool = False) -> complex: ...
def continuous_sqrt(values, *, inverse: bool = False):
    """Square root (or inverse square root) with the branch tracked along the array.

    The first entry takes the principal branch; each next entry takes the root whose
    argument is nearest to the previous one.
    """
    arr = np.atleast_1d(np.asarray(values, dtype=complex))
    if np.any(np.abs(arr) == 0.0):
        index = int(np.argmin(np.abs(arr)))
        raise BranchError(float(index))
    roots = np.sqrt(arr)
    for index in range(1, roots.size):
        if abs(roots[index] + roots[index - 1]) < abs(roots[index] - roots[index - 1]):
            roots[index] = -roots[index]
    out = 1.0 / roots if inverse else roots
    if np.ndim(values) == 0:
        return complex(out[0])
    return out.reshape(np.shape(values))


def least_squares_constant(x: RealArray, y: RealArray) -> float:
    """Best c with y ~ c x (no intercept)"""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    return float(np.dot(x, y) / np.dot(x, x))
