"""Higher-order linearization of the semilinear solution map.

`mixed_derivative` differentiates u(eps_1 f_1 + ... + eps_m f_m) at eps = 0 with a
2^m-corner central stencil. `direct_linearized_solution` solves the linear problem
that the same derivative satisfies,

    box U + R_m + V_m w_1 ... w_m = 0,   U = 0 on the lateral boundary and at t = 0,

with R_m collected from the set partitions of {1..m}.
`greens_identity_check` tests the integral identity that links the interior
interaction to boundary traces.
"""

from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations, product
import logging

import numpy as np

from beamlab.lattice import GridField, Lattice
from beamlab.lib.const import DEFAULT_EPS_STEP
from beamlab.lib.errors import AlignmentError, DependencyError, InvalidInputError
from beamlab.lib.helpers import format_float, set_partitions
from beamlab.lib.types import BoolArray, FieldArray, RealArray
from beamlab.wave_forward import (
    BoundaryData,
    NonlinearitySpec,
    WaveProblem,
    neumann_trace,
    solve_linear_wave,
    solve_semilinear,
)

logger = logging.getLogger(__name__)

Block = frozenset[int]


@dataclass(frozen=True)
class StencilCorner:
    signs: tuple[int, ...]
    solve: int
    norm: float


@dataclass(frozen=True, eq=False)
class LinearizedField:
    order: int
    indices: tuple[int, ...]
    grid: GridField = field(repr=False)
    trace: GridField | None = field(repr=False)
    eps: float
    error_bar: float
    """truncation estimate from the eps / 2 eps comparison plus cancellation noise"""
    noise: float
    corners: list[StencilCorner] = field(repr=False)

    @property
    def ill_conditioned(self) -> bool:
        return self.error_bar > self.grid.l2_norm()

    def rows(self) -> list[list[str]]:
        return [[" ".join(f"{s:+d}" for s in c.signs), str(c.solve), format_float(c.norm)] for c in self.corners]


def _stencil(corners: Sequence[tuple[int, ...]], values: Sequence[FieldArray], eps: float) -> FieldArray:
    m = len(corners[0])
    out = sum(int(np.prod(signs)) * v for signs, v in zip(corners, values))
    return out / (2 * eps) ** m


def mixed_derivative(
    problem: WaveProblem,
    V: NonlinearitySpec,
    data: Sequence[BoundaryData],
    eps_step: float = DEFAULT_EPS_STEP,
    m: int | None = None,
    trace_mask: BoolArray | None = None,
    threads: int = 1,
) -> LinearizedField:
    """d^m u / d eps_1 ... d eps_m at eps = 0 by the central product stencil.

    The stencil is applied at eps and 2 eps; their difference gives the truncation error bar.
    Traces on `trace_mask` reuse the same solves.
    """
    m = len(data) if m is None else m
    if not 1 <= m <= len(data) or m > 5:
        raise InvalidInputError(f"linearization order {m} is not available for {len(data)} inputs")
    data = list(data[:m])
    samples = V.sample(problem.lattice)
    corners = list(product((1, -1), repeat=m))

    def solve(job: tuple[int, tuple[int, ...], float]) -> tuple[FieldArray, FieldArray | None]:
        _, signs, eps = job
        f = data[0].scaled(signs[0] * eps)
        for sign, g in zip(signs[1:], data[1:]):
            f = f + g.scaled(sign * eps)
        u = solve_semilinear(problem, V, f, samples=samples).u
        trace = None if trace_mask is None else neumann_trace(problem, u, trace_mask).values
        return u.values, trace

    jobs = [(i, signs, eps) for eps in (eps_step, 2 * eps_step) for i, signs in enumerate(corners)]
    logger.info("linearization of order %d: %d semilinear solves", m, len(jobs))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(solve, jobs))
    fine, coarse = results[: len(corners)], results[len(corners) :]

    d_fine = _stencil(corners, [r[0] for r in fine], eps_step)
    d_coarse = _stencil(corners, [r[0] for r in coarse], 2 * eps_step)
    lattice = problem.lattice
    truncation = GridField(lattice, (d_fine - d_coarse) / 3.0).l2_norm()
    peak = max(GridField(lattice, r[0]).l2_norm() for r in fine)
    noise = float(np.finfo(float).eps) * peak * 2**m / (2 * eps_step) ** m
    trace = None
    if trace_mask is not None:
        trace = GridField(lattice, _stencil(corners, [r[1] for r in fine], eps_step))
    result = LinearizedField(
        order=m,
        indices=tuple(range(1, m + 1)),
        grid=GridField(lattice, d_fine),
        trace=trace,
        eps=eps_step,
        error_bar=truncation + noise,
        noise=noise,
        corners=[StencilCorner(signs, i, GridField(lattice, r[0]).sup_norm()) for (i, signs, _), r in zip(jobs, fine)],
    )
    if result.ill_conditioned:
        logger.warning("order-%d stencil is ill-conditioned: error bar %.3e exceeds the signal", m, result.error_bar)
    return result


def source_polynomial(
    samples: Mapping[int, RealArray],
    w: Sequence[FieldArray],
    lower: Mapping[Block, FieldArray],
    m: int,
) -> tuple[FieldArray, FieldArray]:
    """(R_m, V_m w_1 ... w_m): the m-th eps-derivative of V(u_eps) split into lower terms and the top term.

    A block of size one stands for w_i; blocks of size two vanish because V has no quadratic part.
    """
    shape = np.shape(w[0])
    dtype = np.result_type(*[np.asarray(x).dtype for x in w])
    rest = np.zeros(shape, dtype=dtype)
    top = np.zeros(shape, dtype=dtype)
    missing = set()
    for partition in set_partitions(list(range(1, m + 1))):
        k = len(partition)
        if k < 3 or k not in samples:
            continue
        if any(len(block) == 2 for block in partition):
            continue
        term = samples[k].astype(dtype)
        for block in partition:
            if len(block) == 1:
                term = term * w[block[0] - 1]
            elif frozenset(block) in lower:
                term = term * lower[frozenset(block)]
            else:
                missing.add(tuple(sorted(block)))
        if k == m:
            top = top + term
        else:
            rest = rest + term
    if missing:
        raise DependencyError(sorted(missing))
    return rest, top


def direct_linearized_solution(
    problem: WaveProblem,
    V: NonlinearitySpec,
    w: Sequence[GridField],
    m: int | None = None,
    lower: Mapping[Block, GridField] | None = None,
    samples: Mapping[int, RealArray] | None = None,
) -> GridField:
    """U solving  box U + R_m + V_m w_1 ... w_m = 0  with zero data"""
    m = len(w) if m is None else m
    samples = V.sample(problem.lattice) if samples is None else samples
    lattice = problem.lattice
    for field_ in w:
        if not field_.lattice.same_as(lattice):
            raise AlignmentError("linear solutions live on different lattices")
    lower_values = {block: u.values for block, u in (lower or {}).items()}
    rest, top = source_polynomial(samples, [x.values for x in w[:m]], lower_values, m)
    return solve_linear_wave(problem, GridField(lattice, -(rest + top)))


def linearized_hierarchy(
    problem: WaveProblem,
    V: NonlinearitySpec,
    w: Sequence[GridField],
    m: int | None = None,
) -> dict[Block, GridField]:
    """U^(B) for every subset B of {1..m} with 3 <= |B| <= m - 1, built bottom up"""
    m = len(w) if m is None else m
    samples = V.sample(problem.lattice)
    out: dict[Block, GridField] = {}
    for size in range(3, m):
        for block in combinations(range(1, m + 1), size):
            members = [w[i - 1] for i in block]
            relabel = {i + 1: original for i, original in enumerate(block)}
            local = {
                frozenset(pos for pos, original in relabel.items() if original in key): value
                for key, value in out.items()
                if key <= frozenset(block)
            }
            out[frozenset(block)] = direct_linearized_solution(problem, V, members, size, local, samples)
    return out


# Green's identity


@dataclass(frozen=True)
class GreensReport:
    lhs: complex
    rhs: complex
    rhs_gamma: complex
    """part of the boundary integral over Gamma"""
    defect: float

    @property
    def rhs_outside(self) -> complex:
        return self.rhs - self.rhs_gamma


def lateral_weights(problem: WaveProblem, mask: BoolArray | None = None) -> RealArray:
    """Quadrature weights of dS_g dt on the lateral wall nodes (zero elsewhere)"""
    lattice = problem.lattice
    g0inv = np.linalg.inv(problem._fields[1])
    out = np.zeros(lattice.shape)
    t_weights = np.full(lattice.nt + 1, lattice.dt)
    t_weights[[0, -1]] *= 0.5
    for wall, axis, _ in lattice.walls():
        nodes = np.broadcast_to(lattice.wall_mask(wall), lattice.shape)
        weight = problem.sqrt_g * np.sqrt(g0inv[..., axis, axis])
        weight = weight * t_weights.reshape((-1,) + (1,) * lattice.n)
        for other in range(lattice.n):
            if other == axis:
                continue
            weight = weight * lattice.spacing[other]
        out[nodes] = weight[nodes]
    if mask is not None:
        out = np.where(mask, out, 0.0)
    return out


def greens_identity_check(
    problem: WaveProblem,
    v3_difference: FieldArray | GridField,
    w: Sequence[GridField],
    traces: tuple[GridField, GridField],
    gamma: BoolArray | None = None,
) -> GreensReport:
    """Both sides of  int (V3' - V3'') w0 w1 w2 w3 dV_g dt = int_Sigma (d_nu U' - d_nu U'') w0 dS_g dt.

    w[0] solves the homogeneous equation backward, w[1:] forward; U', U'' are the third
    linearizations for the two coefficients.
    """
    lattice = problem.lattice
    diff = v3_difference.values if isinstance(v3_difference, GridField) else np.asarray(v3_difference)
    if diff.shape != lattice.shape or any(not x.lattice.same_as(lattice) for x in (*w, *traces)):
        raise AlignmentError("Green's identity inputs live on different lattices")
    product_ = diff * w[0].values * w[1].values * w[2].values * w[3].values
    lhs = complex(np.sum(lattice.weights() * problem.sqrt_g * product_))
    jump = (traces[0] - traces[1]).values * w[0].values
    rhs = complex(np.sum(lateral_weights(problem) * jump))
    rhs_gamma = rhs if gamma is None else complex(np.sum(lateral_weights(problem, gamma) * jump))
    defect = abs(lhs - rhs)
    logger.debug("green's identity: lhs %.6e, rhs %.6e, defect %.3e", abs(lhs), abs(rhs), defect)
    return GreensReport(lhs, rhs, rhs_gamma, defect)


@dataclass(frozen=True)
class RefinementStudy:
    coarse: GreensReport
    fine: GreensReport

    @property
    def observed_order(self) -> float:
        if self.fine.defect == 0.0:
            return float("inf")
        return float(np.log2(self.coarse.defect / self.fine.defect))


def greens_refinement_study(check, lattice: Lattice) -> RefinementStudy:
    """Run a Green's identity check (a callable taking a lattice) at two resolutions"""
    return RefinementStudy(check(lattice), check(lattice.refine(2)))
