"""The two completely discrete backward schemes over a Monte Carlo ensemble.

Scheme one is explicit: each step conditions the sum of the next-time value
and the drift contribution, then assembles the martingale integrand from
increment moments plus the diffusion driver.  Scheme two makes the drift
implicit at the left time point and resolves it by fixed-point iteration.

Derivative stacks are rebuilt from the order-zero field after every update.
Because every estimator here is a linear map across the sample cross-section
applied identically at each grid point, and the difference stencils are linear
maps across grid points applied identically to each sample, the two commute:
updating order zero and re-differencing gives exactly the same lattice as
updating every order separately, while guaranteeing that stored orders always
satisfy the stencil recursion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    DivergenceError,
    FixedPointDivergenceError,
    InvalidPartitionError,
)
from .grid import Partition, StackKey, difference_stack_arrays, enumerate_multi_indices
from .model import (
    ProblemSpec,
    evaluate_diffusion_driver,
    evaluate_driver,
    operator_arguments,
    zero_key,
)
from .stochastics import (
    DEFAULT_CAPACITY,
    BrownianPaths,
    ConditionalEstimator,
    EstimatorSpec,
    simulate_increments,
)

ALGORITHMS = ("one", "two")


@dataclass(frozen=True)
class SolverConfig:
    algorithm: str = "one"
    samples: int = 1000
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    M: int | None = None  # None: use the problem's max operator order
    fp_tolerance: float = 1e-10
    fp_max_iters: int = 50
    seed: int = 0
    paper_literal_stencil: bool = False
    record_coefficients: bool = False
    max_entries: int = DEFAULT_CAPACITY

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidPartitionError(f"algorithm must be one of {ALGORITHMS}")
        if self.samples < 1:
            raise InvalidPartitionError(f"need samples >= 1, got {self.samples}")
        if self.fp_tolerance <= 0:
            raise InvalidPartitionError("fp_tolerance must be positive")
        if self.fp_max_iters < 1:
            raise InvalidPartitionError("fp_max_iters must be >= 1")


@dataclass
class SolutionLattice:
    """Per-sample, per-time, per-grid-point values of V and Vbar, all orders.

    Reads between grid times follow the piecewise-constant convention: the
    lattice value at t in [t_{j-1}, t_j) is the slice stored at t_{j-1}.
    """

    spec: ProblemSpec
    partition: Partition
    paths: BrownianPaths
    config: SolverConfig
    M: int
    V: dict[StackKey, np.ndarray]  # (S, n0+1) + grid + (q,)
    Vbar: dict[StackKey, np.ndarray]  # (S, n0+1) + grid + (q, d)
    fp_iterations: list[int] = field(default_factory=list)
    coefficient_records: list | None = None

    @property
    def sample_count(self) -> int:
        return self.paths.sample_count

    def v_base(self) -> np.ndarray:
        return self.V[zero_key(self.spec.p)]

    def vbar_base(self) -> np.ndarray:
        return self.Vbar[zero_key(self.spec.p)]


def _resolve_order(spec: ProblemSpec, config: SolverConfig) -> int:
    M = spec.M if config.M is None else config.M
    if M < spec.M:
        raise InvalidPartitionError(
            f"lattice order M={M} is below the operators' requirement {spec.M}"
        )
    return M


def _stack_entry_count(M: int, p: int) -> int:
    return sum(len(enumerate_multi_indices(c, p)) for c in range(M + 1))


def _check_capacity(spec, partition, config, M):
    entries = _stack_entry_count(M, spec.p)
    per_slot = config.samples * (partition.n0 + 1) * partition.num_points * spec.q
    total = entries * per_slot * (1 + spec.d)
    if total > config.max_entries:
        raise CapacityError(
            f"lattice would hold {total} float64 entries, over the budget "
            f"{config.max_entries}; reduce samples, grid, or raise max_entries"
        )


def _rebuild(base: np.ndarray, M: int, partition: Partition, paper_literal: bool):
    """Difference stack of a (S,) + grid + components array."""
    return difference_stack_arrays(base, M, partition, batch_ndim=1, paper_literal=paper_literal)


def _require_finite(arr: np.ndarray, j0: int, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        first = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise DivergenceError(
            f"{what} became non-finite at time step j0={j0}, "
            f"first offending (sample, grid..., component) index {first}"
        )


def terminal_stage(
    spec: ProblemSpec,
    partition: Partition,
    paths: BrownianPaths,
    M: int | None = None,
    paper_literal: bool = False,
):
    """Terminal slice: H(x, W(T)) per sample with its difference stack; Vbar = 0."""
    M = spec.M if M is None else M
    S = paths.sample_count
    w_T = paths.W[:, -1, :].reshape(S, *([1] * partition.p), spec.d)
    h = np.asarray(spec.terminal(partition.points, w_T), dtype=float)
    h = np.broadcast_to(h, (S,) + partition.grid_shape + (spec.q,)).copy()
    if not np.all(np.isfinite(h)):
        first = tuple(int(i) for i in np.argwhere(~np.isfinite(h))[0])
        raise DivergenceError(f"terminal field non-finite at index {first}")
    v_stack = _rebuild(h, M, partition, paper_literal)
    vbar_stack = {
        key: np.zeros(arr.shape + (spec.d,)) for key, arr in v_stack.items()
    }
    return v_stack, vbar_stack


def _allocate(spec, partition, config, M):
    S = config.samples
    n0 = partition.n0
    grid = partition.grid_shape
    V = {}
    Vbar = {}
    for c in range(M + 1):
        for idx in enumerate_multi_indices(c, spec.p).indices:
            V[(c, idx)] = np.empty((S, n0 + 1) + grid + (spec.q,))
            Vbar[(c, idx)] = np.empty((S, n0 + 1) + grid + (spec.q, spec.d))
    return V, Vbar


def _store(V, Vbar, j, v_stack, vbar_stack):
    for key, arr in v_stack.items():
        V[key][:, j] = arr
    for key, arr in vbar_stack.items():
        Vbar[key][:, j] = arr


def _setup(spec, partition, config, paths):
    M = _resolve_order(spec, config)
    _check_capacity(spec, partition, config, M)
    if paths is None:
        paths = simulate_increments(
            partition, spec.d, config.samples, config.seed, config.max_entries
        )
    if paths.sample_count != config.samples:
        raise InvalidPartitionError(
            f"paths carry {paths.sample_count} samples, config expects {config.samples}"
        )
    if config.estimator.kind in ("analytic", "regression"):
        basis = config.estimator.basis_size(spec.d)
        if config.samples < basis:
            raise InvalidPartitionError(
                f"need samples >= basis size {basis} for the {config.estimator.kind} estimator"
            )
    estimator = ConditionalEstimator(
        config.estimator, paths, record_coefficients=config.record_coefficients
    )
    return M, paths, estimator


def solve_algorithm_one(
    spec: ProblemSpec,
    partition: Partition,
    config: SolverConfig,
    paths: BrownianPaths | None = None,
) -> SolutionLattice:
    """Explicit backward scheme.

    Per step, for the order-zero field (higher orders follow by re-stenciling):
      V(t_{j0-1})    = E[ V(t_j0) + L(t_j0) * dt | F_{t_{j0-1}} ]
      Vbar(t_{j0-1}) = E[ V(t_j0) dW' | F ] / dt + E[ L(t_j0) dW' | F ]
                       + J(t_{j0-1}, x, V(t_{j0-1}))
    """
    if config.algorithm != "one":
        raise InvalidPartitionError("config.algorithm must be 'one' for solve_algorithm_one")
    M, paths, est = _setup(spec, partition, config, paths)
    lit = config.paper_literal_stencil
    zkey = zero_key(spec.p)
    times = partition.time_points
    n0 = partition.n0

    V, Vbar = _allocate(spec, partition, config, M)
    v_stack, vbar_stack = terminal_stage(spec, partition, paths, M, lit)
    _store(V, Vbar, n0, v_stack, vbar_stack)

    for j0 in range(n0, 0, -1):
        dt = float(partition.time_increments[j0 - 1])
        args = operator_arguments(
            float(times[j0]), partition, v_stack, vbar_stack, spec.k, spec.m
        )
        drift = evaluate_driver(spec, args)

        v0_prev = est.cond_mean(v_stack[zkey] + dt * drift, j0)
        _require_finite(v0_prev, j0, "solution field")
        v_stack_prev = _rebuild(v0_prev, M, partition, lit)

        v_dw = est.cond_mean_times_dw(v_stack[zkey], j0)
        drift_dw = est.cond_mean_times_dw(drift, j0)
        args_prev = operator_arguments(
            float(times[j0 - 1]), partition, v_stack_prev, {}, spec.n, -1
        )
        J0 = evaluate_diffusion_driver(spec, args_prev)
        vbar0_prev = v_dw / dt + drift_dw + J0
        _require_finite(vbar0_prev, j0, "integrand field")
        vbar_stack_prev = _rebuild(vbar0_prev, M, partition, lit)

        _store(V, Vbar, j0 - 1, v_stack_prev, vbar_stack_prev)
        v_stack, vbar_stack = v_stack_prev, vbar_stack_prev

    return SolutionLattice(
        spec=spec, partition=partition, paths=paths, config=config, M=M,
        V=V, Vbar=Vbar, coefficient_records=est.records,
    )


def solve_algorithm_two(
    spec: ProblemSpec,
    partition: Partition,
    config: SolverConfig,
    paths: BrownianPaths | None = None,
) -> SolutionLattice:
    """Implicit backward scheme.

    V(t_{j0-1}) solves V = E[V(t_j0)|F] + L(t_{j0-1}, x, V) * dt by fixed-point
    iteration started from the conditional mean; derivative stacks (and the
    integrand entering the driver) are refreshed every inner iterate.  Then
      Vbar(t_{j0-1}) = E[ V(t_j0) dW' | F ] / dt + J(t_{j0-1}, x, V(t_{j0-1}))
    with J evaluated at the converged V; there is no conditioned drift-times-
    increment term in this scheme.
    """
    if config.algorithm != "two":
        raise InvalidPartitionError("config.algorithm must be 'two' for solve_algorithm_two")
    M, paths, est = _setup(spec, partition, config, paths)
    lit = config.paper_literal_stencil
    zkey = zero_key(spec.p)
    times = partition.time_points
    n0 = partition.n0

    V, Vbar = _allocate(spec, partition, config, M)
    v_stack, vbar_stack = terminal_stage(spec, partition, paths, M, lit)
    _store(V, Vbar, n0, v_stack, vbar_stack)
    fp_iterations = []

    for j0 in range(n0, 0, -1):
        dt = float(partition.time_increments[j0 - 1])
        t_prev = float(times[j0 - 1])

        cond_mean = est.cond_mean(v_stack[zkey], j0)
        v_dw = est.cond_mean_times_dw(v_stack[zkey], j0) / dt

        v = cond_mean
        first_residual = None
        converged = False
        for it in range(1, config.fp_max_iters + 1):
            v_stack_prev = _rebuild(v, M, partition, lit)
            args_J = operator_arguments(t_prev, partition, v_stack_prev, {}, spec.n, -1)
            vbar0 = v_dw + evaluate_diffusion_driver(spec, args_J)
            vbar_stack_prev = _rebuild(vbar0, M, partition, lit)
            args_L = operator_arguments(
                t_prev, partition, v_stack_prev, vbar_stack_prev, spec.k, spec.m
            )
            v_new = cond_mean + dt * evaluate_driver(spec, args_L)
            _require_finite(v_new, j0, "implicit-stage iterate")
            residual = float(np.max(np.abs(v_new - v)))
            v = v_new
            if first_residual is None:
                first_residual = residual
            if residual < config.fp_tolerance:
                converged = True
                break
            if residual > 1e6 * max(first_residual, 1.0):
                break
        if not converged:
            raise FixedPointDivergenceError(
                f"implicit stage did not converge at step j0={j0}: last residual "
                f"{residual:.3e} after {it} iterations; the iteration contracts "
                f"only when (driver Lipschitz constant) * dt < 1, shrink dt"
            )
        fp_iterations.append(it)

        v_stack_prev = _rebuild(v, M, partition, lit)
        args_J = operator_arguments(t_prev, partition, v_stack_prev, {}, spec.n, -1)
        vbar0 = v_dw + evaluate_diffusion_driver(spec, args_J)
        _require_finite(vbar0, j0, "integrand field")
        vbar_stack_prev = _rebuild(vbar0, M, partition, lit)

        _store(V, Vbar, j0 - 1, v_stack_prev, vbar_stack_prev)
        v_stack, vbar_stack = v_stack_prev, vbar_stack_prev

    return SolutionLattice(
        spec=spec, partition=partition, paths=paths, config=config, M=M,
        V=V, Vbar=Vbar, fp_iterations=fp_iterations, coefficient_records=est.records,
    )


def solve(
    spec: ProblemSpec,
    partition: Partition,
    config: SolverConfig,
    paths: BrownianPaths | None = None,
) -> SolutionLattice:
    if config.algorithm == "one":
        return solve_algorithm_one(spec, partition, config, paths)
    return solve_algorithm_two(spec, partition, config, paths)


# ---------------------------------------------------------------------------
# Lattice export
# ---------------------------------------------------------------------------


def _format(v: float) -> str:
    return format(v, ".17g")


def export_lattice_csv(lattice: SolutionLattice, v_path, vbar_path) -> None:
    """Write the full lattice as CSV.

    Solution columns: sample, j, t, x1..xp, c, multi_index, component, value.
    The companion integrand file adds a dcomponent column.
    """
    part = lattice.partition
    coords = part.points.reshape(-1, part.p)
    grid_n = coords.shape[0]
    header_x = ",".join(f"x{l+1}" for l in range(part.p))
    with open(v_path, "w") as fv:
        fv.write(f"sample,j,t,{header_x},c,multi_index,component,value\n")
        for key in sorted(lattice.V):
            c, idx = key
            tag = "-".join(map(str, idx))
            flat = lattice.V[key].reshape(
                lattice.sample_count, part.n0 + 1, grid_n, lattice.spec.q
            )
            for s in range(lattice.sample_count):
                for j in range(part.n0 + 1):
                    t = part.time_points[j]
                    for g in range(grid_n):
                        xs = ",".join(_format(x) for x in coords[g])
                        for r in range(lattice.spec.q):
                            fv.write(
                                f"{s},{j},{_format(t)},{xs},{c},{tag},{r},"
                                f"{_format(flat[s, j, g, r])}\n"
                            )
    with open(vbar_path, "w") as fb:
        fb.write(f"sample,j,t,{header_x},c,multi_index,component,dcomponent,value\n")
        for key in sorted(lattice.Vbar):
            c, idx = key
            tag = "-".join(map(str, idx))
            flat = lattice.Vbar[key].reshape(
                lattice.sample_count, part.n0 + 1, grid_n, lattice.spec.q, lattice.spec.d
            )
            for s in range(lattice.sample_count):
                for j in range(part.n0 + 1):
                    t = part.time_points[j]
                    for g in range(grid_n):
                        xs = ",".join(_format(x) for x in coords[g])
                        for r in range(lattice.spec.q):
                            for i in range(lattice.spec.d):
                                fb.write(
                                    f"{s},{j},{_format(t)},{xs},{c},{tag},{r},{i},"
                                    f"{_format(flat[s, j, g, r, i])}\n"
                                )
