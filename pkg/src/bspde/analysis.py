"""Discrete error criterion, convergence-rate studies, and the linearized
first-order Malliavin diagnostic with its representation-identity check.

The error criterion sums, over derivative orders c, the worst grid point's
worst-in-time mean squared deviation of the lattice from a reference, for the
solution and its martingale integrand separately.  "Worst in time" probes the
piecewise-constant extension of the lattice everywhere on [0, T): at each grid
time the stored slice is compared against the reference, and just before each
grid time the *previous* stored slice is compared against the reference there.
The second family of read points is what resolves the within-interval drift of
the true solution; against a stochastic reference it contributes the Brownian
modulus of continuity, which is exactly the first-order term the criterion is
designed to expose.  The terminal integrand slice (identically zero by
construction) lies outside the extension and is never read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidPartitionError, ReferenceRequiredError
from .grid import Partition, StackKey, difference_stack_arrays, enumerate_multi_indices
from .model import (
    OperatorJacobians,
    ProblemSpec,
    evaluate_diffusion_driver,
    evaluate_driver,
    operator_arguments,
    operator_jacobians,
    zero_key,
)
from .solver import SolutionLattice, SolverConfig, _rebuild, solve
from .stochastics import BrownianPaths, ConditionalEstimator, simulate_increments


# ---------------------------------------------------------------------------
# Reference adapters
# ---------------------------------------------------------------------------


class _AnalyticReference:
    """Continuous-time reference evaluated along the lattice's own paths."""

    def __init__(self, spec: ProblemSpec, lattice: SolutionLattice):
        if spec.analytic_reference is None:
            raise ReferenceRequiredError(
                f"problem {spec.name!r} does not supply an analytic reference"
            )
        self.spec = spec
        self.lattice = lattice

    def _stacks(self, j: int):
        part = self.lattice.partition
        paths = self.lattice.paths
        S = paths.sample_count
        w = paths.W[:, j, :].reshape(S, *([1] * part.p), self.spec.d)
        t = float(part.time_points[j])
        V, Vbar = self.spec.analytic_reference(t, part.points, w)
        V = np.broadcast_to(np.asarray(V, dtype=float), (S,) + part.grid_shape + (self.spec.q,))
        Vbar = np.broadcast_to(
            np.asarray(Vbar, dtype=float), (S,) + part.grid_shape + (self.spec.q, self.spec.d)
        )
        lit = self.lattice.config.paper_literal_stencil
        return (
            _rebuild(V.copy(), self.lattice.M, part, lit),
            _rebuild(Vbar.copy(), self.lattice.M, part, lit),
        )

    def at(self, j: int):
        return self._stacks(j)

    def left_limit(self, j: int):
        # the reference is continuous in time: its left limit is its value
        return self._stacks(j)


class _LatticeReference:
    """Another lattice (same spatial grid, compatible time grid) as reference."""

    def __init__(self, reference: SolutionLattice, lattice: SolutionLattice):
        if reference.partition.grid_shape != lattice.partition.grid_shape:
            raise InvalidPartitionError("reference lattice must share the spatial grid")
        ref_times = reference.partition.time_points
        self.index_map = []
        for t in lattice.partition.time_points:
            hits = np.where(np.isclose(ref_times, t, rtol=0, atol=1e-12))[0]
            if hits.size != 1:
                raise InvalidPartitionError(
                    f"reference time grid does not contain t={t}; refine by integer factors"
                )
            self.index_map.append(int(hits[0]))
        self.reference = reference

    def _slice(self, ref_j: int):
        V = {key: arr[:, ref_j] for key, arr in self.reference.V.items()}
        Vbar = {key: arr[:, ref_j] for key, arr in self.reference.Vbar.items()}
        return V, Vbar

    def at(self, j: int):
        return self._slice(self.index_map[j])

    def left_limit(self, j: int):
        # piecewise-constant extension: value just before t_j is the previous slice
        return self._slice(self.index_map[j] - 1)


def _as_reference(reference, lattice: SolutionLattice):
    if isinstance(reference, SolutionLattice):
        return _LatticeReference(reference, lattice)
    if isinstance(reference, ProblemSpec):
        return _AnalyticReference(reference, lattice)
    raise InvalidPartitionError(
        "reference must be a SolutionLattice or a ProblemSpec with analytic_reference"
    )


# ---------------------------------------------------------------------------
# Discrete error criterion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorReport:
    """Per-order squared-error terms of the discrete criterion.

    Each term is max over grid points of the worst read-point mean of the
    squared max-abs entry deviation; total is their sum over orders and over
    the solution/integrand families.  Standard errors are the Monte Carlo
    errors of the mean at the attaining (read point, grid point).
    """

    err_V_sq: dict[int, float]
    err_Vbar_sq: dict[int, float]
    stderr_V: dict[int, float]
    stderr_Vbar: dict[int, float]
    mesh_size: float
    samples: int

    @property
    def total(self) -> float:
        return sum(self.err_V_sq.values()) + sum(self.err_Vbar_sq.values())

    @property
    def stderr_total(self) -> float:
        return math.sqrt(
            sum(se**2 for se in self.stderr_V.values())
            + sum(se**2 for se in self.stderr_Vbar.values())
        )


def _order_deviation(lattice_slice: dict, ref_slice: dict, c: int, p: int) -> np.ndarray:
    """Per-sample squared max-abs deviation over order-c entries, shape (S, grid)."""
    worst = None
    for idx in enumerate_multi_indices(c, p).indices:
        diff = np.abs(ref_slice[(c, idx)] - lattice_slice[(c, idx)])
        while diff.ndim > 1 + p:  # reduce component axes
            diff = diff.max(axis=-1)
        worst = diff if worst is None else np.maximum(worst, diff)
    return worst**2


def discrete_error(lattice: SolutionLattice, reference, M: int | None = None) -> ErrorReport:
    """Discrete squared-error criterion of the lattice against a reference.

    reference: a ProblemSpec carrying an analytic reference (evaluated along
    the lattice's sample paths) or another SolutionLattice on the same spatial
    grid whose time grid contains this lattice's grid times.
    """
    M = lattice.M if M is None else M
    if M > lattice.M:
        raise InvalidPartitionError(f"M={M} exceeds the lattice order {lattice.M}")
    ref = _as_reference(reference, lattice)
    p = lattice.spec.p
    n0 = lattice.partition.n0
    S = lattice.sample_count

    read_points = [("at", j, j) for j in range(n0)] + [
        ("left_limit", j, j - 1) for j in range(1, n0 + 1)
    ]

    err_V, err_Vbar, se_V, se_Vbar = {}, {}, {}, {}
    for c in range(M + 1):
        best = {"V": (-1.0, None), "Vbar": (-1.0, None)}
        for kind, j_ref, j_st in read_points:
            refV, refVbar = getattr(ref, kind)(j_ref)
            latV = {key: arr[:, j_st] for key, arr in lattice.V.items()}
            latVbar = {key: arr[:, j_st] for key, arr in lattice.Vbar.items()}
            for fam, ref_sl, lat_sl in (("V", refV, latV), ("Vbar", refVbar, latVbar)):
                sq = _order_deviation(lat_sl, ref_sl, c, p)  # (S, grid)
                mean = sq.mean(axis=0)
                worst_x = float(mean.max())
                if worst_x > best[fam][0]:
                    flat = sq.reshape(S, -1)
                    gx = int(np.argmax(mean.reshape(-1)))
                    se = float(flat[:, gx].std(ddof=1) / math.sqrt(S)) if S > 1 else 0.0
                    best[fam] = (worst_x, se)
        err_V[c], se_V[c] = best["V"]
        err_Vbar[c], se_Vbar[c] = best["Vbar"]

    return ErrorReport(
        err_V_sq=err_V,
        err_Vbar_sq=err_Vbar,
        stderr_V=se_V,
        stderr_Vbar=se_Vbar,
        mesh_size=lattice.partition.mesh_size,
        samples=S,
    )


# ---------------------------------------------------------------------------
# Convergence studies
# ---------------------------------------------------------------------------

DEGENERATE_FLOOR = 1e-16


@dataclass(frozen=True)
class ConvergenceFit:
    points: tuple[tuple[float, float], ...]  # (mesh_size, total error)
    slope: float | None
    intercept: float | None
    residuals: tuple[float, ...]
    degenerate: bool
    reports: tuple[ErrorReport, ...]


def fit_loglog(points) -> tuple[float | None, float | None, tuple[float, ...], bool]:
    """Least-squares slope of log(err) vs log(mesh); degenerate if errs vanish."""
    meshes = np.array([m for m, _ in points])
    errs = np.array([e for _, e in points])
    if np.all(errs < DEGENERATE_FLOOR):
        return None, None, (), True
    if np.any(errs <= 0):
        raise InvalidPartitionError("cannot fit a rate through zero/negative errors")
    lx, ly = np.log(meshes), np.log(errs)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    return float(slope), float(intercept), tuple(float(r) for r in resid), False


def convergence_study(
    spec: ProblemSpec,
    partitions,
    config: SolverConfig,
) -> ConvergenceFit:
    """Solve on each partition (same samples and seed) and fit the error rate."""
    partitions = list(partitions)
    if len(partitions) < 3:
        raise InvalidPartitionError("need at least 3 partition levels for a rate fit")
    meshes = [p.mesh_size for p in partitions]
    if not all(a > b for a, b in zip(meshes, meshes[1:])):
        raise InvalidPartitionError("partition mesh sizes must decrease strictly")
    if spec.analytic_reference is None:
        raise ReferenceRequiredError(
            f"convergence_study needs an analytic reference; {spec.name!r} has none"
        )
    reports = []
    points = []
    for part in partitions:
        lattice = solve(spec, part, config)
        report = discrete_error(lattice, spec)
        reports.append(report)
        points.append((part.mesh_size, report.total))
    slope, intercept, resid, degenerate = fit_loglog(points)
    return ConvergenceFit(
        points=tuple(points),
        slope=slope,
        intercept=intercept,
        residuals=resid,
        degenerate=degenerate,
        reports=tuple(reports),
    )


def compare_algorithms(
    spec: ProblemSpec,
    partition: Partition,
    config: SolverConfig,
    paths: BrownianPaths | None = None,
) -> ErrorReport:
    """Criterion-style discrepancy between the two schemes on shared paths."""
    if paths is None:
        paths = simulate_increments(partition, spec.d, config.samples, config.seed)
    lat_one = solve(spec, partition, replace(config, algorithm="one"), paths)
    lat_two = solve(spec, partition, replace(config, algorithm="two"), paths)
    return discrete_error(lat_one, lat_two)


def reference_step_residual(
    spec: ProblemSpec,
    partition: Partition,
    config: SolverConfig,
    j0: int | None = None,
    paths: BrownianPaths | None = None,
) -> float:
    """Residual of one implicit-form backward step applied to the reference.

    Plugs the analytic reference into
        V(t_{j0-1}) - E[V(t_j0)|F] - dt * L(t_{j0-1}, x, V(t_{j0-1}))
    (order-zero component, max-abs over samples and grid) and returns it.
    Consistency of the scheme means this shrinks with the mesh.
    """
    if spec.analytic_reference is None:
        raise ReferenceRequiredError(f"{spec.name!r} has no analytic reference")
    j0 = partition.n0 if j0 is None else j0
    if paths is None:
        paths = simulate_increments(partition, spec.d, config.samples, config.seed)
    est = ConditionalEstimator(config.estimator, paths)
    S = paths.sample_count
    p = spec.p
    lit = config.paper_literal_stencil
    M = spec.M if config.M is None else config.M

    def ref_stacks(j):
        w = paths.W[:, j, :].reshape(S, *([1] * p), spec.d)
        t = float(partition.time_points[j])
        V, Vbar = spec.analytic_reference(t, partition.points, w)
        V = np.broadcast_to(np.asarray(V, float), (S,) + partition.grid_shape + (spec.q,)).copy()
        Vbar = np.broadcast_to(
            np.asarray(Vbar, float), (S,) + partition.grid_shape + (spec.q, spec.d)
        ).copy()
        return _rebuild(V, M, partition, lit), _rebuild(Vbar, M, partition, lit)

    v_next, _ = ref_stacks(j0)
    v_prev, vbar_prev = ref_stacks(j0 - 1)
    zkey = zero_key(p)
    cond = est.cond_mean(v_next[zkey], j0)
    dt = float(partition.time_increments[j0 - 1])
    args = operator_arguments(
        float(partition.time_points[j0 - 1]), partition, v_prev, vbar_prev, spec.k, spec.m
    )
    residual = v_prev[zkey] - cond - dt * evaluate_driver(spec, args)
    return float(np.max(np.abs(residual)))


# ---------------------------------------------------------------------------
# Time-increment regularity
# ---------------------------------------------------------------------------


def increment_regularity(lattice: SolutionLattice, M: int | None = None):
    """Mean squared sup-norm increments E max|V(t)-V(s)|^2 over grid lags.

    Returns (lags, moments, slope) with one entry per ordered grid-time pair
    drawn from the stored slices 0..n0-1 and a log-log least-squares slope.
    """
    M = lattice.M if M is None else M
    p = lattice.spec.p
    n0 = lattice.partition.n0
    times = lattice.partition.time_points
    S = lattice.sample_count
    lags, moments = [], []
    for j1 in range(n0):
        for j2 in range(j1 + 1, n0):
            worst = None
            for c in range(M + 1):
                for idx in enumerate_multi_indices(c, p).indices:
                    diff = np.abs(lattice.V[(c, idx)][:, j2] - lattice.V[(c, idx)][:, j1])
                    diff = diff.reshape(S, -1).max(axis=1)
                    worst = diff if worst is None else np.maximum(worst, diff)
            lags.append(float(times[j2] - times[j1]))
            moments.append(float((worst**2).mean()))
    lags = np.array(lags)
    moments = np.array(moments)
    good = moments > 0
    if good.sum() < 2:
        return lags, moments, None
    slope = float(np.polyfit(np.log(lags[good]), np.log(moments[good]), 1)[0])
    return lags, moments, slope


# ---------------------------------------------------------------------------
# First-order Malliavin diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MalliavinSystem:
    """Linear backward system for the Malliavin derivative at one branch time.

    Coefficients are the operator Jacobians frozen along the base solve's
    sample paths; the terminal condition is the gradient of the terminal field
    in the terminal Brownian state.
    """

    theta_index: int
    terminal: np.ndarray  # (S,) + grid + (q, d)
    coefficients: dict[int, OperatorJacobians]  # time index -> Jacobians


@dataclass
class MalliavinLattice:
    """D_theta V and D_theta Vbar on the solution lattice; zero before theta."""

    theta_index: int
    partition: Partition
    D_V: dict[StackKey, np.ndarray]  # (S, n0+1) + grid + (q, d)
    D_Vbar: dict[StackKey, np.ndarray]  # (S, n0+1) + grid + (q, d, d)


def _base_args_at(lattice: SolutionLattice, j: int):
    spec = lattice.spec
    v_stack = {key: arr[:, j] for key, arr in lattice.V.items()}
    vbar_stack = {key: arr[:, j] for key, arr in lattice.Vbar.items()}
    return operator_arguments(
        float(lattice.partition.time_points[j]),
        lattice.partition,
        v_stack,
        vbar_stack,
        spec.k,
        spec.m,
    )


def frozen_coefficients(
    spec: ProblemSpec, base: SolutionLattice, use_analytic: bool = True
) -> dict[int, OperatorJacobians]:
    """Operator Jacobians along the base solve at every grid time."""
    return {
        j: operator_jacobians(spec, _base_args_at(base, j), use_analytic=use_analytic)
        for j in range(base.partition.n0 + 1)
    }


def _terminal_gradient(spec: ProblemSpec, base: SolutionLattice, h: float = 1e-6) -> np.ndarray:
    part = base.partition
    S = base.sample_count
    w_T = base.paths.W[:, -1, :].reshape(S, *([1] * part.p), spec.d)
    if spec.terminal_w_gradient is not None:
        g = spec.terminal_w_gradient(part.points, w_T)
        return np.broadcast_to(
            np.asarray(g, dtype=float), (S,) + part.grid_shape + (spec.q, spec.d)
        ).copy()
    grad = np.empty((S,) + part.grid_shape + (spec.q, spec.d))
    for i in range(spec.d):
        step = h * np.maximum(1.0, np.abs(w_T[..., i]))
        up = w_T.copy()
        dn = w_T.copy()
        up[..., i] += step
        dn[..., i] -= step
        diff = (spec.terminal(part.points, up) - spec.terminal(part.points, dn))
        grad[..., i] = diff / (2.0 * step)[..., None]
    return grad


def build_malliavin_system(
    spec: ProblemSpec,
    base: SolutionLattice,
    theta_index: int,
    coefficients: dict[int, OperatorJacobians] | None = None,
) -> MalliavinSystem:
    if not 0 <= theta_index <= base.partition.n0:
        raise InvalidPartitionError(f"theta index {theta_index} outside the time grid")
    if coefficients is None:
        coefficients = frozen_coefficients(spec, base)
    return MalliavinSystem(
        theta_index=theta_index,
        terminal=_terminal_gradient(spec, base),
        coefficients=coefficients,
    )


def _linear_driver(jac: OperatorJacobians, u_stack, ubar_stack) -> np.ndarray:
    out = None
    for key, coeff in jac.dL_dv.items():
        term = np.einsum("...rs,...sj->...rj", coeff, u_stack[key])
        out = term if out is None else out + term
    for key, coeff in jac.dL_dvbar.items():
        term = np.einsum("...rsi,...sij->...rj", coeff, ubar_stack[key])
        out = out + term
    return out


def _linear_diffusion(jac: OperatorJacobians, u_stack) -> np.ndarray:
    out = None
    for key, coeff in jac.dJ_dv.items():
        term = np.einsum("...ris,...sj->...rij", coeff, u_stack[key])
        out = term if out is None else out + term
    return out


def solve_malliavin_system(
    system: MalliavinSystem,
    base: SolutionLattice,
) -> MalliavinLattice:
    """Backward solve of the frozen linear system with the explicit scheme.

    Reuses the base solve's paths and estimator configuration; coefficients
    enter as per-sample exogenous data.  Values at grid times before the
    branch time are exactly zero.
    """
    spec = base.spec
    part = base.partition
    cfg = base.config
    est = ConditionalEstimator(cfg.estimator, base.paths)
    lit = cfg.paper_literal_stencil
    M = base.M
    p = spec.p
    n0 = part.n0
    S = base.sample_count
    grid = part.grid_shape
    theta = system.theta_index

    D_V, D_Vbar = {}, {}
    for c in range(M + 1):
        for idx in enumerate_multi_indices(c, p).indices:
            D_V[(c, idx)] = np.zeros((S, n0 + 1) + grid + (spec.q, spec.d))
            D_Vbar[(c, idx)] = np.zeros((S, n0 + 1) + grid + (spec.q, spec.d, spec.d))

    u_stack = _rebuild(system.terminal, M, part, lit)
    ubar_stack = {key: np.zeros(arr.shape + (spec.d,)) for key, arr in u_stack.items()}
    for key in u_stack:
        D_V[key][:, n0] = u_stack[key]

    zkey = zero_key(p)
    for j0 in range(n0, theta, -1):
        dt = float(part.time_increments[j0 - 1])
        drift = _linear_driver(system.coefficients[j0], u_stack, ubar_stack)

        u_prev = est.cond_mean(u_stack[zkey] + dt * drift, j0)
        u_stack_prev = _rebuild(u_prev, M, part, lit)

        u_dw = est.cond_mean_times_dw(u_stack[zkey], j0)
        drift_dw = est.cond_mean_times_dw(drift, j0)
        diff_term = _linear_diffusion(system.coefficients[j0 - 1], u_stack_prev)
        ubar_prev = u_dw / dt + drift_dw + diff_term
        ubar_stack_prev = _rebuild(ubar_prev, M, part, lit)

        for key in u_stack_prev:
            D_V[key][:, j0 - 1] = u_stack_prev[key]
            D_Vbar[key][:, j0 - 1] = ubar_stack_prev[key]
        u_stack, ubar_stack = u_stack_prev, ubar_stack_prev

    return MalliavinLattice(theta_index=theta, partition=part, D_V=D_V, D_Vbar=D_Vbar)


def build_malliavin_lattices(
    spec: ProblemSpec,
    base: SolutionLattice,
    theta_indices=None,
) -> dict[int, MalliavinLattice]:
    """Solve the linear system for every requested branch time (default: all)."""
    if theta_indices is None:
        theta_indices = range(base.partition.n0)
    coefficients = frozen_coefficients(spec, base)
    out = {}
    for theta in theta_indices:
        system = build_malliavin_system(spec, base, theta, coefficients)
        out[theta] = solve_malliavin_system(system, base)
    return out


# ---------------------------------------------------------------------------
# Representation identity check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdentityRow:
    time_index: int
    t: float
    x: tuple[float, ...]
    c: int
    multi_index: tuple[int, ...]
    component: tuple[int, int]
    mean_lhs: float
    mean_rhs: float
    var_lhs: float
    var_rhs: float
    zscore: float


@dataclass(frozen=True)
class IdentityReport:
    rows: tuple[IdentityRow, ...]
    max_abs_z: float

    def passed(self, z_tol: float = 3.0) -> bool:
        return self.max_abs_z < z_tol


def _moment_z(lhs: np.ndarray, rhs: np.ndarray) -> tuple[float, float, float, float, float]:
    """First-two-moment comparison of two sample vectors, conservative z."""
    S = lhs.shape[0]
    m_l, m_r = float(lhs.mean()), float(rhs.mean())
    v_l = float(lhs.var(ddof=1)) if S > 1 else 0.0
    v_r = float(rhs.var(ddof=1)) if S > 1 else 0.0
    scale = max(abs(m_l), abs(m_r), math.sqrt(v_l), math.sqrt(v_r), 1e-12)

    se_mean = math.sqrt((v_l + v_r) / S)
    dm = m_l - m_r
    if abs(dm) <= 1e-10 * scale:
        z_mean = 0.0  # numerically identical; float jitter is not evidence
    elif se_mean == 0.0:
        z_mean = math.inf
    else:
        z_mean = dm / se_mean

    def var_se(x, v):
        if S < 2:
            return 0.0
        m4 = float(((x - x.mean()) ** 4).mean())
        return math.sqrt(max(m4 - v**2, 0.0) / S)

    se_var = math.hypot(var_se(lhs, v_l), var_se(rhs, v_r))
    dv = v_l - v_r
    if abs(dv) <= 1e-10 * scale**2:
        z_var = 0.0
    elif se_var == 0.0:
        z_var = math.inf
    else:
        z_var = dv / se_var
    z = max(abs(z_mean), abs(z_var))
    return m_l, m_r, v_l, v_r, z


def check_representation_identity(
    spec: ProblemSpec,
    base: SolutionLattice,
    malliavin: dict[int, MalliavinLattice] | None = None,
) -> IdentityReport:
    """Moment comparison of Vbar against the diagonal Malliavin derivative
    plus the diffusion driver, at every grid time and grid point.

    Only the first two moments are compared; the underlying statement is an
    equality in distribution, and matching means and variances at every node
    already rules out sign and scaling mistakes at Monte Carlo resolution.
    """
    part = base.partition
    p = spec.p
    n0 = part.n0
    if malliavin is None:
        malliavin = build_malliavin_lattices(spec, base)
    missing = [j for j in range(n0) if j not in malliavin]
    if missing:
        raise InvalidPartitionError(f"missing Malliavin solves for theta indices {missing}")

    coords = part.points.reshape(-1, p)
    rows = []
    worst = 0.0
    for j in range(n0):
        diag = malliavin[j]
        v_stack = {key: arr[:, j] for key, arr in base.V.items()}
        args = operator_arguments(
            float(part.time_points[j]), part, v_stack, {}, spec.n, -1
        )
        J0 = evaluate_diffusion_driver(spec, args)
        J_stack = difference_stack_arrays(
            J0, base.M, part, batch_ndim=1, paper_literal=base.config.paper_literal_stencil
        )
        for c in range(base.M + 1):
            for idx in enumerate_multi_indices(c, p).indices:
                lhs_full = base.Vbar[(c, idx)][:, j]
                rhs_full = diag.D_V[(c, idx)][:, j] + J_stack[(c, idx)]
                S = lhs_full.shape[0]
                lhs_flat = lhs_full.reshape(S, -1, spec.q * spec.d)
                rhs_flat = rhs_full.reshape(S, -1, spec.q * spec.d)
                for g in range(lhs_flat.shape[1]):
                    for comp in range(spec.q * spec.d):
                        m_l, m_r, v_l, v_r, z = _moment_z(
                            lhs_flat[:, g, comp], rhs_flat[:, g, comp]
                        )
                        rows.append(
                            IdentityRow(
                                time_index=j,
                                t=float(part.time_points[j]),
                                x=tuple(float(v) for v in coords[g]),
                                c=c,
                                multi_index=idx,
                                component=(comp // spec.d, comp % spec.d),
                                mean_lhs=m_l,
                                mean_rhs=m_r,
                                var_lhs=v_l,
                                var_rhs=v_r,
                                zscore=z,
                            )
                        )
                        worst = max(worst, abs(z))
    return IdentityReport(rows=tuple(rows), max_abs_z=worst)
