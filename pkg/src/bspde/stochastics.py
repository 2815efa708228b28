"""Brownian increment simulation and conditional-expectation estimators.

Paths are generated from a counter-based Philox stream: a single canonical
pass fills the (sample, step, component) array of uniforms, which are mapped
to Gaussians by the inverse CDF.  Regenerating with the same seed is therefore
bit-identical no matter how the surrounding computation is scheduled.

Estimators realize E[. | F_{t_{j0-1}}] for the backward schemes:

* ``analytic`` fits the target cross-section as a polynomial in the *next*
  Brownian state W(t_j0) and then integrates the fitted polynomial against the
  Gaussian increment law in closed form.  For targets that are exactly
  polynomial in W(t_j0) (every built-in test problem) the conditional
  expectation is exact up to linear-algebra roundoff.
* ``regression`` is the usual cross-sectional least-squares projection on a
  polynomial basis of the *current* state W(t_{j0-1}), with optional ridge.
* ``nested`` brute-forces the expectation by branching fresh inner paths; it
  needs the target as a functional of the continuation and is provided as an
  oracle (see :func:`condexp_nested`), not as an in-scheme estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import CapacityError, InvalidPartitionError, SingularDesignError
from .grid import Partition

DEFAULT_CAPACITY = 1 << 27  # float64 entries, ~1 GiB
ESTIMATOR_KINDS = ("analytic", "regression", "nested")


@dataclass(frozen=True)
class BrownianPaths:
    """Increments dW[s, j, i] ~ N(0, dt_j) and running sums W[s, j, i]."""

    partition: Partition
    d: int
    seed: int
    increments: np.ndarray  # (S, n0, d)
    W: np.ndarray  # (S, n0+1, d), W[:, 0] = 0

    @property
    def sample_count(self) -> int:
        return self.increments.shape[0]


def simulate_increments(
    partition: Partition,
    d: int,
    S: int,
    seed: int,
    max_entries: int = DEFAULT_CAPACITY,
) -> BrownianPaths:
    """Draw S independent d-dimensional paths over the partition's time grid."""
    if S < 1 or d < 1:
        raise InvalidPartitionError(f"need S >= 1 and d >= 1, got S={S}, d={d}")
    if seed < 0:
        raise InvalidPartitionError(f"seed must be a nonnegative integer, got {seed}")
    n0 = partition.n0
    if S * n0 * d > max_entries:
        raise CapacityError(
            f"S*n0*d = {S * n0 * d} exceeds the capacity budget {max_entries}"
        )
    rng = np.random.Generator(np.random.Philox(key=seed))
    u = rng.random((S, n0, d))
    # guard the measure-zero u == 0 draw; ndtri(0) would be -inf
    u = np.where(u == 0.0, 2.0**-54, u)
    z = ndtri(u)
    dw = z * np.sqrt(partition.time_increments)[None, :, None]
    w = np.zeros((S, n0 + 1, d))
    np.cumsum(dw, axis=1, out=w[:, 1:, :])
    dw.setflags(write=False)
    w.setflags(write=False)
    return BrownianPaths(partition=partition, d=d, seed=seed, increments=dw, W=w)


def permute_future_increments(paths: BrownianPaths, from_step: int, permutation) -> BrownianPaths:
    """Rearrange increments at steps > from_step across samples.

    The rearrangement is measure preserving, so values computed at or before
    t_{from_step} by an adapted scheme must not change; tests use this to
    assert the schemes never peek at later increments.
    """
    permutation = np.asarray(permutation, dtype=int)
    inc = paths.increments.copy()
    inc[:, from_step:, :] = inc[permutation, from_step:, :]
    w = np.zeros_like(paths.W)
    np.cumsum(inc, axis=1, out=w[:, 1:, :])
    inc.setflags(write=False)
    w.setflags(write=False)
    return BrownianPaths(
        partition=paths.partition, d=paths.d, seed=paths.seed, increments=inc, W=w
    )


@dataclass(frozen=True)
class EstimatorSpec:
    """Strategy for conditional expectations inside the backward schemes.

    ridge=None means the scale-free default 1e-8 * S, applied at fit time.
    """

    kind: str = "analytic"
    degree: int = 3
    ridge: float | None = None
    inner: int = 1000

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise InvalidPartitionError(
                f"estimator kind must be one of {ESTIMATOR_KINDS}, got {self.kind!r}"
            )
        if self.degree < 0:
            raise InvalidPartitionError(f"basis degree must be >= 0, got {self.degree}")
        if self.ridge is not None and self.ridge < 0:
            raise InvalidPartitionError(f"ridge must be >= 0, got {self.ridge}")
        if self.inner < 1:
            raise InvalidPartitionError(f"inner sample count must be >= 1, got {self.inner}")

    def basis_size(self, d: int) -> int:
        return math.comb(self.degree + d, d)


def monomial_exponents(degree: int, d: int) -> np.ndarray:
    """Exponent rows of the d-dimensional monomial basis of total degree <= degree."""

    def compositions(total, dims):
        if dims == 1:
            yield (total,)
            return
        for v in range(total + 1):
            for rest in compositions(total - v, dims - 1):
                yield (v,) + rest

    rows = [row for total in range(degree + 1) for row in compositions(total, d)]
    return np.array(rows, dtype=int)


def _design_matrix(states: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    # states (S, d), exponents (B, d) -> (S, B)
    return np.prod(states[:, None, :] ** exponents[None, :, :], axis=2)


def _gaussian_moment(k: int, var: float) -> float:
    """E[Z^k] for Z ~ N(0, var)."""
    if k % 2 == 1:
        return 0.0
    half = k // 2
    return var**half * math.prod(range(1, k, 2)) if k else 1.0


def _transfer_matrix(exponents: np.ndarray, var: float, extra: np.ndarray) -> np.ndarray:
    """T with E[m_alpha(w+Z) * Z^extra] = sum_beta T[beta, alpha] * m_beta(w).

    Binomial expansion of (w+Z)^alpha against independent N(0, var) components.
    """
    B = exponents.shape[0]
    T = np.zeros((B, B))
    index_of = {tuple(row): i for i, row in enumerate(exponents)}
    for a_i, alpha in enumerate(exponents):
        for beta in np.ndindex(*(alpha + 1)):
            b_i = index_of[tuple(beta)]
            coeff = 1.0
            for l in range(len(alpha)):
                coeff *= math.comb(int(alpha[l]), int(beta[l]))
                coeff *= _gaussian_moment(int(alpha[l] - beta[l] + extra[l]), var)
                if coeff == 0.0:
                    break
            T[b_i, a_i] += coeff
    return T


@dataclass
class CoefficientRecord:
    step: int
    operation: str  # "mean" or "dw{i}"
    column: str
    exponents: tuple[int, ...]
    value: float


class ConditionalEstimator:
    """Per-solve conditional-expectation engine bound to a set of paths.

    cond_mean(targets, j0)          ~ E[targets | F_{t_{j0-1}}]
    cond_mean_times_dw(targets, j0) ~ E[targets * dW_{j0,i} | F_{t_{j0-1}}],
                                      one trailing axis per component i.

    Targets carry a leading sample axis; arbitrary trailing axes are treated
    as independent regression columns.
    """

    def __init__(
        self,
        spec: EstimatorSpec,
        paths: BrownianPaths,
        record_coefficients: bool = False,
    ):
        if spec.kind == "nested":
            raise InvalidPartitionError(
                "nested estimation needs the target as a functional of the path "
                "continuation; inside the backward schemes targets are realized "
                "values, use the analytic or regression estimator (condexp_nested "
                "remains available as a standalone oracle)"
            )
        self.spec = spec
        self.paths = paths
        self.exponents = monomial_exponents(spec.degree, paths.d)
        self.records: list[CoefficientRecord] = [] if record_coefficients else None
        self._transfer_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- shared helpers -----------------------------------------------------

    def _flatten(self, targets: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
        shape = targets.shape
        return targets.reshape(shape[0], -1), shape[1:]

    def _record(self, j0: int, op: str, coef: np.ndarray, labels) -> None:
        if self.records is None:
            return
        for col in range(coef.shape[1]):
            label = labels[col] if labels is not None else str(col)
            for b, exps in enumerate(self.exponents):
                self.records.append(
                    CoefficientRecord(
                        step=j0,
                        operation=op,
                        column=label,
                        exponents=tuple(int(e) for e in exps),
                        value=float(coef[b, col]),
                    )
                )

    # -- analytic kind ------------------------------------------------------

    def _transfer(self, j0: int, component: int) -> np.ndarray:
        key = (j0, component)
        if key not in self._transfer_cache:
            var = float(self.paths.partition.time_increments[j0 - 1])
            extra = np.zeros(self.paths.d, dtype=int)
            if component >= 0:
                extra[component] = 1
            self._transfer_cache[key] = _transfer_matrix(self.exponents, var, extra)
        return self._transfer_cache[key]

    def _analytic_fit(self, flat: np.ndarray, j0: int) -> tuple[np.ndarray, np.ndarray]:
        """Least-squares polynomial fit of the targets in W(t_j0)."""
        w_next = self.paths.W[:, j0, :]
        phi = _design_matrix(w_next, self.exponents)
        coef, *_ = np.linalg.lstsq(phi, flat, rcond=None)
        return coef, phi

    def cond_mean(self, targets: np.ndarray, j0: int, labels=None) -> np.ndarray:
        flat, tail = self._flatten(np.asarray(targets, dtype=float))
        out = np.empty_like(flat)
        const = np.all(flat == flat[0:1, :], axis=0)
        # E[c | F] = c, exactly; keeps noise-free problems bit-deterministic
        out[:, const] = flat[0:1, const]
        varying = ~const
        if np.any(varying):
            if self.spec.kind == "analytic":
                coef, _ = self._analytic_fit(flat[:, varying], j0)
                w_prev = self.paths.W[:, j0 - 1, :]
                phi_prev = _design_matrix(w_prev, self.exponents)
                out[:, varying] = phi_prev @ (self._transfer(j0, -1) @ coef)
                self._record(j0, "mean", coef, labels)
            else:
                out[:, varying] = self._regress(flat[:, varying], j0, "mean", labels)
        return out.reshape(targets.shape)

    def cond_mean_times_dw(self, targets: np.ndarray, j0: int, labels=None) -> np.ndarray:
        flat, tail = self._flatten(np.asarray(targets, dtype=float))
        S = flat.shape[0]
        d = self.paths.d
        out = np.empty((S, flat.shape[1], d))
        const = np.all(flat == flat[0:1, :], axis=0)
        out[:, const, :] = 0.0  # E[c * dW | F] = 0, exactly
        varying = ~const
        if np.any(varying):
            if self.spec.kind == "analytic":
                coef, _ = self._analytic_fit(flat[:, varying], j0)
                w_prev = self.paths.W[:, j0 - 1, :]
                phi_prev = _design_matrix(w_prev, self.exponents)
                for i in range(d):
                    out[:, varying, i] = phi_prev @ (self._transfer(j0, i) @ coef)
                self._record(j0, "dw", coef, labels)
            else:
                dw = self.paths.increments[:, j0 - 1, :]
                for i in range(d):
                    out[:, varying, i] = self._regress(
                        flat[:, varying] * dw[:, i : i + 1], j0, f"dw{i}", labels
                    )
        return out.reshape(targets.shape + (d,))

    # -- regression kind ----------------------------------------------------

    def _regress(self, flat: np.ndarray, j0: int, op: str, labels) -> np.ndarray:
        w_prev = self.paths.W[:, j0 - 1, :]
        if np.all(w_prev == w_prev[0:1, :]):
            # all states coincide (j0 = 1): the projection is the sample mean
            mean = flat.mean(axis=0)
            return np.broadcast_to(mean, flat.shape).copy()
        phi = _design_matrix(w_prev, self.exponents)
        coef = ridge_solve(phi, flat, self._ridge_value(flat.shape[0]))
        self._record(j0, op, coef, labels)
        return phi @ coef

    def _ridge_value(self, S: int) -> float:
        return 1e-8 * S if self.spec.ridge is None else self.spec.ridge


def ridge_solve(phi: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """Solve the (possibly ridge-regularized) normal equations."""
    gram = phi.T @ phi
    rhs = phi.T @ y
    if ridge > 0:
        gram = gram + ridge * np.eye(gram.shape[0])
    else:
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            raise SingularDesignError(
                "regression design is rank deficient; set ridge > 0"
            )
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(
            "regression normal equations are singular; set ridge > 0"
        ) from exc


def condexp_regression(
    targets: np.ndarray,
    states: np.ndarray,
    spec: EstimatorSpec,
) -> np.ndarray:
    """Least-squares projection of targets onto polynomials of the states.

    Returns the fitted value at each sample's own state.  With all states
    equal (conditioning on trivial information) the fit degenerates to the
    plain sample mean.
    """
    targets = np.asarray(targets, dtype=float)
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if targets.shape[0] != states.shape[0]:
        raise InvalidPartitionError("targets and states must have matching sample counts")
    B = spec.basis_size(states.shape[1])
    if targets.shape[0] < B:
        raise InvalidPartitionError(
            f"need at least {B} samples for a degree-{spec.degree} basis"
        )
    if np.all(states == states[0:1, :]):
        flat = targets.reshape(targets.shape[0], -1)
        mean = flat.mean(axis=0)
        return np.broadcast_to(mean, flat.shape).reshape(targets.shape).copy()
    phi = _design_matrix(states, monomial_exponents(spec.degree, states.shape[1]))
    flat = targets.reshape(targets.shape[0], -1)
    ridge = 1e-8 * targets.shape[0] if spec.ridge is None else spec.ridge
    coef = ridge_solve(phi, flat, ridge)
    return (phi @ coef).reshape(targets.shape)


def condexp_nested(
    target_functional,
    states: np.ndarray,
    variance: float,
    inner_count: int,
    seed: int,
    max_entries: int = DEFAULT_CAPACITY,
    return_stderr: bool = False,
):
    """Brute-force conditional expectation by branching fresh continuations.

    For each outer state w the functional is averaged over inner draws
    w + Z with Z ~ N(0, variance * I_d); unbiased for E[f(W_end) | W_branch=w]
    whenever the target depends on the continuation only through its endpoint.
    """
    if inner_count < 1:
        raise InvalidPartitionError(f"inner count must be >= 1, got {inner_count}")
    if seed < 0:
        raise InvalidPartitionError(f"seed must be a nonnegative integer, got {seed}")
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    S, d = states.shape
    if S * inner_count * d > max_entries:
        raise CapacityError(
            f"S*inner*d = {S * inner_count * d} exceeds the capacity budget {max_entries}"
        )
    rng = np.random.Generator(np.random.Philox(key=seed))
    u = rng.random((S, inner_count, d))
    u = np.where(u == 0.0, 2.0**-54, u)
    z = ndtri(u) * math.sqrt(variance)
    branched = states[:, None, :] + z
    values = np.asarray(target_functional(branched), dtype=float)
    est = values.mean(axis=1)
    if not return_stderr:
        return est
    stderr = values.std(axis=1, ddof=1) / math.sqrt(inner_count) if inner_count > 1 else np.zeros_like(est)
    return est, stderr
