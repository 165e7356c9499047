"""Discretized Hilbert space X = R^n x L^2([-d, 0]; R^n) for delay problems.

A delay state is a pair x = (x0, x1): the present value x0 in R^n and the past
segment x1 sampled at quadrature nodes of [-d, 0].  This module provides

* :class:`SegmentGrid` -- the quadrature discretization of [-d, 0],
* :class:`LiftedState` -- a point of the discretized X,
* the inner product of X and the bounded inverse ``apply_A_inverse`` of the
  delay-semigroup generator,
* the operator B = (A~^-1)* A~^-1, the weak norm ``|x|_{-1} = |A~^-1 x|_X``,
  its eigenbasis with projections, and the weak B-condition check.

All adjoints are taken with respect to the weighted metric
W = diag(I_n, weights (x) I_n), so the Hilbert-space identities survive
discretization exactly.

Discrete dissipativity.  The cumulative trapezoid matrix underlying
``apply_A_inverse`` is augmented by a single boundary term ``h/4 * x1(0)``
at the node s = 0.  The exact summation-by-parts identity of the trapezoid
rule on a uniform grid,

    sum_k w_k F_k x_k = (integral of x1)^2 / 2 + h^2/8 * (x1(-d)^2 - x1(0)^2),

shows the uncorrected rule loses definiteness through the -x1(0)^2 boundary
term.  The correction cancels it, which makes the discrete A~^-1 injective
(so B is strictly positive definite), and makes <A~^-1 x, x>_X <= 0 hold to
machine precision, hence the weak B-condition with C_0 = 0.  The price is an
O(h) perturbation of the output segment at the single node s = 0, which is
O(h^3) in the L^2 norm and does not affect second-order convergence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, NumericalError

__all__ = [
    "SegmentGrid",
    "LiftedState",
    "OperatorMatrix",
    "BSpectrum",
    "inner_X",
    "norm_X",
    "apply_A_inverse",
    "a_inverse_matrix",
    "build_B",
    "build_A_star",
    "norm_minus1",
    "inner_minus1",
    "spectrum_B",
    "projection_P",
    "projection_Q",
    "check_weak_B",
    "WeakBReport",
    "state_to_vector",
    "vector_to_state",
    "operator_to_csv",
]


# ---------------------------------------------------------------------------
# grids and states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentGrid:
    """Quadrature discretization of the past interval [-d, 0].

    ``nodes`` are strictly increasing with ``nodes[-1] == 0`` and
    ``nodes[0] >= -d``; ``weights`` are positive and integrate constants over
    [-d, 0] exactly.  Use :meth:`uniform` for the standard trapezoid grid.
    """

    d: float
    m: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        d = float(self.d)
        if not np.isfinite(d) or d <= 0:
            raise InvalidArgumentError(f"maximum delay d must be positive, got {self.d}")
        if self.m < 2:
            raise InvalidArgumentError(
                "segment grid needs m >= 2 nodes (the past needs at least the "
                f"two endpoints for the trapezoid rule), got m={self.m}"
            )
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != (self.m,) or weights.shape != (self.m,):
            raise InvalidArgumentError("nodes and weights must both have shape (m,)")
        if np.any(np.diff(nodes) <= 0):
            raise InvalidArgumentError("nodes must be strictly increasing")
        if nodes[-1] != 0.0:
            raise InvalidArgumentError("last node must be exactly 0")
        if nodes[0] < -d - 1e-12 * d:
            raise InvalidArgumentError("nodes must lie in [-d, 0]")
        if np.any(weights <= 0):
            raise InvalidArgumentError("quadrature weights must be positive")
        if abs(weights.sum() - d) > 1e-12 * d:
            raise InvalidArgumentError(
                f"quadrature weights must sum to d={d} (got {weights.sum()!r})"
            )
        object.__setattr__(self, "d", d)
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, d: float, m: int) -> "SegmentGrid":
        """Uniform grid on [-d, 0] including both endpoints, trapezoid weights."""
        if m < 2:
            raise InvalidArgumentError(
                f"segment grid needs m >= 2 nodes, got m={m}"
            )
        nodes = np.linspace(-d, 0.0, m)
        nodes[-1] = 0.0
        h = d / (m - 1)
        weights = np.full(m, h)
        weights[0] = weights[-1] = h / 2
        return cls(d=d, m=m, nodes=nodes, weights=weights)

    @property
    def spacing(self) -> float:
        """Node spacing (uniform grids only)."""
        diffs = np.diff(self.nodes)
        if not np.allclose(diffs, diffs[0], rtol=1e-10, atol=0.0):
            raise InvalidArgumentError("grid is not uniform; spacing undefined")
        return float(diffs[0])

    def quadrature(self, values: np.ndarray) -> np.ndarray:
        """Integrate node values over [-d, 0] (contraction over axis 0)."""
        values = np.asarray(values, dtype=float)
        return np.tensordot(self.weights, values, axes=(0, 0))


@dataclass(frozen=True)
class LiftedState:
    """A point x = (x0, x1) of the discretized space X.

    ``x0``: shape (n,). ``x1``: shape (m, n), past values at the grid nodes.
    """

    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        x1 = np.asarray(self.x1, dtype=float)
        if x1.ndim == 1:
            x1 = x1[:, None]
        if x0.ndim != 1 or x1.ndim != 2 or x1.shape[1] != x0.shape[0]:
            raise InvalidArgumentError(
                f"inconsistent state shapes: x0 {x0.shape}, x1 {x1.shape}"
            )
        x0.flags.writeable = False
        x1.flags.writeable = False
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return self.x1.shape[0]

    @classmethod
    def constant(cls, x0, grid: SegmentGrid) -> "LiftedState":
        """State with segment identically equal to the present value."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return cls(x0=x0, x1=np.tile(x0, (grid.m, 1)))


def _check_match(x: LiftedState, grid: SegmentGrid):
    if x.m != grid.m:
        raise InvalidArgumentError(
            f"state has {x.m} segment nodes but grid has {grid.m}"
        )


def state_to_vector(x: LiftedState) -> np.ndarray:
    """Flatten (x0, x1) into the n(1+m) vector used by OperatorMatrix."""
    return np.concatenate([x.x0, x.x1.ravel()])


def vector_to_state(v: np.ndarray, grid: SegmentGrid, n: int = 1) -> LiftedState:
    v = np.asarray(v, dtype=float)
    if v.shape != (n * (1 + grid.m),):
        raise InvalidArgumentError(
            f"vector length {v.shape} does not match n(1+m) = {n * (1 + grid.m)}"
        )
    return LiftedState(x0=v[:n], x1=v[n:].reshape(grid.m, n))


# ---------------------------------------------------------------------------
# inner products
# ---------------------------------------------------------------------------


def inner_X(x: LiftedState, z: LiftedState, grid: SegmentGrid) -> float:
    """Inner product <x, z>_X = x0.z0 + integral of x1.z1 over [-d, 0]."""
    _check_match(x, grid)
    _check_match(z, grid)
    if x.n != z.n:
        raise InvalidArgumentError(f"state dimensions differ: {x.n} vs {z.n}")
    seg = float(np.sum(grid.weights[:, None] * x.x1 * z.x1))
    return float(x.x0 @ z.x0) + seg


def norm_X(x: LiftedState, grid: SegmentGrid) -> float:
    return float(np.sqrt(max(inner_X(x, x, grid), 0.0)))


def metric_diagonal(grid: SegmentGrid, n: int = 1) -> np.ndarray:
    """Diagonal of the metric W: identity on R^n, quadrature weights on nodes."""
    return np.concatenate([np.ones(n), np.repeat(grid.weights, n)])


# ---------------------------------------------------------------------------
# operator matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatorMatrix:
    """Dense matrix acting on flattened states, with its weighted metric."""

    entries: np.ndarray
    weight_metric: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        metric = np.asarray(self.weight_metric, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise InvalidArgumentError("operator entries must be a square matrix")
        if metric.shape != (entries.shape[0],):
            raise InvalidArgumentError("weight_metric must match matrix dimension")
        if np.any(metric <= 0):
            raise InvalidArgumentError("weight metric must be positive")
        entries.flags.writeable = False
        metric.flags.writeable = False
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "weight_metric", metric)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.entries @ v

    def adjoint(self) -> "OperatorMatrix":
        """Adjoint with respect to the weighted metric: A* = W^-1 A^T W."""
        W = self.weight_metric
        entries = (self.entries.T * W[None, :]) / W[:, None]
        return OperatorMatrix(entries=entries, weight_metric=W)

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """<u, v> in the weighted metric."""
        return float(u @ (self.weight_metric * v))


def adjoint_wrt_metric(entries: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """Metric adjoint of a raw matrix: W^-1 A^T W for diagonal W."""
    metric = np.asarray(metric, dtype=float)
    return (np.asarray(entries, dtype=float).T * metric[None, :]) / metric[:, None]


def _cumulative_matrix(grid: SegmentGrid) -> np.ndarray:
    """Matrix C with (C x1)_k = integral of x1 over [nodes[k], 0].

    Trapezoid cumulative sums from the right, plus the boundary
    dissipativity correction h_last/4 at the node s = 0 (see module
    docstring).
    """
    m = grid.m
    gaps = np.diff(grid.nodes)
    C = np.zeros((m, m))
    for j in range(m - 1):
        C[: j + 1, j] += gaps[j] / 2
        C[: j + 1, j + 1] += gaps[j] / 2
    # Boundary corrections restoring exact discrete dissipativity.  On a
    # uniform grid only the s = 0 node is touched; on a non-uniform grid each
    # node absorbs the positive part of the local summation-by-parts defect.
    h2 = gaps**2 / 8.0
    defect = np.empty(m)
    defect[0] = -h2[0]
    defect[1:-1] = h2[:-1] - h2[1:]
    defect[-1] = h2[-1]
    C[np.arange(m), np.arange(m)] += np.maximum(defect, 0.0) / grid.weights
    return C


def a_inverse_matrix(grid: SegmentGrid, n: int = 1) -> OperatorMatrix:
    """Matrix of the bounded inverse A~^-1 x = (-x0, -x0 - int_s^0 x1)."""
    m = grid.m
    C = _cumulative_matrix(grid)
    M1 = np.zeros((1 + m, 1 + m))
    M1[0, 0] = -1.0
    M1[1:, 0] = -1.0
    M1[1:, 1:] = -C
    if n > 1:
        M = np.kron(M1, np.eye(n))
    else:
        M = M1
    return OperatorMatrix(entries=M, weight_metric=metric_diagonal(grid, n))


def apply_A_inverse(x: LiftedState, grid: SegmentGrid) -> LiftedState:
    """Apply A~^-1: output present -x0, segment s -> -x0 - int_s^0 x1."""
    _check_match(x, grid)
    C = _cumulative_matrix(grid)
    seg = -x.x0[None, :] - C @ x.x1
    return LiftedState(x0=-x.x0, x1=seg)


def build_B(grid: SegmentGrid, n: int = 1) -> OperatorMatrix:
    """B = (A~^-1)* A~^-1 with the adjoint in the weighted metric."""
    if np.any(grid.weights <= 0):
        raise InvalidArgumentError("singular quadrature: zero weight")
    Ainv = a_inverse_matrix(grid, n)
    B = Ainv.adjoint().entries @ Ainv.entries
    return OperatorMatrix(entries=B, weight_metric=Ainv.weight_metric)


def build_A_star(grid: SegmentGrid, n: int = 1) -> OperatorMatrix:
    """Discrete A~*: the metric adjoint of the inverse of the A~^-1 matrix."""
    Ainv = a_inverse_matrix(grid, n)
    A = np.linalg.inv(Ainv.entries)
    return OperatorMatrix(
        entries=adjoint_wrt_metric(A, Ainv.weight_metric),
        weight_metric=Ainv.weight_metric,
    )


def norm_minus1(x: LiftedState, grid: SegmentGrid) -> float:
    """Weak norm |x|_{-1} = |A~^-1 x|_X."""
    return norm_X(apply_A_inverse(x, grid), grid)


def inner_minus1(x: LiftedState, z: LiftedState, grid: SegmentGrid) -> float:
    """Weak inner product <x, z>_{-1} = <A~^-1 x, A~^-1 z>_X = <Bx, z>_X."""
    return inner_X(apply_A_inverse(x, grid), apply_A_inverse(z, grid), grid)


# ---------------------------------------------------------------------------
# spectrum of B and projections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BSpectrum:
    """Eigen-decomposition of B in the weighted metric.

    ``eigenvalues`` descending and strictly positive; columns of
    ``eigenvectors_X`` are the X-orthonormal basis f_i; columns of
    ``eigenvectors_minus1`` are e_i = f_i / sqrt(lambda_i).
    """

    eigenvalues: np.ndarray
    eigenvectors_X: np.ndarray
    eigenvectors_minus1: np.ndarray
    weight_metric: np.ndarray = field(repr=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if np.any(lam <= 0):
            raise NumericalError(
                "B spectrum contains non-positive eigenvalues; B must be "
                "strictly positive",
                diagnostics={"min_eigenvalue": float(lam.min())},
            )
        if np.any(np.diff(lam) > 0):
            raise InvalidArgumentError("eigenvalues must be sorted descending")

    @property
    def size(self) -> int:
        return self.eigenvalues.shape[0]


def spectrum_B(B: OperatorMatrix) -> BSpectrum:
    """Solve the metric-symmetric eigenproblem of B.

    B is self-adjoint in the metric W, so S = W^1/2 B W^-1/2 is symmetric
    (up to drift, symmetrized before the solve) and shares B's eigenvalues.
    """
    W = B.weight_metric
    sqrtW = np.sqrt(W)
    S = (sqrtW[:, None] * B.entries) / sqrtW[None, :]
    S = (S + S.T) / 2
    try:
        lam, Q = scipy.linalg.eigh(S)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise NumericalError(
            "eigensolver failed on B", diagnostics={"error": str(exc)}
        ) from exc
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    # back-transform: f_i = W^-1/2 q_i are X-orthonormal eigenvectors of B
    F = Q[:, order] / sqrtW[:, None]
    if lam[-1] <= 0:
        raise NumericalError(
            "B is not strictly positive on this discretization",
            diagnostics={"min_eigenvalue": float(lam[-1])},
        )
    E = F / np.sqrt(lam)[None, :]
    return BSpectrum(
        eigenvalues=lam,
        eigenvectors_X=F,
        eigenvectors_minus1=E,
        weight_metric=W,
    )


def projection_P(spec: BSpectrum, N: int) -> np.ndarray:
    """Orthogonal projection P_N onto span{f_1..f_N} (matrix on X)."""
    if not 0 <= N <= spec.size:
        raise InvalidArgumentError(f"N must be in [0, {spec.size}], got {N}")
    F = spec.eigenvectors_X[:, :N]
    return F @ (F.T * spec.weight_metric[None, :])


def projection_Q(spec: BSpectrum, N: int) -> np.ndarray:
    """Complement projection Q_N = I - P_N."""
    return np.eye(spec.size) - projection_P(spec, N)


def operator_norm(entries: np.ndarray, metric: np.ndarray) -> float:
    """Operator norm in L(X) for the weighted metric."""
    sqrtW = np.sqrt(metric)
    S = (sqrtW[:, None] * entries) / sqrtW[None, :]
    return float(np.linalg.norm(S, ord=2))


# ---------------------------------------------------------------------------
# weak B-condition check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeakBReport:
    """Result of the weak B-condition sampling check."""

    max_ratio: float
    samples: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.tolerance


def check_weak_B(
    B: OperatorMatrix,
    samples: int,
    seed: int,
    *,
    A_star: OperatorMatrix | None = None,
    grid: SegmentGrid | None = None,
    n: int = 1,
    tolerance: float = 1e-8,
) -> WeakBReport:
    """Sample max of <A~* B x, x>_X / |x|^2_{-1} over random states.

    PASS iff the max is below ``tolerance`` -- the weak B-condition with
    C_0 = 0.  ``A_star`` defaults to the metric adjoint of the inverse of the
    A~^-1 matrix built from ``grid``.
    """
    if A_star is None:
        if grid is None:
            raise InvalidArgumentError("check_weak_B needs either A_star or grid")
        A_star = build_A_star(grid, n)
    W = B.weight_metric
    AB = A_star.entries @ B.entries
    rng = np.random.default_rng(seed)
    max_ratio = -np.inf
    dim = B.dim
    for _ in range(samples):
        x = rng.standard_normal(dim)
        nrm = np.linalg.norm(x)
        while nrm == 0.0:  # zero draw guard: |x|_{-1} would vanish
            x = rng.standard_normal(dim)
            nrm = np.linalg.norm(x)
        x /= nrm
        num = float(x @ (W * (AB @ x)))
        den = float(x @ (W * (B.entries @ x)))
        max_ratio = max(max_ratio, num / den)
    return WeakBReport(max_ratio=max_ratio, samples=samples, tolerance=tolerance)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def operator_to_csv(op: OperatorMatrix, path) -> None:
    """Dump a matrix as rows "i,j,value" (row-major) for debugging."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "value"])
        for i in range(op.dim):
            for j in range(op.dim):
                writer.writerow([i, j, repr(op.entries[i, j])])
