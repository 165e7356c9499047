"""Regularization of lag-state fields in the weak |.|_{-1} metric.

Implements Moreau-type inf-/sup-convolutions, a semiconvexity probe, an
envelope-convergence audit, and coordinate-wise mollification of fields
defined on lag states.

All weak-norm geometry is pulled back to the finite-dimensional lag-state
space: a lag state embeds into the product space X by linear interpolation
on the history segment, and the |.|_{-1} inner product restricted to that
embedding is a (L+1) x (L+1) Gram matrix.  The mollification coordinates
are the eigendirections of that Gram matrix relative to the embedded
X-metric -- the computable restriction of the operator's eigenbasis to the
lag subspace.

Envelope minimization is a two-stage derivative-free search (coarse grid
scan, then bounded coordinate descent): the fields being regularized are
usually grid-interpolated, so gradient-based solvers would chase
interpolation kinks.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import InvalidArgumentError, NumericalError
from .hilbert import SegmentGrid, build_B, metric_diagonal
from .value import ValueField

__all__ = [
    "SearchConfig",
    "EnvelopeResult",
    "MollifiedField",
    "LagSpectrum",
    "lag_gram_matrices",
    "lag_subspace_spectrum",
    "inf_convolution",
    "sup_convolution",
    "semiconvexity_probe",
    "SemiconvexityReport",
    "envelope_convergence_audit",
    "EnvelopeAudit",
    "partial_mollify",
]


# ---------------------------------------------------------------------------
# lag-state geometry
# ---------------------------------------------------------------------------


def lag_embedding_matrix(grid: SegmentGrid, lags: int, delta: float) -> np.ndarray:
    """Matrix of the linear-interpolation embedding R^{L+1} -> R^{1+m}.

    Column j is the X-vector (present value; history segment) of the lag
    basis state e_j, with lag j living at time -j*delta.
    """
    taus = -np.arange(lags + 1) * delta
    E = np.zeros((1 + grid.m, lags + 1))
    for j in range(lags + 1):
        e = np.zeros(lags + 1)
        e[j] = 1.0
        E[0, j] = e[0]
        E[1:, j] = np.interp(grid.nodes, taus[::-1], e[::-1])
    return E


def lag_gram_matrices(grid: SegmentGrid, lags: int, delta: float):
    """(M, S): Gram matrices of <.,.>_{-1} and <.,.>_X on embedded lag states."""
    E = lag_embedding_matrix(grid, lags, delta)
    W = metric_diagonal(grid, 1)
    B = build_B(grid, 1).entries
    M = E.T @ (W[:, None] * B) @ E
    S = E.T @ (W[:, None] * E)
    return 0.5 * (M + M.T), 0.5 * (S + S.T)


@dataclass(frozen=True)
class LagSpectrum:
    """Eigenpairs of the weak-norm Gram matrix on the lag subspace.

    ``directions[:, i]`` is the i-th eigendirection in lag coordinates,
    orthonormal in the embedded X inner product; eigenvalues descend.
    """

    eigenvalues: np.ndarray   # (N,) descending, > 0
    directions: np.ndarray    # (L+1, N), S-orthonormal columns
    gram: np.ndarray          # M: weak-norm Gram matrix
    x_gram: np.ndarray        # S: X-metric Gram matrix

    def __post_init__(self):
        if np.any(np.diff(self.eigenvalues) > 0):
            raise InvalidArgumentError("eigenvalues must be nonincreasing")
        if self.eigenvalues[-1] <= 0:
            raise NumericalError("lag-subspace Gram matrix is not positive definite")

    @property
    def size(self) -> int:
        return len(self.eigenvalues)


def lag_subspace_spectrum(grid: SegmentGrid, lags: int, delta: float) -> LagSpectrum:
    """Diagonalize the weak-norm Gram matrix relative to the X metric."""
    M, S = lag_gram_matrices(grid, lags, delta)
    lam, vecs = scipy.linalg.eigh(M, S)
    order = np.argsort(lam)[::-1]
    return LagSpectrum(eigenvalues=lam[order], directions=vecs[:, order],
                       gram=M, x_gram=S)


def _resolve_field(f):
    """(callable over (N, D) states, default box, default gram, D) for f."""
    if isinstance(f, ValueField):
        mdp = f.mdp
        dim = mdp.lags + 1
        lo = np.full(dim, mdp.nodes[0])
        hi = np.full(dim, mdp.nodes[-1])
        M, _ = lag_gram_matrices(mdp.spec.grid, mdp.lags, mdp.delta)
        return f, (lo, hi), M, dim
    return f, None, None, None


# ---------------------------------------------------------------------------
# inf-/sup-convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    """Two-stage envelope search: grid scan then bounded coordinate descent."""

    lower: np.ndarray
    upper: np.ndarray
    scan_points: int = 9
    descent_sweeps: int = 50
    tol: float = 1e-8

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise InvalidArgumentError("search box must satisfy upper > lower")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


@dataclass(frozen=True)
class EnvelopeResult:
    """Evaluated Moreau envelope at query points."""

    epsilon: float
    values: np.ndarray    # (N,)
    argmins: np.ndarray   # (N, D)
    gap: np.ndarray       # f(x) - value (inf) resp. value - f(x) (sup)
    kind: str = "inf"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be positive")
        if self.gap.size and self.gap.min() < -1e-10:
            raise NumericalError(
                f"envelope sits above the field (gap {self.gap.min():.3g} < -1e-10)")


def _coordinate_descent(objective, y0, cfg: SearchConfig):
    """Cyclic bounded 1-D minimization; derivative-free, tol on the objective."""
    y = y0.copy()
    best = objective(y[None, :])[0]
    for _ in range(cfg.descent_sweeps):
        prev = best
        for j in range(len(y)):
            def along(t, j=j):
                z = y.copy()
                z[j] = t
                return objective(z[None, :])[0]
            res = scipy.optimize.minimize_scalar(
                along, bounds=(cfg.lower[j], cfg.upper[j]), method="bounded",
                options={"xatol": 1e-10})
            if res.fun < best:
                best = res.fun
                y[j] = res.x
        if prev - best < cfg.tol:
            break
    return y, best


def _convolve(f, epsilon, queries, search, gram, sign):
    fn, box, default_gram, dim = _resolve_field(f)
    if gram is None:
        gram = default_gram
    if gram is None:
        raise InvalidArgumentError(
            "a weak-norm Gram matrix is required for non-ValueField inputs")
    if search is None:
        if box is None:
            raise InvalidArgumentError(
                "a SearchConfig is required for non-ValueField inputs")
        search = SearchConfig(lower=box[0], upper=box[1])
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be positive")

    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    D = queries.shape[1]
    axes = [np.linspace(search.lower[j], search.upper[j], search.scan_points)
            for j in range(D)]
    scan = np.array(list(itertools.product(*axes)))

    values = np.empty(len(queries))
    argmins = np.empty_like(queries)
    gaps = np.empty(len(queries))
    f_scan = sign * np.asarray(fn(scan), dtype=float)
    for i, x in enumerate(queries):
        def objective(ys):
            diff = ys - x
            quad = np.einsum("nd,de,ne->n", diff, gram, diff)
            return sign * np.asarray(fn(ys), dtype=float) + quad / (2.0 * epsilon)

        diff = scan - x
        quad = np.einsum("nd,de,ne->n", diff, gram, diff)
        obj_scan = f_scan + quad / (2.0 * epsilon)
        # the query itself is always a candidate, so the envelope never
        # exceeds the field value
        fx = sign * float(np.asarray(fn(x[None, :]))[0])
        k0 = int(np.argmin(obj_scan))
        if fx <= obj_scan[k0]:
            y0, v0 = x.copy(), fx
        else:
            y0, v0 = scan[k0].copy(), float(obj_scan[k0])
        y_star, v_star = _coordinate_descent(objective, y0, search)
        if v_star > v0:
            y_star, v_star = y0, v0
        near = (np.abs(y_star - search.lower) < 1e-9) | \
               (np.abs(y_star - search.upper) < 1e-9)
        if np.any(near & (np.abs(x - y_star) > 1e-9)):
            warnings.warn(
                "envelope argmin lies on the search-box boundary; the "
                "envelope may be underestimated")
        values[i] = sign * v_star
        argmins[i] = y_star
        # in the sign-multiplied coordinates this is f - env (inf) and
        # env - f (sup) alike, both nonnegative
        gaps[i] = fx - v_star
    return EnvelopeResult(epsilon=float(epsilon), values=values, argmins=argmins,
                          gap=gaps, kind="inf" if sign > 0 else "sup")


def inf_convolution(f, epsilon, queries, search: SearchConfig = None,
                    gram: np.ndarray = None) -> EnvelopeResult:
    """Moreau envelope V_eps(x) = min_y [ f(y) + |x - y|_{-1}^2 / (2 eps) ]."""
    return _convolve(f, epsilon, queries, search, gram, sign=+1.0)


def sup_convolution(f, epsilon, queries, search: SearchConfig = None,
                    gram: np.ndarray = None) -> EnvelopeResult:
    """Sup-convolution V^eps(x) = max_y [ f(y) - |x - y|_{-1}^2 / (2 eps) ]."""
    return _convolve(f, epsilon, queries, search, gram, sign=-1.0)


# ---------------------------------------------------------------------------
# semiconvexity and convergence audits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SemiconvexityReport:
    """Random-triple audit of f(x) + C |x|_{-1}^2 convexity."""

    constant: float
    samples: int
    violations: int
    worst_margin: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def semiconvexity_probe(f, C: float, samples: int = 1000, seed: int = 0,
                        search: SearchConfig = None, gram: np.ndarray = None,
                        slack: float = None) -> SemiconvexityReport:
    """Test lam f(x) + (1-lam) f(y) - f(mid) >= -C lam (1-lam) |x-y|_{-1}^2 - slack.

    The symmetric |x - y|_{-1}^2 modulus is the one equivalent to convexity
    of f + C |.|_{-1}^2.
    """
    if C < 0:
        raise InvalidArgumentError("semiconvexity constant must be >= 0")
    fn, box, default_gram, _ = _resolve_field(f)
    gram = default_gram if gram is None else gram
    if gram is None:
        raise InvalidArgumentError("a weak-norm Gram matrix is required")
    if search is None:
        lo, hi = box
        if isinstance(f, ValueField):
            # Clamping at the grid boundary flattens the interpolant and
            # manufactures spurious violations; sample the inner box.
            margin = 0.1 * (hi - lo)
            lo, hi = lo + margin, hi - margin
    else:
        lo, hi = search.lower, search.upper
    if slack is None:
        slack = 1e-9
        if isinstance(f, ValueField):
            from .value import _interpolation_error_estimate
            slack = 2.0 * _interpolation_error_estimate(f) + 1e-9
    rng = np.random.default_rng(seed)
    D = len(lo)
    xs = rng.uniform(lo, hi, size=(samples, D))
    ys = rng.uniform(lo, hi, size=(samples, D))
    lam = rng.uniform(0.0, 1.0, size=samples)
    mid = lam[:, None] * xs + (1 - lam[:, None]) * ys
    lhs = lam * np.asarray(fn(xs), dtype=float) \
        + (1 - lam) * np.asarray(fn(ys), dtype=float) \
        - np.asarray(fn(mid), dtype=float)
    diff = xs - ys
    w2 = np.einsum("nd,de,ne->n", diff, gram, diff)
    margin = lhs + C * lam * (1 - lam) * w2 + slack
    return SemiconvexityReport(
        constant=float(C), samples=samples,
        violations=int(np.sum(margin < 0)),
        worst_margin=float(margin.min()) if samples else 0.0,
        slack=float(slack))


@dataclass(frozen=True)
class EnvelopeAudit:
    """Per-(epsilon, query) gap table against the K-Lipschitz Moreau bound."""

    rows: tuple  # of (epsilon, query_id, gap, bound, passed)
    lipschitz_K: float

    @property
    def passed(self) -> bool:
        return all(r[4] for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epsilon,query_id,gap,bound,pass\n")
            for eps, qid, gap, bound, ok in self.rows:
                fh.write(f"{eps!r},{qid},{gap!r},{bound!r},{str(ok).lower()}\n")


def envelope_convergence_audit(f, K: float, epsilons, queries,
                               search: SearchConfig = None,
                               gram: np.ndarray = None, slack: float = 1e-6,
                               csv_path=None) -> EnvelopeAudit:
    """Check 0 <= f - V_eps <= K^2 eps / 2 + slack, monotone in eps per query."""
    epsilons = sorted((float(e) for e in epsilons), reverse=True)
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    rows = []
    prev_gap = np.full(len(queries), np.inf)
    for eps in epsilons:
        res = inf_convolution(f, eps, queries, search=search, gram=gram)
        bound = 0.5 * K**2 * eps + slack
        for qid in range(len(queries)):
            gap = float(res.gap[qid])
            ok = bool((-1e-10 <= gap <= bound) and gap <= prev_gap[qid] + 1e-10)
            rows.append((eps, qid, gap, bound, ok))
            prev_gap[qid] = gap
    audit = EnvelopeAudit(rows=tuple(rows), lipschitz_K=float(K))
    if csv_path is not None:
        audit.to_csv(csv_path)
    return audit


# ---------------------------------------------------------------------------
# coordinate-wise mollification
# ---------------------------------------------------------------------------


def _bump_quadrature(order: int):
    """Gauss-Legendre nodes/weights for the normalized bump on (-1, 1)."""
    t, w = np.polynomial.legendre.leggauss(order)
    rho = np.exp(-1.0 / (1.0 - t**2))
    w = w * rho
    return t, w / w.sum()


@dataclass(frozen=True)
class MollifiedField:
    """Field smoothed along the leading weak-norm eigendirections.

    The i-th coordinate is mollified with the compactly supported bump of
    width eta_i = eta * sqrt(lambda_i) / 2^i; k = 0 is the identity.
    """

    base: object
    eta: float
    k: int
    widths: np.ndarray           # (k,)
    spectrum: LagSpectrum
    quad_order: int = 9
    _nodes: np.ndarray = field(repr=False, compare=False, default=None)
    _weights: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        expected = self.eta * np.sqrt(self.spectrum.eigenvalues[: self.k]) \
            / 2.0 ** np.arange(1, self.k + 1)
        if self.widths.shape != (self.k,) or not np.array_equal(self.widths, expected):
            raise InvalidArgumentError(
                "widths must equal eta * sqrt(lambda_i) / 2^i from the spectrum")
        t, w = _bump_quadrature(self.quad_order)
        object.__setattr__(self, "_nodes", t)
        object.__setattr__(self, "_weights", w)

    @property
    def width_sum(self) -> float:
        return float(self.widths.sum())

    def __call__(self, states):
        s = np.atleast_2d(np.asarray(states, dtype=float))
        fn = self.base
        if self.k == 0:
            out = np.asarray(fn(s), dtype=float)
            return out if np.asarray(states).ndim > 1 else float(out[0])
        dirs = self.spectrum.directions[:, : self.k]       # (D, k)
        combos = np.array(list(itertools.product(range(self.quad_order),
                                                 repeat=self.k)))
        shifts = np.zeros((len(combos), dirs.shape[0]))
        wgt = np.ones(len(combos))
        for i in range(self.k):
            shifts += (self.widths[i] * self._nodes[combos[:, i]])[:, None] * dirs[:, i]
            wgt *= self._weights[combos[:, i]]
        evals = np.asarray(
            fn((s[:, None, :] - shifts[None, :, :]).reshape(-1, dirs.shape[0])),
            dtype=float).reshape(len(s), len(combos))
        out = evals @ wgt
        return out if np.asarray(states).ndim > 1 else float(out[0])


def partial_mollify(f, eta: float, k: int, spectrum: LagSpectrum,
                    quad_order: int = 9, max_k: int = 4) -> MollifiedField:
    """Mollify f along the first k weak-norm eigendirections of the lag space."""
    if eta <= 0:
        raise InvalidArgumentError("mollification width eta must be positive")
    if k < 0:
        raise InvalidArgumentError("k must be >= 0")
    if k > spectrum.size:
        raise InvalidArgumentError(
            f"k = {k} exceeds the {spectrum.size} available eigencoordinates")
    if k > max_k:
        raise InvalidArgumentError(
            f"k = {k} exceeds the cost cap max_k = {max_k} (9^k evaluations)")
    widths = eta * np.sqrt(spectrum.eigenvalues[:k]) / 2.0 ** np.arange(1, k + 1)
    return MollifiedField(base=f, eta=float(eta), k=int(k), widths=widths,
                          spectrum=spectrum, quad_order=quad_order)
