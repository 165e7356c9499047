"""The stochastic optimal advertising problem.

Goodwill y(t) follows a controlled linear SDDE

    dy = (a0 y + int_{-d}^0 a1(s) y(t+s) ds + c0 u) dt + sigma0 dW,

advertising spend u lives in U = [0, u_bar), and the running cost is
l(y, u) = h(u) - g(y): a convex spending cost net of a concave goodwill
utility.  Defaults: g(y) = gamma * y and the forgetting kernel
a1(s) = -alpha (s + d), the simplest choices compatible with the model
axioms, which also admit closed-form solutions used as test oracles.

``AdvertisingConfig`` validates a parameter set (signs, kernel support,
convexity/monotonicity probes) and ``build_problem_spec`` turns it into a
simulation-ready :class:`~delay_hjb.sdde.ProblemSpec`, registering the
analytic Hamiltonian maximizer

    psi(p) = 0 if p >= 0 else (h')^{-1}(-c0 p)

(the spending-cost marginal matched to the marginal value of goodwill).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError
from .hilbert import LiftedState, SegmentGrid
from .sdde import ControlBox, KernelSpec, ProblemSpec

__all__ = [
    "AdvertisingConfig",
    "default_h",
    "default_h_prime",
    "default_h_prime_inverse",
    "build_problem_spec",
    "initial_state",
]


# ---------------------------------------------------------------------------
# default spending cost
# ---------------------------------------------------------------------------


def default_h(u, kappa: float, u_bar: float):
    """Spending cost h(u) = kappa ((1 - u/u_bar)^{-1} - 1 - u/u_bar).

    Convex on [0, u_bar) with h(0) = h'(0) = 0 and h'(u) -> infinity as
    u -> u_bar.
    """
    if kappa <= 0 or u_bar <= 0:
        raise InvalidArgumentError("need kappa > 0 and u_bar > 0")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u >= u_bar):
        raise InvalidArgumentError(f"spending must lie in [0, u_bar={u_bar})")
    t = u / u_bar
    out = kappa * (1.0 / (1.0 - t) - 1.0 - t)
    return float(out) if out.ndim == 0 else out


def default_h_prime(u, kappa: float, u_bar: float):
    """Marginal spending cost h'(u) = (kappa/u_bar)((1 - u/u_bar)^{-2} - 1)."""
    if kappa <= 0 or u_bar <= 0:
        raise InvalidArgumentError("need kappa > 0 and u_bar > 0")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u >= u_bar):
        raise InvalidArgumentError(f"spending must lie in [0, u_bar={u_bar})")
    t = u / u_bar
    out = (kappa / u_bar) * (1.0 / (1.0 - t) ** 2 - 1.0)
    return float(out) if out.ndim == 0 else out


def default_h_prime_inverse(r, kappa: float, u_bar: float):
    """(h')^{-1}(r) = u_bar (1 - (1 + r u_bar / kappa)^{-1/2}) for r >= 0."""
    if kappa <= 0 or u_bar <= 0:
        raise InvalidArgumentError("need kappa > 0 and u_bar > 0")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise InvalidArgumentError("marginal cost must be >= 0")
    out = u_bar * (1.0 - (1.0 + r * u_bar / kappa) ** -0.5)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdvertisingConfig:
    """Validated parameter set for the advertising problem.

    ``control_cap`` < 1 truncates the numerical control set to
    [0, control_cap * u_bar]; the spending cost diverges at u_bar, so the
    excluded sliver is never optimal.

    Custom ``h``/``g`` callables may replace the defaults; they are probed
    (h strictly convex on (0, u_bar) by second differences, g strictly
    increasing) rather than trusted.
    """

    a0: float = -0.3
    c0: float = 1.0
    sigma0: float = 0.2
    alpha: float = 0.0
    d: float = 1.0
    u_bar: float = 1.0
    kappa: float = 1.0
    gamma: float = 1.0
    rho: float = 1.0
    lipschitz_c: float = 0.5
    control_cap: float = 0.95
    a1_values: np.ndarray = None    # overrides alpha when given (nodewise)
    segment_nodes: int = 21
    h: object = None                # h(u) -> cost; default_h when None
    h_prime_inverse: object = None
    g: object = None                # g(y) -> utility; gamma * y when None
    grid: SegmentGrid = field(init=False)

    def __post_init__(self):
        if self.a0 > 0:
            raise ConfigurationError("image deterioration a0 must be <= 0")
        if self.c0 <= 0:
            raise ConfigurationError("advertising effectiveness c0 must be > 0")
        if self.sigma0 <= 0:
            raise ConfigurationError("uncertainty sigma0 must be > 0")
        if self.u_bar <= 0 or self.kappa <= 0:
            raise ConfigurationError("need u_bar > 0 and kappa > 0")
        if not 0 < self.control_cap < 1:
            raise ConfigurationError("control_cap must lie in (0, 1)")
        if self.d <= 0 or self.segment_nodes < 2:
            raise ConfigurationError("need delay d > 0 and >= 2 segment nodes")
        if self.rho <= 0:
            raise ConfigurationError("discount rho must be > 0")
        if self.alpha < 0:
            raise ConfigurationError(
                "alpha must be >= 0 (the kernel -alpha (s + d) must be <= 0)")
        grid = SegmentGrid.uniform(self.d, self.segment_nodes)
        object.__setattr__(self, "grid", grid)
        if self.a1_values is not None:
            vals = np.asarray(self.a1_values, dtype=float)
            if vals.shape != (grid.m,):
                raise ConfigurationError(
                    f"a1_values must have {grid.m} entries, got {vals.shape}")
            if np.any(vals > 0):
                raise ConfigurationError("kernel a1 must be <= 0 nodewise")
            if abs(vals[0]) > 1e-12 * max(1.0, np.abs(vals).max()):
                raise ConfigurationError("kernel a1 must vanish at -d")
            object.__setattr__(self, "a1_values", vals)
        self._probe_h()
        self._probe_g()

    # -- default model functions ---------------------------------------------

    def h_of(self, u):
        if self.h is not None:
            return self.h(u)
        return default_h(u, self.kappa, self.u_bar)

    def h_prime_inverse_of(self, r):
        if self.h_prime_inverse is not None:
            return self.h_prime_inverse(r)
        return default_h_prime_inverse(r, self.kappa, self.u_bar)

    def g_of(self, y):
        if self.g is not None:
            return self.g(y)
        return self.gamma * np.asarray(y, dtype=float)

    def kernel(self) -> KernelSpec:
        if self.a1_values is not None:
            return KernelSpec(values=self.a1_values, grid=self.grid)
        return KernelSpec.from_callable(lambda s: -self.alpha * (s + self.d),
                                        self.grid)

    # -- validation probes -----------------------------------------------------

    def _probe_h(self):
        us = np.linspace(0.0, self.control_cap * self.u_bar, 33)
        try:
            hv = np.asarray(self.h_of(us), dtype=float)
        except Exception as exc:
            raise ConfigurationError(f"spending cost h failed to evaluate: {exc}")
        if abs(hv[0]) > 1e-12:
            raise ConfigurationError("spending cost must satisfy h(0) = 0")
        d2 = np.diff(hv, 2)
        if np.any(d2 <= 0):
            raise ConfigurationError(
                "spending cost failed the convexity probe (second differences "
                "must be positive on (0, u_bar))")

    def _probe_g(self):
        ys = np.linspace(-3.0, 3.0, 33)
        gv = np.asarray(self.g_of(ys), dtype=float)
        if np.any(np.diff(gv) <= 0):
            raise ConfigurationError(
                "utility g failed the strict-monotonicity probe")


def build_problem_spec(config: AdvertisingConfig) -> ProblemSpec:
    """Simulation-ready problem spec with the analytic feedback rule attached."""
    grid = config.grid
    a0, c0, gamma = config.a0, config.c0, config.gamma
    cap = config.control_cap * config.u_bar

    def drift(y, z1, u):
        return a0 * y + z1 + c0 * u

    def diffusion(y, z2):
        return config.sigma0 * np.ones_like(np.asarray(y, dtype=float))

    def running_cost(y, u):
        return config.h_of(np.minimum(u, cap)) - config.g_of(y)

    def argmax_rule(p0):
        p0 = np.asarray(p0, dtype=float)
        r = np.maximum(-c0 * p0, 0.0)  # spend only when goodwill has value
        u = np.minimum(config.h_prime_inverse_of(r), cap)
        return np.where(p0 >= 0, 0.0, u)

    return ProblemSpec(
        grid=grid,
        drift=drift,
        diffusion=diffusion,
        a1=config.kernel(),
        a2=KernelSpec.zero(grid),
        running_cost=running_cost,
        rho=config.rho,
        control_set=ControlBox(np.zeros(1), np.array([cap])),
        lipschitz_C=config.lipschitz_c,
        argmax_rule=argmax_rule,
    )


def initial_state(config: AdvertisingConfig, x0: float, x1=None) -> LiftedState:
    """Lifted initial condition; ``x1`` a constant or nodewise history."""
    if x1 is None:
        x1 = x0
    x1 = np.asarray(x1, dtype=float)
    if x1.ndim == 0:
        x1 = np.full(config.grid.m, float(x1))
    if x1.shape != (config.grid.m,):
        raise InvalidArgumentError(
            f"history must be scalar or have {config.grid.m} entries")
    return LiftedState(np.array([float(x0)]), x1[:, None])
