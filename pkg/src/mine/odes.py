"""Forward physical models and a fixed-step RK4 integrator.

Two systems are provided:

* the six-species kinetics benchmark ("himmel"): three bimolecular
  reactions A+B -> C+F, A+C -> D+F, A+D -> E+F with rate constants
  theta = (theta1, theta2, theta3). The byproduct F is carried
  explicitly so the total concentration is exactly conserved.
* "fairlite": a four-reservoir greenhouse-gas box model with
  temperature-dependent lifespans coupled to a single-box energy
  balance. Emissions enter through piecewise-linear scenario pathways.

All right-hand sides broadcast over a leading batch axis, so the same
code integrates one state vector or a whole dataset of them. The
integrator is classical RK4 with a fixed step: deterministic, and
reproducible bit-for-bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    IntegrationDivergedError,
    InvalidInputError,
    NumericDomainError,
    ShapeError,
)

__all__ = [
    "HIMMEL_SPECIES",
    "FAIRLITE_NAMES",
    "FAIRLITE_KAPPA",
    "FAIRLITE_C0",
    "FairLiteParams",
    "ScenarioSpec",
    "DEFAULT_SCENARIOS",
    "Trajectory",
    "himmel_rhs",
    "fairlite_rhs",
    "scenario_pathway",
    "integrate",
    "integrate_batch",
    "himmel_simulate",
    "himmel_simulate_batch",
    "fairlite_simulate",
    "fairlite_simulate_batch",
    "fairlite_params_from_theta",
    "FAIRLITE_THETA_NAMES",
    "DEFAULT_FAIRLITE_THETA",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

HIMMEL_SPECIES = ("A", "B", "C", "D", "E", "F")
FAIRLITE_NAMES = ("R1", "R2", "R3", "R4", "T")

# Lifespan modulation alpha(T) = alpha0 * exp(FAIRLITE_KAPPA * T), per kelvin.
FAIRLITE_KAPPA = 0.05
# Reference carbon stock (GtC) in the logarithmic forcing term.
FAIRLITE_C0 = 589.0


def _require_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")


def himmel_rhs(state: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Kinetics right-hand side; state (..., 6), theta (..., 3) or (3,).

    Components sum to zero: every reaction moves one unit of A and one
    unit of its partner into one unit of product plus one unit of F.
    """
    state = np.asarray(state, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if state.shape[-1] != 6:
        raise ShapeError(f"himmel state must have 6 components, got {state.shape}")
    if theta.shape[-1] != 3:
        raise ShapeError(f"himmel theta must have 3 components, got {theta.shape}")
    _require_finite("state", state)
    _require_finite("theta", theta)

    A, B, C, D = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    r1 = theta[..., 0] * A * B
    r2 = theta[..., 1] * A * C
    r3 = theta[..., 2] * A * D
    return np.stack(
        [-r1 - r2 - r3, -r1, r1 - r2, r2 - r3, r3, r1 + r2 + r3], axis=-1
    )


@dataclass
class FairLiteParams:
    """Box-model parameters.

    a: reservoir uptake fractions, renormalized so they sum to one.
    tau: unmodulated reservoir lifespans in years (all > 0).
    alpha0: baseline lifespan scale factor (> 0).
    f2x: forcing (W/m^2) per doubling of the carbon stock ratio.
    c_heat: effective heat capacity (W yr / m^2 / K, > 0).
    t_feedback: linear radiative feedback (W / m^2 / K).
    """

    a: np.ndarray
    tau: np.ndarray
    alpha0: float = 1.0
    f2x: float = 3.71
    c_heat: float = 8.2
    t_feedback: float = 1.33

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.a.shape != (4,) or self.tau.shape != (4,):
            raise ShapeError("a and tau must be 4-vectors")
        _require_finite("a", self.a)
        _require_finite("tau", self.tau)
        if np.any(self.a < 0):
            raise ConfigError("reservoir fractions must be nonnegative")
        total = self.a.sum()
        if total <= 0:
            raise ConfigError("reservoir fractions must have positive sum")
        self.a = self.a / total
        if np.any(self.tau <= 0):
            raise ConfigError("lifespans must be positive")
        if self.c_heat <= 0:
            raise ConfigError("heat capacity must be positive")
        if self.alpha0 <= 0:
            raise ConfigError("alpha0 must be positive")


# FaIR-ish carbon-cycle defaults: one effectively permanent reservoir and
# three with decreasing lifespans.
DEFAULT_FAIRLITE_A = (0.2173, 0.2240, 0.2824, 0.2763)
DEFAULT_FAIRLITE_TAU = (1.0e6, 394.4, 36.54, 4.304)

# calibrated parameter vector layout for the box model
FAIRLITE_THETA_NAMES = ("alpha0", "f2x", "c_heat", "t_feedback", "tau_scale", "a1")
DEFAULT_FAIRLITE_THETA = (1.0, 3.71, 8.2, 1.33, 1.0, 0.2173)


def fairlite_params_from_theta(theta) -> "FairLiteParams":
    """Map the 6-dim calibration vector onto the full parameter struct.

    theta = (alpha0, f2x, c_heat, t_feedback, tau_scale, a1): lifespans
    scale jointly; the remaining uptake fractions renormalize to 1 - a1
    in their default proportions.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (6,):
        raise ShapeError("fairlite theta must have 6 components")
    alpha0, f2x, c_heat, t_fb, tau_scale, a1 = theta
    if not 0.0 < a1 < 1.0:
        raise ConfigError("a1 must lie in (0, 1)")
    if tau_scale <= 0:
        raise ConfigError("tau_scale must be positive")
    rest = np.asarray(DEFAULT_FAIRLITE_A[1:])
    rest = rest / rest.sum() * (1.0 - a1)
    return FairLiteParams(
        a=np.concatenate([[a1], rest]),
        tau=tau_scale * np.asarray(DEFAULT_FAIRLITE_TAU),
        alpha0=float(alpha0),
        f2x=float(f2x),
        c_heat=float(c_heat),
        t_feedback=float(t_fb),
    )


def fairlite_rhs(state: np.ndarray, emission, params: FairLiteParams) -> np.ndarray:
    """Reservoir + temperature tendencies; state (..., 5) = (R1..R4, T).

    dR_i = a_i * E - R_i / (alpha(T) * tau_i)
    dT   = (f2x * log2(1 + sum(R)/C0) - t_feedback * T) / c_heat
    """
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != 5:
        raise ShapeError(f"fairlite state must have 5 components, got {state.shape}")
    _require_finite("state", state)
    emission = np.asarray(emission, dtype=np.float64)
    _require_finite("emission", emission)

    R = state[..., :4]
    T = state[..., 4]
    with np.errstate(over="raise"):
        try:
            alpha = params.alpha0 * np.exp(FAIRLITE_KAPPA * T)
        except FloatingPointError as exc:
            raise NumericDomainError("alpha(T) overflowed") from exc
    if np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
        raise NumericDomainError("alpha(T) must be positive and finite")

    ratio = 1.0 + R.sum(axis=-1) / FAIRLITE_C0
    if np.any(ratio <= 0):
        raise NumericDomainError("carbon stock ratio fell to or below zero")
    dR = params.a * emission[..., None] - R / (alpha[..., None] * params.tau)
    dT = (params.f2x * np.log2(ratio) - params.t_feedback * T) / params.c_heat
    return np.concatenate([dR, dT[..., None]], axis=-1)


@dataclass
class ScenarioSpec:
    """Piecewise-linear emission pathway relative to the base-year level.

    boundaries: segment edges in years, strictly increasing, first entry
        is the base year. len(boundaries) == len(slopes) + 1.
    slopes: per-segment growth rate as a fraction of E0 per year, so the
        pathway is E0 * (1 + sum_k slope_k * years_spent_in_segment_k).
    """

    id: int
    boundaries: tuple = field(default_factory=tuple)
    slopes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.size != len(self.slopes) + 1:
            raise ConfigError("need one more boundary than slopes")
        if np.any(np.diff(b) <= 0):
            raise ConfigError("boundaries must be strictly increasing")

    def multiplier(self, t_grid: np.ndarray) -> np.ndarray:
        """1 + accumulated relative change at each grid time."""
        t = np.asarray(t_grid, dtype=np.float64)
        b = np.asarray(self.boundaries, dtype=np.float64)
        m = np.ones_like(t)
        for k, slope in enumerate(self.slopes):
            lo, hi = b[k], b[k + 1]
            m = m + slope * np.clip(t - lo, 0.0, hi - lo)
        return m


DEFAULT_SCENARIOS = {
    0: ScenarioSpec(0, boundaries=(2005.0, 2050.0, 2100.0), slopes=(-0.015, -0.005)),
    1: ScenarioSpec(1, boundaries=(2005.0, 2040.0, 2100.0), slopes=(0.01, -0.01)),
    2: ScenarioSpec(2, boundaries=(2005.0, 2100.0), slopes=(0.02,)),
}


def scenario_pathway(spec: ScenarioSpec, e0: float, t_grid: np.ndarray) -> np.ndarray:
    """Emission series on t_grid; series[0] == e0 exactly."""
    t = np.asarray(t_grid, dtype=np.float64)
    if t.size < 1:
        raise ShapeError("t_grid must be nonempty")
    base = spec.boundaries[0]
    if t[0] != base:
        raise ConfigError(f"t_grid must start at the base year {base}, got {t[0]}")
    series = e0 * spec.multiplier(t)
    series[0] = e0
    return series


def scenario_by_id(scenario_id: int, scenarios=None) -> ScenarioSpec:
    table = DEFAULT_SCENARIOS if scenarios is None else scenarios
    try:
        return table[int(scenario_id)]
    except KeyError:
        raise ConfigError(f"unknown scenario id {scenario_id}") from None


@dataclass
class Trajectory:
    """States on a uniform grid: row i is the state at t0 + i*dt."""

    t0: float
    dt: float
    steps: int
    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.states.ndim != 2 or self.states.shape[0] != self.steps + 1:
            raise ShapeError(
                f"states must be (steps+1, N); got {self.states.shape} for steps={self.steps}"
            )

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def n_states(self) -> int:
        return self.states.shape[1]


def _rk4_kernel(rhs, x, t, dt):
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs, x0: np.ndarray, t0: float, dt: float, steps: int) -> Trajectory:
    """Fixed-step RK4. rhs(t, x) -> dx/dt. Row 0 of the result is x0 bit-exactly."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    _require_finite("x0", x0)
    out = np.empty((steps + 1, x0.shape[-1]), dtype=np.float64)
    out[0] = x0
    x = x0
    for i in range(steps):
        x = _rk4_kernel(rhs, x, t0 + i * dt, dt)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(step=i + 1)
        out[i + 1] = x
    return Trajectory(t0=t0, dt=dt, steps=steps, states=out)


def integrate_batch(rhs, x0s: np.ndarray, t0: float, dt: float, steps: int,
                    keep_trajectory: bool = True) -> np.ndarray:
    """Vectorized RK4 over a batch of initial states (B, N).

    Returns (B, steps+1, N), or the final states (B, N) when
    keep_trajectory=False. Identical arithmetic to `integrate` row by
    row as long as rhs broadcasts elementwise over the batch axis.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = np.array(x0s, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("x0s must be (batch, N)")
    _require_finite("x0s", x)
    if keep_trajectory:
        out = np.empty((x.shape[0], steps + 1, x.shape[1]), dtype=np.float64)
        out[:, 0] = x
    for i in range(steps):
        x = _rk4_kernel(rhs, x, t0 + i * dt, dt)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(step=i + 1)
        if keep_trajectory:
            out[:, i + 1] = x
    return out if keep_trajectory else x


def himmel_simulate(x0, theta, t0: float = 0.0, dt: float = 0.01, steps: int = 600) -> Trajectory:
    theta = np.asarray(theta, dtype=np.float64)
    return integrate(lambda t, x: himmel_rhs(x, theta), x0, t0, dt, steps)


def himmel_simulate_batch(x0s, thetas, t0: float = 0.0, dt: float = 0.01,
                          steps: int = 600) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=np.float64)
    return integrate_batch(lambda t, x: himmel_rhs(x, thetas), x0s, t0, dt, steps)


def fairlite_simulate(params: FairLiteParams, emissions: np.ndarray, years: np.ndarray,
                      x0=None) -> Trajectory:
    """Integrate the box model against an emission series sampled on `years`.

    Emissions between grid points are interpolated linearly so RK4
    substeps see a continuous forcing.
    """
    years = np.asarray(years, dtype=np.float64)
    emissions = np.asarray(emissions, dtype=np.float64)
    if years.shape != emissions.shape:
        raise ShapeError("years and emissions must have identical shapes")
    dts = np.diff(years)
    if years.size < 2 or not np.allclose(dts, dts[0]):
        raise ConfigError("years must be a uniform grid with >= 2 points")
    if x0 is None:
        x0 = np.zeros(5)

    def rhs(t, x):
        return fairlite_rhs(x, np.interp(t, years, emissions), params)

    return integrate(rhs, x0, float(years[0]), float(dts[0]), years.size - 1)


def fairlite_simulate_batch(params_list, emissions: np.ndarray, years: np.ndarray,
                            x0s=None, keep_trajectory: bool = True) -> np.ndarray:
    """Batched box-model run: row b uses params_list entries and emissions[b].

    All parameter structs are stacked into arrays so a single vectorized
    integration covers the whole batch. x0s (batch, 5) defaults to the
    zero-anomaly state.
    """
    years = np.asarray(years, dtype=np.float64)
    emissions = np.asarray(emissions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[1] != years.size:
        raise ShapeError("emissions must be (batch, len(years))")
    dts = np.diff(years)
    if years.size < 2 or not np.allclose(dts, dts[0]):
        raise ConfigError("years must be a uniform grid with >= 2 points")
    n = emissions.shape[0]
    if len(params_list) != n:
        raise ShapeError("need one FairLiteParams per emission row")

    a = np.stack([p.a for p in params_list])
    tau = np.stack([p.tau for p in params_list])
    alpha0 = np.array([p.alpha0 for p in params_list])
    f2x = np.array([p.f2x for p in params_list])
    c_heat = np.array([p.c_heat for p in params_list])
    t_fb = np.array([p.t_feedback for p in params_list])

    def rhs(t, x):
        R, T = x[:, :4], x[:, 4]
        with np.errstate(over="raise"):
            try:
                alpha = alpha0 * np.exp(FAIRLITE_KAPPA * T)
            except FloatingPointError as exc:
                raise NumericDomainError("alpha(T) overflowed") from exc
        # one interpolation weight per call; t is scalar on a uniform grid
        e_t = _interp_rows(t, years, emissions)
        dR = a * e_t[:, None] - R / (alpha[:, None] * tau)
        ratio = 1.0 + R.sum(axis=1) / FAIRLITE_C0
        if np.any(ratio <= 0):
            raise NumericDomainError("carbon stock ratio fell to or below zero")
        dT = (f2x * np.log2(ratio) - t_fb * T) / c_heat
        return np.concatenate([dR, dT[:, None]], axis=1)

    if x0s is None:
        x0s = np.zeros((n, 5))
    return integrate_batch(rhs, x0s, float(years[0]), float(dts[0]),
                           years.size - 1, keep_trajectory=keep_trajectory)


def _interp_rows(t, grid, series_rows):
    """Linear interpolation of each row of series_rows at scalar time t."""
    if t <= grid[0]:
        return series_rows[:, 0]
    if t >= grid[-1]:
        return series_rows[:, -1]
    j = int(np.searchsorted(grid, t, side="right")) - 1
    w = (t - grid[j]) / (grid[j + 1] - grid[j])
    return (1.0 - w) * series_rows[:, j] + w * series_rows[:, j + 1]


def write_trajectory_csv(traj: Trajectory, path, names) -> None:
    """CSV export with header `t,<names>` at full f64 round-trip precision."""
    if len(names) != traj.n_states:
        raise ShapeError("one name per state component required")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t," + ",".join(names) + "\n")
        for ti, row in zip(traj.t, traj.states):
            fh.write(f"{ti:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def read_trajectory_csv(path):
    """Inverse of write_trajectory_csv. Returns (Trajectory, names)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "t":
            raise ConfigError("trajectory CSV must start with a 't' column")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    t = data[:, 0]
    states = data[:, 1:]
    if t.size < 2:
        raise ConfigError("trajectory CSV needs at least two rows")
    dt = t[1] - t[0]
    return (
        Trajectory(t0=float(t[0]), dt=float(dt), steps=t.size - 1, states=states),
        header[1:],
    )
