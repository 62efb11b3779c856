"""Delayed Rejection Adaptive Metropolis (DRAM) over simulator parameters.

Two-stage delayed rejection: a rejected Gaussian proposal triggers a
second, shrunken proposal whose acceptance probability compensates for
the failed first stage, preserving the target law. The proposal
covariance is re-estimated from the whole history every
``adapt_interval`` steps (greedy adaptive Metropolis with the classical
2.4^2/d scaling).

Everything is driven by an explicit log-posterior callable, so the same
sampler runs on ODE likelihoods and on synthetic targets used in tests.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, IntegrationDivergedError, NumericDomainError, ShapeError
from .rng import stream

__all__ = [
    "Observation",
    "BoxPrior",
    "ChainConfig",
    "Chain",
    "log_posterior",
    "ode_log_posterior",
    "adapt_covariance",
    "dram_step",
    "run_chain",
    "save_chain",
    "load_chain",
    "chain_file_hash",
]

CHAIN_SCHEMA_VERSION = 1


@dataclass
class Observation:
    """Noisy observations of selected state components at grid indices.

    times: strictly increasing indices into the simulator's output grid.
    values: (len(times), len(components)) observed matrix.
    noise_sigma: per-component standard deviation, broadcastable to values.
    components: state columns the values refer to.
    """

    times: np.ndarray
    values: np.ndarray
    noise_sigma: np.ndarray
    components: tuple = (0,)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.noise_sigma = np.asarray(self.noise_sigma, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("observation times must be strictly increasing")
        if self.values.ndim != 2:
            raise ShapeError("values must be (n_times, n_components)")
        if self.values.shape[0] != self.times.size:
            raise ShapeError("one value row per observation time required")
        if np.any(self.noise_sigma <= 0):
            raise ConfigError("noise_sigma must be positive")


@dataclass
class BoxPrior:
    """Independent box prior: density constant inside, zero outside."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise ShapeError("lower/upper must have matching shapes")
        if np.any(self.lower >= self.upper):
            raise ConfigError("box prior needs lower < upper")

    def contains(self, theta: np.ndarray) -> bool:
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def log_density(self, theta: np.ndarray) -> float:
        return 0.0 if self.contains(theta) else -np.inf


@dataclass
class ChainConfig:
    n_samples: int
    burn_in: int
    init_theta: np.ndarray
    init_cov: np.ndarray
    adapt_interval: int = 100
    adapt_start: int = 200
    dr_scale: float = 0.3
    epsilon_reg: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.init_theta = np.atleast_1d(np.asarray(self.init_theta, dtype=np.float64))
        self.init_cov = np.atleast_2d(np.asarray(self.init_cov, dtype=np.float64))
        d = self.init_theta.size
        if self.init_cov.shape != (d, d):
            raise ShapeError("init_cov must be (d, d)")
        if not np.allclose(self.init_cov, self.init_cov.T):
            raise ConfigError("init_cov must be symmetric")
        if self.burn_in >= self.n_samples:
            raise ConfigError("burn_in must be smaller than n_samples")
        if not 0.0 < self.dr_scale < 1.0:
            raise ConfigError("dr_scale must lie in (0, 1)")
        if self.epsilon_reg <= 0:
            raise ConfigError("epsilon_reg must be positive")
        if self.adapt_interval < 1:
            raise ConfigError("adapt_interval must be >= 1")

    @property
    def dim(self) -> int:
        return self.init_theta.size

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "burn_in": self.burn_in,
            "init_theta": [float(v) for v in self.init_theta],
            "init_cov": [[float(v) for v in row] for row in self.init_cov],
            "adapt_interval": self.adapt_interval,
            "adapt_start": self.adapt_start,
            "dr_scale": self.dr_scale,
            "epsilon_reg": self.epsilon_reg,
            "seed": self.seed,
        }


@dataclass
class Chain:
    """Posterior samples plus acceptance bookkeeping.

    accept_stage[i] is 0 for a rejected step (row repeats its
    predecessor), 1 for a first-stage accept, 2 for a delayed accept.
    """

    samples: np.ndarray
    log_posts: np.ndarray
    accept_stage: np.ndarray
    burn_in: int
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    n_divergences: int = 0
    n_chol_fallbacks: int = 0

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def post_burn(self) -> np.ndarray:
        return self.samples[self.burn_in:]

    def acceptance_rate(self) -> float:
        return float(np.mean(self.accept_stage > 0))


class LogPosteriorCounter:
    """Wraps a log-posterior callable and counts simulator divergences."""

    def __init__(self, fn):
        self.fn = fn
        self.n_divergences = 0

    def __call__(self, theta: np.ndarray) -> float:
        try:
            return self.fn(theta)
        except (IntegrationDivergedError, NumericDomainError):
            self.n_divergences += 1
            return -np.inf


def log_posterior(theta, obs: Observation, model, prior: BoxPrior) -> float:
    """Gaussian log-likelihood plus box prior, up to an additive constant.

    model(theta) must return predictions with the shape of obs.values.
    Simulator divergences surface as -inf (the caller treats that as a
    rejection).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        return -np.inf
    lp = prior.log_density(theta)
    if lp == -np.inf:
        return -np.inf
    try:
        pred = model(theta)
    except (IntegrationDivergedError, NumericDomainError):
        return -np.inf
    resid = (np.asarray(pred) - obs.values) / obs.noise_sigma
    return lp - 0.5 * float(np.sum(resid**2))


def ode_log_posterior(obs: Observation, model, prior: BoxPrior) -> LogPosteriorCounter:
    """Curried log_posterior with divergence counting for run_chain."""
    return LogPosteriorCounter(lambda theta: log_posterior(theta, obs, model, prior))


def adapt_covariance(history: np.ndarray, d: int, epsilon_reg: float) -> np.ndarray:
    """Scaled empirical covariance: (2.4^2/d) * (Cov(history) + eps * I)."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[0] < 2:
        raise ShapeError("history must be (n >= 2, d)")
    s_d = 2.4**2 / d
    cov = np.atleast_2d(np.cov(history, rowvar=False))
    return s_d * cov + s_d * epsilon_reg * np.eye(d)


def _chol_or_fallback(cov: np.ndarray, epsilon_reg: float):
    """Lower Cholesky factor, falling back to sqrt(eps)*I when cov is not SPD."""
    try:
        return np.linalg.cholesky(cov), False
    except np.linalg.LinAlgError:
        return np.sqrt(epsilon_reg) * np.eye(cov.shape[0]), True


def _gauss_logq(chol: np.ndarray, diff: np.ndarray) -> float:
    """Log Gaussian density of a displacement, dropping the constant."""
    w = solve_triangular(chol, diff, lower=True, check_finite=False)
    return -0.5 * float(w @ w)


def _log1mexp(a: float) -> float:
    """log(1 - exp(a)) for a <= 0."""
    if a >= 0.0:
        return -np.inf
    return float(np.log(-np.expm1(a)))


def stage2_log_accept(lp_cur, lp1, lp2, diff_cur_to_1, diff_2_to_1, chol) -> float:
    """Log acceptance probability of the shrunken second-stage proposal.

    Standard two-stage delayed rejection ratio
        [pi(t2) q1(t2,t1) (1-a1(t2,t1))] / [pi(t) q1(t,t1) (1-a1(t,t1))]
    with q1 the stage-1 Gaussian kernel. When t2 equals the current
    point the ratio is exactly one.
    """
    if lp2 == -np.inf:
        return -np.inf
    num = lp2 + _gauss_logq(chol, diff_2_to_1) + _log1mexp(min(0.0, lp1 - lp2))
    den = lp_cur + _gauss_logq(chol, diff_cur_to_1) + _log1mexp(min(0.0, lp1 - lp_cur))
    if den == -np.inf:
        # unreachable from the sampler: stage 2 only runs after a
        # stage-1 rejection, which forces a1(current, t1) < 1
        return -np.inf
    return min(0.0, num - den)


def dram_step(theta, lp, log_post, chol, dr_scale, rng):
    """One DRAM transition. Returns (theta', lp', accept_stage)."""
    d = theta.size
    prop1 = theta + chol @ rng.standard_normal(d)
    lp1 = log_post(prop1)
    log_a1 = min(0.0, lp1 - lp)
    if np.log(rng.random()) < log_a1:
        return prop1, lp1, 1

    prop2 = theta + dr_scale * (chol @ rng.standard_normal(d))
    lp2 = log_post(prop2)
    log_a2 = stage2_log_accept(lp, lp1, lp2, prop1 - theta, prop1 - prop2, chol)
    if np.log(rng.random()) < log_a2:
        return prop2, lp2, 2
    return theta, lp, 0


def run_chain(config: ChainConfig, log_post) -> Chain:
    """Run DRAM for config.n_samples steps. Deterministic given config.seed.

    log_post: callable theta -> float, -inf outside the support.
    """
    if not isinstance(log_post, LogPosteriorCounter):
        log_post = LogPosteriorCounter(log_post)
    d = config.dim
    rng = stream(config.seed, domain="mcmc")

    theta = config.init_theta.copy()
    lp = log_post(theta)
    if not np.isfinite(lp):
        raise ConfigError("init_theta has non-finite log posterior")

    chol, fell_back = _chol_or_fallback(config.init_cov, config.epsilon_reg)
    n_fallbacks = int(fell_back)

    n = config.n_samples
    samples = np.empty((n, d))
    log_posts = np.empty(n)
    accept_stage = np.zeros(n, dtype=np.int8)

    for i in range(n):
        if i >= config.adapt_start and i % config.adapt_interval == 0:
            cov = adapt_covariance(samples[:i], d, config.epsilon_reg)
            chol, fell_back = _chol_or_fallback(cov, config.epsilon_reg)
            n_fallbacks += int(fell_back)
        theta, lp, stage = dram_step(theta, lp, log_post, chol, config.dr_scale, rng)
        samples[i] = theta
        log_posts[i] = lp
        accept_stage[i] = stage

    warnings = []
    window = 1000
    if n >= window:
        acc = np.concatenate([[0], np.cumsum(accept_stage > 0)])
        in_window = acc[window:] - acc[:-window]
        if np.any(in_window < 0.01 * window):
            warnings.append(f"stagnation: a {window}-step window had >99% rejections")

    return Chain(
        samples=samples,
        log_posts=log_posts,
        accept_stage=accept_stage,
        burn_in=config.burn_in,
        config=config.to_dict(),
        warnings=warnings,
        n_divergences=log_post.n_divergences,
        n_chol_fallbacks=n_fallbacks,
    )


def save_chain(chain: Chain, csv_path, sidecar_path=None) -> None:
    """CSV columns theta_1..theta_d,log_post,accept_stage plus a JSON sidecar."""
    d = chain.dim
    header = ",".join([f"theta_{j+1}" for j in range(d)] + ["log_post", "accept_stage"])
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row, lp, st in zip(chain.samples, chain.log_posts, chain.accept_stage):
            cols = [f"{v:.17g}" for v in row] + [f"{lp:.17g}", str(int(st))]
            fh.write(",".join(cols) + "\n")
    if sidecar_path is None:
        sidecar_path = str(csv_path) + ".json"
    sidecar = {
        "schema_version": CHAIN_SCHEMA_VERSION,
        "config": chain.config,
        "burn_in": chain.burn_in,
        "warnings": chain.warnings,
        "n_divergences": chain.n_divergences,
        "n_chol_fallbacks": chain.n_chol_fallbacks,
        "acceptance_rate": chain.acceptance_rate(),
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_chain(csv_path, sidecar_path=None) -> Chain:
    if sidecar_path is None:
        sidecar_path = str(csv_path) + ".json"
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    d = data.shape[1] - 2
    return Chain(
        samples=data[:, :d],
        log_posts=data[:, d],
        accept_stage=data[:, d + 1].astype(np.int8),
        burn_in=int(sidecar["burn_in"]),
        config=sidecar.get("config", {}),
        warnings=list(sidecar.get("warnings", [])),
        n_divergences=int(sidecar.get("n_divergences", 0)),
        n_chol_fallbacks=int(sidecar.get("n_chol_fallbacks", 0)),
    )


def chain_file_hash(csv_path) -> str:
    """SHA-256 of the chain CSV bytes; datasets record this as provenance."""
    import hashlib

    h = hashlib.sha256()
    with open(csv_path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
