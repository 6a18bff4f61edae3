"""Sequential Bayesian estimation of the release source with a weighted
particle cloud.

Two update paths share the same reweighting law: `bayes_update` consumes real
sensor readings and may resample, `predicted_update` consumes hypothesised
readings during planner rollouts and never resamples, so rollouts stay cheap,
deterministic, and side-effect free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import WeightUnderflowError
from .geometry import Box2D
from .plume import EnvironmentParams, SensorModel, SourceTerm, log_concentration

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs of the particle filter."""

    n_particles: int = 10000
    ess_fraction: float = 0.5       # resample when ESS < fraction * n
    jitter_scale: float = 0.02      # per-dimension jitter as a fraction of current std
    delta_max: float = 4.0          # per-axis bound on reported-mean movement per step
    estimate_rate: bool = False
    rate_interval: tuple = (0.5, 10.0)


@dataclass(frozen=True)
class ParticleSet:
    """Immutable weighted hypotheses over the unknown source term.

    xy: (n, 2) horizontal release positions; rates: (n,) emission rates
    (all identical when the rate is treated as known); z: known release
    altitude; weights sum to one. Updates return new sets, so snapshots can
    be rolled out concurrently.
    """

    xy: np.ndarray
    rates: np.ndarray
    z: float
    weights: np.ndarray
    domain: Box2D
    estimate_rate: bool = False
    rate_interval: tuple = (0.5, 10.0)
    generation: int = 0

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float)
        rates = np.asarray(self.rates, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2 or len(rates) != len(xy) or len(w) != len(xy):
            raise ValueError("inconsistent particle array shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        for arr in (xy, rates, w):
            arr.flags.writeable = False
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    def positions3(self) -> np.ndarray:
        """(n, 3) release positions with the known altitude appended."""
        return np.column_stack([self.xy, np.full(len(self), self.z)])

    def hypothesis(self, i: int) -> SourceTerm:
        return SourceTerm(position=np.array([self.xy[i, 0], self.xy[i, 1], self.z]),
                          emission_rate=float(self.rates[i]))


@dataclass(frozen=True)
class PosteriorSummary:
    """First two moments of the source estimate.

    mean is a 3-vector (known altitude filled in), projected onto the search
    domain; cov spans the estimated dimensions (2x2 position-only, 3x3 with
    the rate appended); trace_position is the trace of the position block.
    """

    mean: np.ndarray
    cov: np.ndarray
    trace_position: float
    rate_mean: float | None = None

    @property
    def mean_xy(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def position_cov(self) -> np.ndarray:
        return self.cov[:2, :2]


@dataclass
class InfoState:
    """Realized information sequence: the initial reading followed by the
    (action, reading) pairs collected so far."""

    initial_reading: float
    steps: list = field(default_factory=list)

    def append(self, action, reading: float):
        self.steps.append((None if action is None else np.asarray(action, dtype=float),
                           float(reading)))

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class GridSpec:
    """Histogram grid for entropy of the particle cloud."""

    nx: int = 25
    ny: int = 25


def init_prior(domain: Box2D, n_particles: int, rng: np.random.Generator, *,
               source_z: float = 0.0, rate: float = 5.0,
               rate_interval: tuple | None = None) -> ParticleSet:
    """Uniform prior: positions uniform over the domain, rates either fixed
    at the known value or uniform over rate_interval when the rate is
    estimated. Equal weights."""
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    xy = domain.sample(n_particles, rng)
    if rate_interval is not None:
        rates = rng.uniform(rate_interval[0], rate_interval[1], size=n_particles)
        estimate_rate = True
        interval = (float(rate_interval[0]), float(rate_interval[1]))
    else:
        rates = np.full(n_particles, float(rate))
        estimate_rate = False
        interval = (float(rate), float(rate))
    w = np.full(n_particles, 1.0 / n_particles)
    return ParticleSet(xy=xy, rates=rates, z=source_z, weights=w, domain=domain,
                       estimate_rate=estimate_rate, rate_interval=interval, generation=0)


def log_likelihoods(reading: float, ps: ParticleSet, agent_xyz,
                    env: EnvironmentParams, sensor: SensorModel) -> np.ndarray:
    """Gaussian log density of the reading under every hypothesis.

    The std is hypothesis dependent: max(noise_fraction * predicted signal,
    noise_floor)."""
    agent_xyz = np.asarray(agent_xyz, dtype=float).reshape(3)
    logm = log_concentration(agent_xyz, ps.positions3(), ps.rates, env)
    pred = np.exp(logm)
    sigma = sensor.noise_std(pred)
    zscore = (reading - pred) / sigma
    return -0.5 * zscore * zscore - np.log(sigma) - _LOG_SQRT_2PI


def likelihood(reading: float, hypothesis: SourceTerm, agent_xyz,
               env: EnvironmentParams, sensor: SensorModel) -> float:
    """Gaussian density of a reading for a single source hypothesis."""
    agent_xyz = np.asarray(agent_xyz, dtype=float).reshape(3)
    logm = log_concentration(agent_xyz, hypothesis.position, hypothesis.emission_rate, env)
    pred = float(np.exp(logm))
    sigma = float(sensor.noise_std(pred))
    z = (reading - pred) / sigma
    return float(np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi)))


def reweight(weights: np.ndarray, log_liks: np.ndarray) -> np.ndarray:
    """Multiply weights by likelihoods (given in log space) and renormalize.

    Raises WeightUnderflowError when the total posterior mass underflows,
    which signals estimator divergence."""
    weights = np.asarray(weights, dtype=float)
    log_liks = np.asarray(log_liks, dtype=float)
    shift = np.max(np.where(weights > 0, log_liks, -np.inf))
    if not np.isfinite(shift):
        raise WeightUnderflowError("all particle likelihoods underflowed")
    new_w = weights * np.exp(log_liks - shift)
    total = new_w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise WeightUnderflowError("posterior weight mass underflowed")
    return new_w / total


def effective_sample_size(ps: ParticleSet) -> float:
    """1 / sum(w_i^2); equals n for equal weights, 1 for a degenerate set."""
    return float(1.0 / np.sum(ps.weights ** 2))


def resample_and_jitter(ps: ParticleSet, rng: np.random.Generator,
                        jitter_scale: float = 0.02) -> ParticleSet:
    """Systematic resampling proportional to weights, then Gaussian jitter
    with per-dimension scale jitter_scale * current weighted std. Children
    are clipped back into the domain (and rate interval). Weights reset to
    uniform; particle count preserved."""
    n = len(ps)
    std_xy = np.sqrt(np.maximum(_weighted_var(ps.xy, ps.weights), 0.0))
    idx = _systematic_indices(ps.weights, rng)
    xy = ps.xy[idx].copy()
    rates = ps.rates[idx].copy()
    if jitter_scale > 0.0:
        xy += rng.standard_normal((n, 2)) * (jitter_scale * std_xy)
        xy = ps.domain.clip(xy)
        if ps.estimate_rate:
            std_q = np.sqrt(max(float(_weighted_var(ps.rates, ps.weights)), 0.0))
            rates += rng.standard_normal(n) * (jitter_scale * std_q)
            rates = np.clip(rates, ps.rate_interval[0], ps.rate_interval[1])
    w = np.full(n, 1.0 / n)
    return replace(ps, xy=xy, rates=rates, weights=w)


def bayes_update(ps: ParticleSet, action, reading: float, agent_xyz,
                 env: EnvironmentParams, sensor: SensorModel,
                 rng: np.random.Generator, *, ess_fraction: float = 0.5,
                 jitter_scale: float = 0.02) -> ParticleSet:
    """Posterior update with a real reading: reweight, then resample with
    jitter when the effective sample size falls below ess_fraction * n.

    `action` is the move that produced the reading; it is accepted so call
    sites mirror the information sequence, but the update law only needs the
    resulting agent position."""
    del action
    log_liks = log_likelihoods(reading, ps, agent_xyz, env, sensor)
    w = reweight(ps.weights, log_liks)
    out = replace(ps, weights=w, generation=ps.generation + 1)
    if 1.0 / np.sum(w ** 2) < ess_fraction * len(ps):
        out = resample_and_jitter(out, rng, jitter_scale)
    return out


def predicted_update(ps: ParticleSet, action, reading: float, agent_xyz,
                     env: EnvironmentParams, sensor: SensorModel) -> ParticleSet:
    """Belief update under a hypothesised reading at a predicted agent
    position: pure reweighting, no resampling, parent set untouched."""
    del action
    log_liks = log_likelihoods(reading, ps, agent_xyz, env, sensor)
    w = reweight(ps.weights, log_liks)
    return replace(ps, weights=w, generation=ps.generation + 1)


def summarize(ps: ParticleSet) -> PosteriorSummary:
    """Weighted mean and covariance of the estimated dimensions. The position
    mean is projected onto the search domain, so downstream consumers can
    rely on it being a valid in-domain target."""
    w = ps.weights
    mean_xy = w @ ps.xy
    mean_xy = ps.domain.clip(mean_xy)
    if ps.estimate_rate:
        vals = np.column_stack([ps.xy, ps.rates])
        mean_full = w @ vals
        d = vals - mean_full
        cov = (w[:, None] * d).T @ d
        rate_mean = float(mean_full[2])
    else:
        d = ps.xy - (w @ ps.xy)
        cov = (w[:, None] * d).T @ d
        rate_mean = None
    cov = 0.5 * (cov + cov.T)
    mean = np.array([mean_xy[0], mean_xy[1], ps.z])
    return PosteriorSummary(mean=mean, cov=cov,
                            trace_position=float(np.trace(cov[:2, :2])),
                            rate_mean=rate_mean)


def posterior_entropy(ps: ParticleSet, grid: GridSpec = GridSpec()) -> float:
    """Shannon entropy (nats) of the particle cloud histogrammed on a regular
    grid over the domain. Zero when all mass sits in one cell, log(k) for
    mass uniform over k cells."""
    cells = grid_cell_index(ps.xy, ps.domain, grid)
    mass = np.bincount(cells, weights=ps.weights, minlength=grid.nx * grid.ny)
    p = mass[mass > 0]
    return float(-np.sum(p * np.log(p)))


def grid_cell_index(xy: np.ndarray, domain: Box2D, grid: GridSpec) -> np.ndarray:
    """Flat cell index of each point on the grid (boundary points fall into
    the last cell of their axis)."""
    span_x = max(domain.x_max - domain.x_min, 1e-12)
    span_y = max(domain.y_max - domain.y_min, 1e-12)
    ix = np.clip(((xy[..., 0] - domain.x_min) / span_x * grid.nx).astype(int), 0, grid.nx - 1)
    iy = np.clip(((xy[..., 1] - domain.y_min) / span_y * grid.ny).astype(int), 0, grid.ny - 1)
    return ix * grid.ny + iy


def clamp_mean_step(prev_xy: np.ndarray, raw_xy: np.ndarray,
                    delta_max: float) -> np.ndarray:
    """Limit the per-axis movement of the reported mean to delta_max, so the
    step-to-step mean increments stay inside a known bounded set."""
    prev_xy = np.asarray(prev_xy, dtype=float)
    raw_xy = np.asarray(raw_xy, dtype=float)
    return prev_xy + np.clip(raw_xy - prev_xy, -delta_max, delta_max)


def dump_particles(ps: ParticleSet, path) -> None:
    """Debug dump of the cloud as CSV (columns x, y, [q,] weight)."""
    if ps.estimate_rate:
        header = "x,y,q,weight"
        data = np.column_stack([ps.xy, ps.rates, ps.weights])
    else:
        header = "x,y,weight"
        data = np.column_stack([ps.xy, ps.weights])
    np.savetxt(path, data, delimiter=",", header=header, comments="")


def _systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right").clip(0, n - 1)


def _weighted_var(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    mean = weights @ values
    d = values - mean
    return weights @ (d * d)
