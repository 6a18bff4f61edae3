"""Forward dispersion model and noisy point-concentration sensor.

The expected concentration at a point follows an isotropic-decay plume with
wind advection: a 1/r spreading factor, an exponential decay with the mixing
length, and two exponential advection factors built from the axis offsets to
the release point. All distances are metres, rates g/s, concentrations g/m^3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoincidentPointError

# Guard radius around the release point where the 1/r factor blows up.
DEFAULT_EPS_SEP = 1e-6

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class EnvironmentParams:
    """Meteorological parameters of the dispersion model.

    wind_speed: mean wind speed, m/s (>= 0).
    wind_direction: wind angle, radians.
    diffusivity: m^2/s (> 0).
    particle_lifetime: s (> 0).
    """

    wind_speed: float = 4.0
    wind_direction: float = np.pi / 2
    diffusivity: float = 1.0
    particle_lifetime: float = 8.0

    def __post_init__(self):
        if self.wind_speed < 0:
            raise ValueError("wind_speed must be >= 0")
        if self.diffusivity <= 0 or self.particle_lifetime <= 0:
            raise ValueError("diffusivity and particle_lifetime must be > 0")

    @property
    def mixing_coefficient(self) -> float:
        """Derived mixing length, m. Always recomputed, never stored."""
        u, d, tau = self.wind_speed, self.diffusivity, self.particle_lifetime
        return float(np.sqrt(d * tau / (1.0 + u * u * tau / (4.0 * d))))


@dataclass(frozen=True)
class SourceTerm:
    """Release location (3-vector, m) and emission rate (g/s)."""

    position: np.ndarray
    emission_rate: float = 5.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        pos.flags.writeable = False
        object.__setattr__(self, "position", pos)
        if self.emission_rate <= 0:
            raise ValueError("emission_rate must be > 0")


@dataclass(frozen=True)
class SensorModel:
    """Gaussian point sensor. The noise std is a fraction of the signal,
    floored at noise_floor so the likelihood never degenerates as the signal
    vanishes."""

    noise_fraction: float = 0.1
    noise_floor: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError("noise_fraction must be in [0, 1)")
        if self.noise_floor <= 0:
            raise ValueError("noise_floor must be > 0")

    def noise_std(self, signal):
        """Std of the additive reading noise for a given expected signal."""
        return np.maximum(self.noise_fraction * np.asarray(signal), self.noise_floor)


def log_concentration(x, src_pos, rates, env: EnvironmentParams):
    """Log expected concentration, broadcasting over agent/source arrays.

    x: (..., 3) agent positions; src_pos: (..., 3) release positions;
    rates: broadcastable release rates. Distances below DEFAULT_EPS_SEP are
    clamped to the guard value (callers that need a hard error use
    `concentration`).
    """
    x = np.asarray(x, dtype=float)
    src_pos = np.asarray(src_pos, dtype=float)
    delta = src_pos - x
    r = np.sqrt(np.sum(delta * delta, axis=-1))
    r = np.maximum(r, DEFAULT_EPS_SEP)
    zeta = env.mixing_coefficient
    out = np.log(rates) - np.log(4.0 * np.pi * env.diffusivity * r)
    out = out - r / zeta
    out = out + delta[..., 0] * env.wind_speed * np.cos(env.wind_direction) / (2.0 * env.diffusivity)
    out = out + delta[..., 1] * env.wind_speed * np.sin(env.wind_direction) / (2.0 * env.particle_lifetime)
    return out


def concentration(x, source: SourceTerm, env: EnvironmentParams,
                  eps_sep: float = DEFAULT_EPS_SEP) -> float:
    """Expected concentration at agent position x for a given release.

    Raises CoincidentPointError when x is within eps_sep of the release
    point, where the model is singular.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    sep = float(np.linalg.norm(x - source.position))
    if sep < eps_sep:
        raise CoincidentPointError(
            f"agent within {eps_sep} m of the release point (separation {sep:.3g} m)")
    return float(np.exp(log_concentration(x, source.position, source.emission_rate, env)))


def measure(x, source: SourceTerm, env: EnvironmentParams, sensor: SensorModel,
            rng: np.random.Generator) -> float:
    """One noisy sensor reading at x.

    Additive zero-mean Gaussian noise with std max(noise_fraction * signal,
    noise_floor); negative readings are clipped to zero (physical sensors
    report nonnegative concentration; the estimator's likelihood keeps the
    unclipped model).
    """
    signal = concentration(x, source, env)
    sigma = float(sensor.noise_std(signal))
    return max(0.0, signal + sigma * rng.standard_normal())
