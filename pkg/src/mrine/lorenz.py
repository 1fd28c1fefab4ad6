"""Stochastic Lorenz attractor benchmark.

Euler integration of the Lorenz system with additive Gaussian noise on each
step, a burn-in from a random start so trajectories begin on the attractor,
and dataset-level normalization of each latent dimension to zero mean and a
maximum absolute value of one.  The normalized latents drive two synthetic
observation streams: Gaussian channels with variance-5 noise and Poisson
count channels whose log-rates are affine in the latent state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA = 10.0
RHO = 28.0
BETA = 8.0 / 3.0


@dataclass(frozen=True)
class LorenzConfig:
    n_trials: int = 750
    n_steps: int = 200
    dt: float = 0.006
    noise_var: float = 0.01     # per-step additive noise variance
    burn_in: int = 500
    scale_noise_by_dt: bool = False  # multiply noise variance by dt
    seed: int = 0


@dataclass(frozen=True)
class ObsConfig:
    n_s: int = 10               # Poisson count channels
    n_y: int = 20               # Gaussian channels
    gaussian_noise_var: float = 5.0
    base_rate_hz: float = 5.0   # spikes per second at zero latent
    bin_s: float = 0.005        # bin width in seconds
    seed: int = 0


def lorenz_drift(x: np.ndarray) -> np.ndarray:
    """Deterministic Lorenz vector field, applied along the last axis."""
    dx = np.empty_like(x)
    dx[..., 0] = SIGMA * (x[..., 1] - x[..., 0])
    dx[..., 1] = x[..., 0] * (RHO - x[..., 2]) - x[..., 1]
    dx[..., 2] = x[..., 0] * x[..., 1] - BETA * x[..., 2]
    return dx


def euler_step(x: np.ndarray, dt: float, noise: np.ndarray) -> np.ndarray:
    return x + lorenz_drift(x) * dt + noise


@dataclass
class SimBundle:
    latents: np.ndarray          # (n_trials, n_steps, 3), normalized
    raw_latents: np.ndarray      # same, before normalization
    offset: np.ndarray           # (3,) per-dim mean removed
    scale: np.ndarray            # (3,) per-dim max-abs divisor
    config: LorenzConfig


def _check_bounded(x: np.ndarray, trial: int) -> None:
    if not np.isfinite(x).all() or np.abs(x).max() > 1e6:
        raise RuntimeError(
            f"Lorenz integration diverged in trial {trial}; "
            "reduce dt or the noise variance")


def simulate_latents(cfg: LorenzConfig) -> SimBundle:
    """Simulate trials and normalize per dimension across the whole dataset."""
    rng = np.random.default_rng(cfg.seed)
    std = np.sqrt(cfg.noise_var * (cfg.dt if cfg.scale_noise_by_dt else 1.0))
    out = np.empty((cfg.n_trials, cfg.n_steps, 3))
    for trial in range(cfg.n_trials):
        x = rng.standard_normal(3)
        for _ in range(cfg.burn_in):
            x = euler_step(x, cfg.dt, std * rng.standard_normal(3))
            _check_bounded(x, trial)
        for t in range(cfg.n_steps):
            x = euler_step(x, cfg.dt, std * rng.standard_normal(3))
            _check_bounded(x, trial)
            out[trial, t] = x
    flat = out.reshape(-1, 3)
    offset = flat.mean(axis=0)
    centered = out - offset
    scale = np.abs(centered.reshape(-1, 3)).max(axis=0)
    if (scale == 0).any():
        raise RuntimeError("degenerate latent dimension with zero range")
    return SimBundle(centered / scale, out, offset, scale, cfg)


def gen_gaussian_obs(latents: np.ndarray, cfg: ObsConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """y = C x + noise with a random mixing matrix; returns (y, C)."""
    c = rng.standard_normal((cfg.n_y, latents.shape[-1]))
    noise = np.sqrt(cfg.gaussian_noise_var) * rng.standard_normal(
        latents.shape[:-1] + (cfg.n_y,))
    return latents @ c.T + noise, c


def gen_poisson_obs(latents: np.ndarray, cfg: ObsConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts with log-rate C x + log(base_rate * bin); returns (s, rates, C)."""
    c = rng.standard_normal((cfg.n_s, latents.shape[-1]))
    log_rate = latents @ c.T + np.log(cfg.base_rate_hz * cfg.bin_s)
    rates = np.exp(log_rate)
    return rng.poisson(rates).astype(np.float64), rates, c


def make_trials(sim: SimBundle, obs_cfg: ObsConfig,
                timescale_ratio: int = 1) -> list[dict]:
    """Package latents plus generated observations into training trials.

    The Gaussian stream is observed every timescale_ratio-th step (phase 0);
    the Poisson stream at every step.  The true latents ride along as the
    behavior target.
    """
    if timescale_ratio < 1:
        raise ValueError("timescale_ratio must be >= 1")
    rng = np.random.default_rng(obs_cfg.seed)
    y, c_y = gen_gaussian_obs(sim.latents, obs_cfg, rng)
    s, rates, c_s = gen_poisson_obs(sim.latents, obs_cfg, rng)
    n_trials, n_steps, _ = sim.latents.shape
    mask_y = np.zeros(n_steps)
    mask_y[::timescale_ratio] = 1.0
    trials = []
    for i in range(n_trials):
        trials.append({
            "s": s[i],
            "y": y[i],
            "mask_s": np.ones(n_steps),
            "mask_y": mask_y.copy(),
            "behavior": sim.latents[i],
            "rates": rates[i],
        })
    return trials
