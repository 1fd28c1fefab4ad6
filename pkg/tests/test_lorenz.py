"""Stochastic Lorenz generator and observation synthesis."""

import numpy as np
import pytest

from mrine.lorenz import (
    LorenzConfig,
    ObsConfig,
    euler_step,
    gen_gaussian_obs,
    gen_poisson_obs,
    lorenz_drift,
    make_trials,
    simulate_latents,
)


def test_drift_fixed_point_at_origin():
    assert np.array_equal(lorenz_drift(np.zeros(3)), np.zeros(3))
    x = np.zeros(3)
    for _ in range(50):
        x = euler_step(x, 0.006, np.zeros(3))
    assert np.array_equal(x, np.zeros(3))


def test_single_euler_step_by_hand():
    x = euler_step(np.array([1.0, 1.0, 1.0]), 0.006, np.zeros(3))
    assert np.allclose(x, [1.0, 1.156, 0.99], atol=1e-12)


def test_drift_vectorizes_over_leading_axes():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((4, 5, 3))
    out = lorenz_drift(pts)
    for i in range(4):
        for j in range(5):
            assert np.array_equal(out[i, j], lorenz_drift(pts[i, j]))


def test_normalization_is_exact():
    sim = simulate_latents(LorenzConfig(n_trials=10, n_steps=100, seed=1))
    flat = sim.latents.reshape(-1, 3)
    assert np.abs(flat.mean(axis=0)).max() < 1e-10
    assert np.array_equal(np.abs(flat).max(axis=0), np.ones(3))
    # the stored offset and scale invert the normalization
    assert np.allclose(sim.latents * sim.scale + sim.offset, sim.raw_latents,
                       atol=1e-10)


def test_trajectories_stay_bounded():
    sim = simulate_latents(LorenzConfig(n_trials=30, n_steps=200, seed=2))
    assert np.abs(sim.raw_latents).max() < 100.0


def test_simulation_is_reproducible():
    a = simulate_latents(LorenzConfig(n_trials=3, n_steps=50, seed=3))
    b = simulate_latents(LorenzConfig(n_trials=3, n_steps=50, seed=3))
    assert np.array_equal(a.latents, b.latents)
    c = simulate_latents(LorenzConfig(n_trials=3, n_steps=50, seed=4))
    assert not np.array_equal(a.latents, c.latents)


def test_divergence_guard_raises():
    with pytest.raises(RuntimeError):
        simulate_latents(LorenzConfig(n_trials=1, n_steps=20, dt=10.0, burn_in=5, seed=0))


def _step_noise_std(cfg):
    """Empirical std of the per-step noise recovered from raw trajectories."""
    sim = simulate_latents(cfg)
    raw = sim.raw_latents
    resid = raw[:, 1:] - raw[:, :-1] - lorenz_drift(raw[:, :-1]) * cfg.dt
    return resid.std()


def test_noise_is_per_step_additive_by_default():
    cfg = LorenzConfig(n_trials=10, n_steps=200, seed=5)
    assert abs(_step_noise_std(cfg) - 0.1) / 0.1 < 0.05


def test_sqrt_dt_noise_switch():
    cfg = LorenzConfig(n_trials=10, n_steps=200, seed=5, scale_noise_by_dt=True)
    want = np.sqrt(0.01 * 0.006)
    assert abs(_step_noise_std(cfg) - want) / want < 0.05


# ---------------------------------------------------------------------------
# observation synthesis


def test_gaussian_obs_affine_structure():
    rng = np.random.default_rng(6)
    latents = rng.standard_normal((4, 30, 3))
    y, c = gen_gaussian_obs(latents, ObsConfig(n_y=5, gaussian_noise_var=0.0),
                            np.random.default_rng(7))
    assert y.shape == (4, 30, 5)
    assert np.array_equal(y, latents @ c.T)


def test_gaussian_obs_noise_variance():
    rng = np.random.default_rng(8)
    latents = rng.standard_normal((50, 200, 3)) * 0.5
    y, c = gen_gaussian_obs(latents, ObsConfig(n_y=20), np.random.default_rng(9))
    resid = y - latents @ c.T
    assert abs(resid.var() - 5.0) / 5.0 < 0.03


def test_poisson_obs_base_rate():
    # zero latents remove the mixing term, leaving 5 spikes/s * 5 ms bins
    latents = np.zeros((15, 1000, 3))
    s, rates, _ = gen_poisson_obs(latents, ObsConfig(n_s=10),
                                  np.random.default_rng(10))
    assert np.allclose(rates, 0.025)
    assert s.size >= 1.5e5
    assert abs(s.mean() - 0.025) / 0.025 < 0.05
    assert np.array_equal(s, np.round(s)) and s.min() >= 0


def test_poisson_obs_log_rate_model():
    rng = np.random.default_rng(11)
    latents = rng.standard_normal((2, 40, 3)) * 0.3
    s, rates, c = gen_poisson_obs(latents, ObsConfig(n_s=4), np.random.default_rng(12))
    want = np.exp(latents @ c.T + np.log(5.0 * 0.005))
    assert np.allclose(rates, want, atol=1e-12)
    assert s.shape == (2, 40, 4)


# ---------------------------------------------------------------------------
# trial packaging


def test_make_trials_masks_and_behavior():
    sim = simulate_latents(LorenzConfig(n_trials=4, n_steps=200, seed=13))
    trials = make_trials(sim, ObsConfig(n_s=6, n_y=5, seed=14), timescale_ratio=5)
    assert len(trials) == 4
    tr = trials[0]
    assert np.array_equal(tr["mask_s"], np.ones(200))
    assert tr["mask_y"].sum() == 40   # ceil(200 / 5) observed rows
    assert np.array_equal(np.flatnonzero(tr["mask_y"])[:3], [0, 5, 10])
    assert np.array_equal(tr["behavior"], sim.latents[0])
    assert tr["s"].shape == (200, 6) and tr["y"].shape == (200, 5)
    assert tr["rates"].shape == (200, 6)


def test_make_trials_ratio_one_observes_everything():
    sim = simulate_latents(LorenzConfig(n_trials=2, n_steps=50, seed=15))
    trials = make_trials(sim, ObsConfig(n_s=3, n_y=2, seed=16), timescale_ratio=1)
    assert np.array_equal(trials[0]["mask_y"], np.ones(50))
    with pytest.raises(ValueError):
        make_trials(sim, ObsConfig(n_s=3, n_y=2), timescale_ratio=0)
