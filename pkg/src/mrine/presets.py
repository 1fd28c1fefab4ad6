"""Named hyperparameter presets and strict training-config resolution.

Preset names cover the benchmark settings (lorenz, grid-same, grid-diff,
center-out), each with three variants: the full multiscale model and the two
single-scale baselines.  Config dictionaries mirror the hyperparameter table
columns (phi_s .. te) plus optimizer and toggle keys; unknown keys are
rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from .losses import LossConfig
from .network import ModelConfig
from .training import TrainConfig

_COMMON = {
    "phi_m": (1, 128), "K": (1, 2, 3, 4), "rho_t": 0.3, "gc": 0.1, "gamma_x": 30.0,
}

PRESETS: dict[str, dict[str, dict]] = {
    "lorenz": {
        "mrine": dict(_COMMON, phi_s=(3, 128), phi_y=(3, 128), theta_s=(3, 128),
                      theta_y=(3, 128), n_a=32, n_x=32, rho_d=0.4,
                      gamma_s=250.0, gamma_y=10.0, gamma_r=0.001, te=200),
        "ss-poisson": dict(_COMMON, phi_s=(3, 128), theta_s=(3, 128), n_a=32, n_x=32,
                           rho_d=0.4, gamma_s=100.0, gamma_y=0.0, gamma_r=0.0001,
                           te=200, single_scale="poisson"),
        "ss-gaussian": dict(_COMMON, phi_y=(3, 128), theta_y=(3, 128), n_a=32, n_x=32,
                            rho_d=0.4, gamma_s=0.0, gamma_y=50.0, gamma_r=0.0001,
                            te=200, single_scale="gaussian"),
    },
    "grid-same": {
        "mrine": dict(_COMMON, phi_s=(3, 128), phi_y=(3, 128), theta_s=(3, 128),
                      theta_y=(3, 128), n_a=64, n_x=64, rho_d=0.1,
                      gamma_s=250.0, gamma_y=10.0, gamma_r=0.001, te=500),
        "ss-poisson": dict(_COMMON, phi_s=(3, 128), theta_s=(3, 128), n_a=64, n_x=64,
                           rho_d=0.1, gamma_s=100.0, gamma_y=0.0, gamma_r=0.0001,
                           te=500, single_scale="poisson"),
        "ss-gaussian": dict(_COMMON, phi_y=(3, 128), theta_y=(3, 128), n_a=64, n_x=64,
                            rho_d=0.1, gamma_s=0.0, gamma_y=10.0, gamma_r=0.0001,
                            te=500, single_scale="gaussian"),
    },
    "grid-diff": {
        "mrine": dict(_COMMON, phi_s=(3, 128), phi_y=(3, 128), theta_s=(3, 128),
                      theta_y=(3, 128), n_a=64, n_x=64, rho_d=0.1,
                      gamma_s=250.0, gamma_y=5.0, gamma_r=0.001, te=500),
        "ss-poisson": dict(_COMMON, phi_s=(3, 128), theta_s=(3, 128), n_a=64, n_x=64,
                           rho_d=0.1, gamma_s=100.0, gamma_y=0.0, gamma_r=0.0001,
                           te=500, single_scale="poisson"),
        "ss-gaussian": dict(_COMMON, phi_y=(3, 128), theta_y=(3, 128), n_a=64, n_x=64,
                            rho_d=0.1, gamma_s=0.0, gamma_y=5.0, gamma_r=0.0001,
                            te=500, single_scale="gaussian"),
    },
    "center-out": {
        "mrine": dict(_COMMON, phi_s=(3, 128), phi_y=(3, 128), theta_s=(3, 128),
                      theta_y=(3, 128), n_a=64, n_x=64, rho_d=0.1,
                      gamma_s=50.0, gamma_y=5.0, gamma_r=0.001, te=200),
        "ss-poisson": dict(_COMMON, phi_s=(3, 128), theta_s=(3, 128), n_a=64, n_x=64,
                           rho_d=0.1, gamma_s=30.0, gamma_y=0.0, gamma_r=0.0001,
                           te=200, single_scale="poisson"),
        "ss-gaussian": dict(_COMMON, phi_y=(3, 128), theta_y=(3, 128), n_a=64, n_x=64,
                            rho_d=0.1, gamma_s=0.0, gamma_y=5.0, gamma_r=0.0001,
                            te=200, single_scale="gaussian"),
    },
}

_MLP_KEYS = ("phi_s", "phi_y", "phi_m", "theta_s", "theta_y")
_KNOWN_KEYS = set(_MLP_KEYS) | {
    "preset", "variant", "n_a", "n_x", "K", "rho_t", "rho_d", "gc",
    "gamma_s", "gamma_y", "gamma_x", "gamma_r", "te", "tau",
    "single_scale", "obs_model_s", "zero_impute", "enable_l_smooth",
    "x_smooth_dims", "learn_initial_state",
    "batch_size", "seed", "lr_min", "lr_max", "lr_period", "lr_decay",
}


class ConfigError(ValueError):
    pass


def resolve_config(raw: dict, n_s: int, n_y: int) -> dict:
    """Merge a raw config dict over its preset and validate strictly.

    Returns a dict with keys model (ModelConfig), train (TrainConfig),
    loss (LossConfig, tau still to be filled unless given), zero_impute,
    and echo (the merged flat dict for checkpointing).
    """
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged: dict = {}
    if "preset" in raw:
        preset = raw["preset"]
        variant = raw.get("variant", "mrine")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset: {preset!r} (have {sorted(PRESETS)})")
        if variant not in PRESETS[preset]:
            raise ConfigError(f"unknown variant: {variant!r}")
        merged.update(PRESETS[preset][variant])
    for key, val in raw.items():
        if key in ("preset", "variant"):
            continue
        merged[key] = tuple(val) if key in _MLP_KEYS or key == "K" else val

    def take(key, default):
        return merged.get(key, default)

    single = take("single_scale", None)
    if single not in (None, "poisson", "gaussian"):
        raise ConfigError(f"single_scale must be null, poisson, or gaussian, got {single!r}")
    model = ModelConfig(
        n_s=n_s, n_y=n_y,
        n_a=int(take("n_a", 32)), n_x=int(take("n_x", 32)),
        phi_s=tuple(take("phi_s", (3, 128))), phi_y=tuple(take("phi_y", (3, 128))),
        phi_m=tuple(take("phi_m", (1, 128))),
        theta_s=tuple(take("theta_s", (3, 128))), theta_y=tuple(take("theta_y", (3, 128))),
        single_scale=single,
        obs_model_s=take("obs_model_s", "poisson"),
        learn_initial_state=bool(take("learn_initial_state", False)),
    )
    horizons = tuple(int(k) for k in take("K", (1, 2, 3, 4)))
    if any(k < 1 for k in horizons) or not horizons:
        raise ConfigError("K must be a nonempty list of horizons >= 1")
    loss = LossConfig(
        horizons=horizons,
        tau=float(take("tau", 1.0)),
        gamma_s=float(take("gamma_s", 0.0)),
        gamma_y=float(take("gamma_y", 0.0)),
        gamma_x=float(take("gamma_x", 0.0)),
        gamma_r=float(take("gamma_r", 0.0)),
        x_smooth_dims=take("x_smooth_dims", None),
        enable_l_smooth=bool(take("enable_l_smooth", True)),
    )
    train = TrainConfig(
        epochs=int(take("te", 200)),
        batch_size=int(take("batch_size", 32)),
        lr_min=float(take("lr_min", 0.001)),
        lr_max=float(take("lr_max", 0.01)),
        lr_period=int(take("lr_period", 10)),
        lr_decay=float(take("lr_decay", 0.99)),
        clip_norm=float(take("gc", 0.1)),
        rho_t=float(take("rho_t", 0.3)),
        rho_d=float(take("rho_d", 0.4)),
        seed=int(take("seed", 0)),
    )
    echo = dict(merged)
    for key in _MLP_KEYS + ("K",):
        if key in echo and echo[key] is not None:
            echo[key] = list(echo[key])
    return {
        "model": model,
        "train": train,
        "loss": loss,
        "zero_impute": bool(take("zero_impute", False)),
        "echo": echo,
    }
