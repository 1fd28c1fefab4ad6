"""Training loop: Adam with global gradient-norm clipping, a triangular
cyclical learning rate whose peak decays every cycle, and time-dropout that
hides a fraction of the observed samples from the model each step while the
smoothness penalties keep seeing the original masks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Graph, SingularMatrixError, Tensor
from .losses import LossConfig, loss_total
from .network import MrineModel, sanitize

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the model is rolled back to the
    last finite epoch and the partial log is attached."""

    def __init__(self, message: str, log: list):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_min: float = 0.001
    lr_max: float = 0.01
    lr_period: int = 10      # epochs from valley to peak
    lr_decay: float = 0.99   # peak shrink factor per completed cycle
    clip_norm: float = 0.1
    rho_t: float = 0.3       # time-dropout rate on observed samples
    rho_d: float = 0.4       # regular dropout in encoder input/output layers
    seed: int = 0
    zero_impute: bool = False  # feed zeros at missing steps and an all-ones mask


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Triangular schedule: valley to peak over lr_period epochs and back,
    with the peak multiplied by lr_decay after each full cycle."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    cycle_len = 2 * cfg.lr_period
    cycle, pos = divmod(epoch, cycle_len)
    peak = max(cfg.lr_min, cfg.lr_max * cfg.lr_decay ** cycle)
    if pos <= cfg.lr_period:
        frac = pos / cfg.lr_period
    else:
        frac = (cycle_len - pos) / cfg.lr_period
    return cfg.lr_min + (peak - cfg.lr_min) * frac


def time_dropout(mask: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each observed entry independently with probability rho.

    Entries already 0 stay 0; the result is elementwise <= mask.
    """
    if rho < 0 or rho >= 1:
        raise ValueError("rho must be in [0, 1)")
    if rho == 0.0:
        return np.asarray(mask, dtype=np.float64)
    keep = rng.random(mask.shape) >= rho
    return np.asarray(mask, dtype=np.float64) * keep


class AdamState:
    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_gradients(grads: list[np.ndarray], clip_norm: float | None) -> tuple[list[np.ndarray], float]:
    """Scale the gradient list so its global norm is at most clip_norm.

    Returns (clipped grads, pre-clip norm).  None disables clipping.
    """
    norm = global_norm(grads)
    if clip_norm is not None and norm > clip_norm and norm > 0:
        scale = clip_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, clip_norm: float | None = None) -> float:
    """One Adam update in place; returns the pre-clip global gradient norm."""
    grads, norm = clip_gradients(grads, clip_norm)
    state.t += 1
    b1t = 1.0 - ADAM_BETA1 ** state.t
    b2t = 1.0 - ADAM_BETA2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return norm


def _stack_batch(trials: list[dict], idx: np.ndarray) -> dict:
    return {
        "s": np.stack([trials[i]["s"] for i in idx]),
        "y": np.stack([trials[i]["y"] for i in idx]),
        "mask_s": np.stack([trials[i]["mask_s"] for i in idx]),
        "mask_y": np.stack([trials[i]["mask_y"] for i in idx]),
    }


def _batches(trials: list[dict], order: np.ndarray, batch_size: int):
    """Group the shuffled trial order into batches of equal sequence length."""
    by_len: dict[int, list] = {}
    for i in order:
        by_len.setdefault(len(trials[i]["s"]), []).append(i)
    for idx in by_len.values():
        for lo in range(0, len(idx), batch_size):
            yield np.asarray(idx[lo:lo + batch_size])


def _impute_kwargs(batch: dict, mask_s: np.ndarray, mask_y: np.ndarray) -> dict:
    """loss_total keywords for zero-imputation: zero-filled inputs, ones masks."""
    return {
        "s_in": sanitize(batch["s"], mask_s),
        "y_in": sanitize(batch["y"], mask_y),
        "infer_mask_s": np.ones_like(mask_s, dtype=np.float64),
        "infer_mask_y": np.ones_like(mask_y, dtype=np.float64),
    }


def evaluate_loss(model: MrineModel, trials: list[dict], loss_cfg: LossConfig,
                  batch_size: int = 32, zero_impute: bool = False) -> float:
    """Deterministic total loss (no dropout of any kind) over a trial list."""
    total = 0.0
    order = np.arange(len(trials))
    for idx in _batches(trials, order, batch_size):
        batch = _stack_batch(trials, idx)
        kwargs = _impute_kwargs(batch, batch["mask_s"], batch["mask_y"]) if zero_impute else {}
        lb = loss_total(model, batch["s"], batch["y"], batch["mask_s"],
                        batch["mask_y"], loss_cfg, **kwargs)
        total += float(lb.total.data)
    return total


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()


def train(model: MrineModel, trials: list[dict], cfg: TrainConfig,
          loss_cfg: LossConfig, val_trials: list[dict] | None = None,
          verbose: bool = False) -> list[dict]:
    """Train in place; returns the per-epoch log.

    Each log entry holds the epoch's learning rate, the mean per-batch loss
    breakdown under dropout, and the deterministic validation total when
    val_trials is given (the epoch-0 entry is the pre-update loss).
    """
    if not trials:
        raise ValueError("no training trials")
    rng = np.random.default_rng(cfg.seed)
    params = [t for _, t in model.trainable()]
    state = AdamState(params)
    log: list[dict] = []
    snap = _snapshot(params)
    if val_trials is not None:
        log.append({"epoch": 0, "lr": lr_at(0, cfg),
                    "val_total": evaluate_loss(model, val_trials, loss_cfg,
                                               cfg.batch_size, cfg.zero_impute)})
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(trials))
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in _batches(trials, order, cfg.batch_size):
            batch = _stack_batch(trials, idx)
            drop_s = time_dropout(batch["mask_s"], cfg.rho_t, rng)
            drop_y = time_dropout(batch["mask_y"], cfg.rho_t, rng)
            kwargs = _impute_kwargs(batch, drop_s, drop_y) if cfg.zero_impute else {}
            with Graph() as g:
                try:
                    lb = loss_total(model, batch["s"], batch["y"], drop_s, drop_y,
                                    loss_cfg, mask_s_orig=batch["mask_s"],
                                    mask_y_orig=batch["mask_y"], training=True,
                                    rng=rng, rho_d=cfg.rho_d, **kwargs)
                    bad = not np.isfinite(lb.total.data)
                except SingularMatrixError as err:
                    lb, bad = None, err
                if bad:
                    _restore(params, snap)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}; model rolled back "
                        f"to epoch {epoch - 1 if epoch else 'init'}", log)
                g.backward(lb.total)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            for p in params:
                p.grad = None
            adam_step(params, grads, state, lr, cfg.clip_norm)
            for key, val in lb.summary().items():
                sums[key] = sums.get(key, 0.0) + val
            n_batches += 1
        entry = {"epoch": epoch + 1, "lr": lr}
        entry.update({k: v / n_batches for k, v in sums.items()})
        if val_trials is not None:
            entry["val_total"] = evaluate_loss(model, val_trials, loss_cfg,
                                               cfg.batch_size, cfg.zero_impute)
        log.append(entry)
        snap = _snapshot(params)
        if verbose:
            vs = f" val={entry['val_total']:.3f}" if "val_total" in entry else ""
            print(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:.5f} "
                  f"loss={entry.get('total', float('nan')):.3f}{vs}")
    return log
