"""Training objective.

Three terms plus weight decay:

* multi-horizon prediction: for each horizon k the multiscale LDM propagates
  the filtered state k steps, the decoders turn the predicted embedding into
  Poisson rates / Gaussian means, and the masked negative log-likelihood is
  accumulated, with the discrete-stream term scaled by tau;
* smoothed reconstruction: the same likelihood on embeddings from the RTS
  smoother, encouraging the latents to explain the full sequence;
* smoothness: KL divergences between the smoothed predictive distributions at
  consecutive observed timesteps (consecutive in the observed index set, so a
  gap contributes a single term), plus a Gaussian KL between the smoothed
  marginals of the first x_smooth_dims latent dimensions at consecutive steps.

tau balances the two data likelihoods: it is the ratio of the mean Gaussian
log-likelihood to the mean Poisson log-likelihood of intercept-only models
fitted on the training data, computed once and frozen before training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Tensor
from .ldm import cov_diagonals, kstep_predict
from .network import ModelPass, MrineModel, decode_means, decode_rates, forward

LOG_2PI = float(np.log(2.0 * np.pi))
RATE_FLOOR = 1e-3


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


# ---------------------------------------------------------------------------
# likelihoods and divergences


def poisson_loglik(s, lam):
    """Sum of s*log(lam) - lam - log(s!) over all entries.

    s holds counts (validated nonnegative integers stored as floats); lam may
    be a Tensor, in which case the result is a Tensor on the graph.  The
    log-factorial term does not depend on lam and is treated as a constant.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size and (s < 0).any():
        raise ValueError("Poisson counts must be nonnegative")
    const = gammaln(s + 1.0)
    if _is_tensor(lam):
        return (ad.log(lam) * s - lam - const).sum()
    lam = np.asarray(lam, dtype=np.float64)
    if (lam <= 0).any():
        raise ValueError("Poisson rates must be positive")
    return float((s * np.log(lam) - lam - const).sum())


def gaussian_loglik(y, mu):
    """Unit-variance Gaussian log-likelihood, summed over all entries."""
    y = np.asarray(y, dtype=np.float64)
    if _is_tensor(mu):
        return (ad.square(mu - y) * -0.5 - 0.5 * LOG_2PI).sum()
    mu = np.asarray(mu, dtype=np.float64)
    return float((-0.5 * (y - mu) ** 2 - 0.5 * LOG_2PI).sum())


def kl_poisson(lam1, lam2):
    """KL(Poisson(lam1) || Poisson(lam2)) = lam1 log(lam1/lam2) - lam1 + lam2.

    Elementwise; callers reduce.  Rates must be positive.
    """
    if _is_tensor(lam1) or _is_tensor(lam2):
        lam1, lam2 = ad.as_tensor(lam1), ad.as_tensor(lam2)
        return lam1 * (ad.log(lam1) - ad.log(lam2)) - lam1 + lam2
    lam1 = np.asarray(lam1, dtype=np.float64)
    lam2 = np.asarray(lam2, dtype=np.float64)
    if (lam1 <= 0).any() or (lam2 <= 0).any():
        raise ValueError("Poisson rates must be positive")
    out = lam1 * np.log(lam1 / lam2) - lam1 + lam2
    return float(out) if out.ndim == 0 else out


def kl_gaussian_unitvar(mu1, mu2):
    """KL between unit-variance Gaussians: 0.5 (mu1 - mu2)^2, elementwise."""
    if _is_tensor(mu1) or _is_tensor(mu2):
        return ad.square(ad.as_tensor(mu1) - ad.as_tensor(mu2)) * 0.5
    out = 0.5 * (np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)) ** 2
    return float(out) if out.ndim == 0 else out


def kl_gaussian_marginal(m1, v1, m2, v2):
    """KL(N(m1, v1) || N(m2, v2)) for scalar marginals, elementwise."""
    if any(_is_tensor(x) for x in (m1, v1, m2, v2)):
        m1, v1 = ad.as_tensor(m1), ad.as_tensor(v1)
        m2, v2 = ad.as_tensor(m2), ad.as_tensor(v2)
        return (ad.log(v2) - ad.log(v1)) * 0.5 + (v1 + ad.square(m1 - m2)) * 0.5 * reciprocal(v2) - 0.5
    m1, v1, m2, v2 = (np.asarray(x, dtype=np.float64) for x in (m1, v1, m2, v2))
    if (v1 <= 0).any() or (v2 <= 0).any():
        raise ValueError("variances must be positive")
    out = 0.5 * np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / (2.0 * v2) - 0.5
    return float(out) if out.ndim == 0 else out


def reciprocal(v: Tensor) -> Tensor:
    return ad.exp(-ad.log(v))


def compute_tau(trials: list[dict]) -> float:
    """Likelihood-scale ratio between the continuous and discrete streams.

    Fits intercept-only models on the observed rows of the training trials:
    per-channel mean rates for the Poisson stream (floored at 1e-3) and
    per-channel means for the unit-variance Gaussian stream.  Returns the
    ratio of the mean Gaussian row log-likelihood to the mean Poisson row
    log-likelihood.
    """
    s_rows = [tr["s"][tr["mask_s"] > 0] for tr in trials]
    y_rows = [tr["y"][tr["mask_y"] > 0] for tr in trials]
    s_all = np.concatenate([r for r in s_rows if len(r)], axis=0) if any(len(r) for r in s_rows) else np.zeros((0, 1))
    y_all = np.concatenate([r for r in y_rows if len(r)], axis=0) if any(len(r) for r in y_rows) else np.zeros((0, 1))
    if len(s_all) == 0 or len(y_all) == 0:
        raise ValueError("tau needs at least one observed row in each stream")
    s_bar = np.maximum(s_all.mean(axis=0), RATE_FLOOR)
    y_bar = y_all.mean(axis=0)
    den = float((s_all * np.log(s_bar) - s_bar - gammaln(s_all + 1.0)).sum(axis=1).mean())
    num = float((-0.5 * (y_all - y_bar) ** 2 - 0.5 * LOG_2PI).sum(axis=1).mean())
    if den == 0.0:
        raise ValueError("degenerate Poisson stream: zero mean log-likelihood")
    return num / den


# ---------------------------------------------------------------------------
# loss terms


@dataclass(frozen=True)
class LossConfig:
    horizons: tuple = (1, 2, 3, 4)
    tau: float = 1.0
    gamma_s: float = 0.0
    gamma_y: float = 0.0
    gamma_x: float = 0.0
    gamma_r: float = 0.0
    x_smooth_dims: int | None = None   # None means floor(n_x / 2)
    enable_l_smooth: bool = True


@dataclass
class LossBreakdown:
    total: Tensor
    k_step: float
    smooth_recon: float
    smoothness: float
    l2: float

    def summary(self) -> dict:
        return {
            "total": float(self.total.data),
            "k_step": self.k_step,
            "smooth_recon": self.smooth_recon,
            "smoothness": self.smoothness,
            "l2": self.l2,
        }


def _masked_loglik_s(model, a: Tensor, s: np.ndarray, mask: np.ndarray) -> Tensor:
    """Row-masked discrete-stream log-likelihood of embeddings a."""
    out = decode_rates(model, a)
    s = np.asarray(s, dtype=np.float64)
    # zero out masked rows so stray NaNs there cannot leak through 0 * nan
    s = np.where(mask[..., None] > 0, s, 0.0)
    if model.config.obs_model_s == "gaussian":
        rows = (ad.square(out - s) * -0.5 - 0.5 * LOG_2PI).sum(axis=2)
    else:
        rows = (ad.log(out) * s - out - gammaln(s + 1.0)).sum(axis=2)
    return (rows * mask).sum()


def _masked_loglik_y(model, a: Tensor, y: np.ndarray, mask: np.ndarray) -> Tensor:
    mu = decode_means(model, a)
    y = np.where(mask[..., None] > 0, np.asarray(y, dtype=np.float64), 0.0)
    rows = (ad.square(mu - y) * -0.5 - 0.5 * LOG_2PI).sum(axis=2)
    return (rows * mask).sum()


def _kstep_term(model, fwd: ModelPass, s, y, mask_s, mask_y, cfg: LossConfig, k: int) -> Tensor:
    """Negative masked log-likelihood of the k-step-ahead predictions.

    Predictions exist for targets t = k..T; data and masks are sliced to the
    same window (0-based index k-1 onward).
    """
    pred = kstep_predict(model.ldm_m, fwd.filt, k)
    a_pred = pred.x @ model.ldm_m.C.T
    sl = slice(k - 1, None)
    total = None
    if model.dec_s is not None:
        term = _masked_loglik_s(model, a_pred, s[:, sl], mask_s[:, sl]) * cfg.tau
        total = term
    if model.dec_y is not None:
        term = _masked_loglik_y(model, a_pred, y[:, sl], mask_y[:, sl])
        total = term if total is None else total + term
    return -total


def loss_k_step(model: MrineModel, fwd: ModelPass, s, y, mask_s, mask_y,
                cfg: LossConfig) -> Tensor:
    total = None
    for k in cfg.horizons:
        if k < 1:
            raise ValueError("horizons must be >= 1")
        term = _kstep_term(model, fwd, s, y, mask_s, mask_y, cfg, k)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("horizon set is empty")
    return total


def loss_smooth_recon(model: MrineModel, fwd: ModelPass, s, y, mask_s, mask_y,
                      cfg: LossConfig) -> Tensor:
    """Negative masked log-likelihood of the smoothed embeddings a_{t|T}."""
    if fwd.a_smooth is None:
        raise ValueError("forward pass was run without smoothing")
    total = None
    if model.dec_s is not None:
        total = _masked_loglik_s(model, fwd.a_smooth, s, mask_s) * cfg.tau
    if model.dec_y is not None:
        term = _masked_loglik_y(model, fwd.a_smooth, y, mask_y)
        total = term if total is None else total + term
    return -total


def consecutive_pairs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat row indices (into a (B*T, .) reshape) of consecutive observed steps.

    Consecutive means adjacent in the per-trial observed index set, so a gap
    produces one pair that skips it.  Trials never pair across the boundary.
    """
    B, T = mask.shape
    left, right = [], []
    for b in range(B):
        idx = np.flatnonzero(mask[b] > 0)
        if len(idx) >= 2:
            left.append(b * T + idx[:-1])
            right.append(b * T + idx[1:])
    if not left:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty
    return np.concatenate(left), np.concatenate(right)


def loss_smoothness(model: MrineModel, fwd: ModelPass, mask_s_orig, mask_y_orig,
                    cfg: LossConfig) -> Tensor:
    """KL smoothness penalties on smoothed rates, means, and latent marginals.

    Observation pairs use the original masks (before any training-time
    dropout of samples); the latent term runs over every consecutive pair of
    timesteps on the first x_smooth_dims state dimensions.
    """
    if fwd.a_smooth is None:
        raise ValueError("forward pass was run without smoothing")
    B, T, _ = fwd.a_smooth.shape
    total = ad.as_tensor(0.0)
    if cfg.gamma_s != 0.0 and model.dec_s is not None:
        lam = decode_rates(model, fwd.a_smooth)
        flat = ad.reshape(lam, (B * T, lam.shape[2]))
        i, j = consecutive_pairs(np.asarray(mask_s_orig, dtype=np.float64))
        if len(i):
            p, q = ad.take_rows(flat, i), ad.take_rows(flat, j)
            if model.config.obs_model_s == "gaussian":
                kl = kl_gaussian_unitvar(p, q)
            else:
                kl = kl_poisson(p, q)
            total = total + kl.sum() * cfg.gamma_s
    if cfg.gamma_y != 0.0 and model.dec_y is not None:
        mu = decode_means(model, fwd.a_smooth)
        flat = ad.reshape(mu, (B * T, mu.shape[2]))
        i, j = consecutive_pairs(np.asarray(mask_y_orig, dtype=np.float64))
        if len(i):
            p, q = ad.take_rows(flat, i), ad.take_rows(flat, j)
            total = total + kl_gaussian_unitvar(p, q).sum() * cfg.gamma_y
    if cfg.gamma_x != 0.0 and T >= 2:
        n_x = model.ldm_m.n
        d = cfg.x_smooth_dims if cfg.x_smooth_dims is not None else n_x // 2
        d = min(d, n_x)
        if d > 0:
            means = fwd.smooth.x_smooth[:, :, :d]
            variances = cov_diagonals(fwd.smooth.sigmas_smooth)[:, :, :d]
            kl = kl_gaussian_marginal(
                means[:, :-1, :], variances[:, :-1, :],
                means[:, 1:, :], variances[:, 1:, :],
            )
            total = total + kl.sum() * cfg.gamma_x
    return total


def l2_penalty(model: MrineModel) -> Tensor:
    """Sum of squared MLP weight entries (biases and LDM parameters exempt)."""
    total = ad.as_tensor(0.0)
    for w in model.mlp_weights():
        total = total + ad.square(w).sum()
    return total


def loss_total(model: MrineModel, s, y, mask_s, mask_y, cfg: LossConfig,
               mask_s_orig=None, mask_y_orig=None,
               training: bool = False, rng: np.random.Generator | None = None,
               rho_d: float = 0.0, s_in=None, y_in=None,
               infer_mask_s=None, infer_mask_y=None) -> LossBreakdown:
    """Full objective on one batch.

    mask_s / mask_y gate the likelihood terms (they are the masks after
    training-time sample dropout) and, by default, also drive inference;
    mask_*_orig drive the smoothness pairs and default to the likelihood
    masks.  Zero-imputation training passes pre-filled encoder inputs via
    s_in / y_in together with all-ones inference masks, while the likelihood
    keeps the real masks and the raw targets.
    """
    if mask_s_orig is None:
        mask_s_orig = mask_s
    if mask_y_orig is None:
        mask_y_orig = mask_y
    mask_s = np.asarray(mask_s, dtype=np.float64)
    mask_y = np.asarray(mask_y, dtype=np.float64)
    need_smooth = cfg.enable_l_smooth or cfg.gamma_s != 0.0 or cfg.gamma_y != 0.0 or cfg.gamma_x != 0.0
    fwd = forward(model,
                  s if s_in is None else s_in,
                  y if y_in is None else y_in,
                  mask_s if infer_mask_s is None else infer_mask_s,
                  mask_y if infer_mask_y is None else infer_mask_y,
                  training=training, rng=rng,
                  rho_d=rho_d, need_smooth=need_smooth)
    total = loss_k_step(model, fwd, s, y, mask_s, mask_y, cfg)
    k_step_val = float(total.data)
    smooth_val = 0.0
    if cfg.enable_l_smooth:
        term = loss_smooth_recon(model, fwd, s, y, mask_s, mask_y, cfg)
        smooth_val = float(term.data)
        total = total + term
    sm_val = 0.0
    if need_smooth and (cfg.gamma_s != 0.0 or cfg.gamma_y != 0.0 or cfg.gamma_x != 0.0):
        term = loss_smoothness(model, fwd, mask_s_orig, mask_y_orig, cfg)
        sm_val = float(term.data)
        total = total + term
    l2_val = 0.0
    if cfg.gamma_r != 0.0:
        term = l2_penalty(model) * cfg.gamma_r
        l2_val = float(term.data)
        total = total + term
    return LossBreakdown(total, k_step_val, smooth_val, sm_val, l2_val)
