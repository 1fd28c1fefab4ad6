"""Differentiable linear dynamical model: masked Kalman filter, RTS smoother,
and k-step-ahead prediction.

State convention: states are kept as (B, 1, n) row matrices and covariances
as (B, n, n), so every recursion is one batched matmul.  Time indexing is
1-based in the math: the filter consumes observations a_1..a_T and returns
x_{t|t} for t = 1..T, with x_{0|0} = x0 and Sigma_{0|0} = Sigma0 as the prior.
A timestep whose mask is 0 performs the time update only, so a fully masked
sequence yields x_{t|t} = A^t x0.

Noise covariances are diagonal with a softplus link plus a small ridge,
W = diag(softplus(w_raw)) + EPS_PD * I, which keeps every innovation
covariance positive definite by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_PD = 1e-4


def softplus_inv(y: float) -> float:
    """Inverse of log(1 + exp(x)); y must be positive."""
    if y <= 0:
        raise ValueError("softplus_inv requires y > 0")
    return float(y + np.log1p(-np.exp(-y)))


@dataclass
class LdmParams:
    """Parameters of one linear dynamical model with diagonal noise."""

    A: Tensor          # (n, n) state transition
    C: Tensor          # (m, n) emission
    w_raw: Tensor      # (n,) state noise, diagonal via softplus
    r_raw: Tensor      # (m,) observation noise, diagonal via softplus
    x0: Tensor         # (n,) initial state mean
    sigma0_raw: Tensor  # (n,) initial covariance, diagonal via softplus

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("A", self.A), ("C", self.C), ("w_raw", self.w_raw),
            ("r_raw", self.r_raw), ("x0", self.x0), ("sigma0_raw", self.sigma0_raw),
        ]

    def state_noise(self) -> Tensor:
        """W as a dense (n, n) diagonal tensor."""
        v = ad.softplus(self.w_raw)
        return (ad.reshape(v, (self.n, 1)) + EPS_PD) * np.eye(self.n)

    def obs_noise(self) -> Tensor:
        v = ad.softplus(self.r_raw)
        return (ad.reshape(v, (self.m, 1)) + EPS_PD) * np.eye(self.m)

    def initial_cov(self) -> Tensor:
        v = ad.softplus(self.sigma0_raw)
        return (ad.reshape(v, (self.n, 1)) + EPS_PD) * np.eye(self.n)


def init_ldm_params(n: int, m: int, rng: np.random.Generator,
                    learn_initial_state: bool = False) -> LdmParams:
    """Near-identity stable dynamics, Xavier emission, noise diagonals at 0.1.

    A starts at 0.95 I plus entrywise Normal(0, 0.01^2) jitter; Sigma0 starts
    at the identity and x0 at zero (trainable only when requested).
    """
    a = 0.95 * np.eye(n) + 0.01 * rng.standard_normal((n, n))
    c = np.sqrt(2.0 / (m + n)) * rng.standard_normal((m, n))
    w = np.full(n, softplus_inv(0.1 - EPS_PD))
    r = np.full(m, softplus_inv(0.1 - EPS_PD))
    x0 = np.zeros(n)
    s0 = np.full(n, softplus_inv(1.0 - EPS_PD))
    return LdmParams(
        A=Tensor(a, requires_grad=True),
        C=Tensor(c, requires_grad=True),
        w_raw=Tensor(w, requires_grad=True),
        r_raw=Tensor(r, requires_grad=True),
        x0=Tensor(x0, requires_grad=learn_initial_state),
        sigma0_raw=Tensor(s0, requires_grad=learn_initial_state),
    )


@dataclass
class FilterResult:
    """Per-step filtering quantities; lists hold one tensor per timestep.

    xs_pred[t] is x_{t+1|t} as (B, 1, n); sigmas_pred[t] is Sigma_{t+1|t} as
    (B, n, n); xs_filt / sigmas_filt are the posterior analogues.  x_filt is
    the (B, T, n) concatenation of xs_filt for convenience.
    """

    xs_pred: list
    sigmas_pred: list
    xs_filt: list
    sigmas_filt: list
    x_filt: Tensor
    mask: np.ndarray
    prior_mean: Tensor = None      # x0 broadcast to (B, 1, n)
    prior_cov: Tensor = None       # Sigma0 broadcast to (B, n, n)

    @property
    def T(self) -> int:
        return len(self.xs_filt)


@dataclass
class SmoothResult:
    xs_smooth: list
    sigmas_smooth: list
    x_smooth: Tensor              # (B, T, n)

    @property
    def T(self) -> int:
        return len(self.xs_smooth)


def _symmetrize(s: Tensor) -> Tensor:
    return (s + s.T) * 0.5


def kalman_filter(params: LdmParams, obs: Tensor | np.ndarray, mask: np.ndarray) -> FilterResult:
    """Run the masked Kalman filter over obs (B, T, m) with mask (B, T).

    Observation values at masked steps never reach the state estimate: the
    innovation is multiplied by the 0/1 mask before entering the update, so
    any finite value there leaves every output bit-identical.  Steps where
    the whole batch is masked skip the measurement update entirely.
    """
    obs = ad.as_tensor(obs)
    if obs.ndim != 3:
        raise ValueError(f"obs must be (B, T, m), got {obs.shape}")
    B, T, m = obs.shape
    if m != params.m:
        raise ValueError(f"obs has {m} channels, emission expects {params.m}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (B, T):
        raise ValueError(f"mask must be (B, T) = {(B, T)}, got {mask.shape}")
    if not np.isfinite(obs.data).all():
        raise ValueError("obs contains non-finite values; sanitize masked rows first")

    n = params.n
    A_T = params.A.T
    C_T = params.C.T
    W = params.state_noise()
    R = params.obs_noise()

    x_prev = ad.reshape(params.x0, (1, 1, n)) + np.zeros((B, 1, n))
    s_prev = params.initial_cov() + np.zeros((B, n, n))
    prior_mean, prior_cov = x_prev, s_prev

    xs_pred, sigmas_pred, xs_filt, sigmas_filt = [], [], [], []
    for t in range(T):
        x_pred = x_prev @ A_T
        s_pred = params.A @ s_prev @ A_T + W
        mcol = mask[:, t]
        if not mcol.any():
            x_filt, s_filt = x_pred, s_pred
        else:
            m_t = mcol.reshape(B, 1, 1)
            gain_m = s_pred @ C_T                       # Sigma_pred C^T, (B, n, m)
            s_innov = params.C @ gain_m + R             # (B, m, m)
            k_t = ad.linear_solve(s_innov, gain_m.T)    # K^T, (B, m, n)
            innov = obs[:, t:t + 1, :] - x_pred @ C_T   # (B, 1, m)
            if mcol.all():
                x_filt = x_pred + innov @ k_t
                s_filt = _symmetrize(s_pred - gain_m @ k_t)
            else:
                x_filt = x_pred + (innov * m_t) @ k_t
                s_filt = _symmetrize(s_pred - (gain_m @ k_t) * m_t)
        xs_pred.append(x_pred)
        sigmas_pred.append(s_pred)
        xs_filt.append(x_filt)
        sigmas_filt.append(s_filt)
        x_prev, s_prev = x_filt, s_filt

    x_filt_seq = ad.concat(xs_filt, axis=1)
    return FilterResult(xs_pred, sigmas_pred, xs_filt, sigmas_filt, x_filt_seq,
                        mask, prior_mean, prior_cov)


def kalman_smooth(params: LdmParams, filt: FilterResult) -> SmoothResult:
    """Rauch-Tung-Striebel backward pass on a FilterResult."""
    T = filt.T
    xs = [None] * T
    ss = [None] * T
    xs[-1] = filt.xs_filt[-1]
    ss[-1] = filt.sigmas_filt[-1]
    for t in range(T - 2, -1, -1):
        s_pred_next = filt.sigmas_pred[t + 1]
        # G^T = Sigma_pred^{-1} A Sigma_filt, valid since Sigma_pred is symmetric
        g_t = ad.linear_solve(s_pred_next, params.A @ filt.sigmas_filt[t])
        xs[t] = filt.xs_filt[t] + (xs[t + 1] - filt.xs_pred[t + 1]) @ g_t
        ss[t] = _symmetrize(
            filt.sigmas_filt[t] + g_t.T @ (ss[t + 1] - s_pred_next) @ g_t
        )
    return SmoothResult(xs, ss, ad.concat(xs, axis=1))


@dataclass
class KStepResult:
    """k-step-ahead predictions; row i targets time offset + i (1-based)."""

    x: Tensor          # (B, T - k + 1, n)
    offset: int        # first predicted time, equals k
    k: int


def kstep_predict(params: LdmParams, filt: FilterResult, k: int) -> KStepResult:
    """Predict x_{t|t-k} = A^k x_{t-k|t-k} for t = k..T.

    The prior x_{0|0} supplies the first prediction, so the output has
    T - k + 1 rows.  k larger than the sequence yields an empty result with
    a warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    T = filt.T
    if k > T:
        warnings.warn(f"k={k} exceeds sequence length T={T}; empty prediction")
        B, _, n = filt.prior_mean.shape
        return KStepResult(Tensor(np.zeros((B, 0, n))), k, k)
    a_k = params.A
    for _ in range(k - 1):
        a_k = a_k @ params.A
    sources = ad.concat([filt.prior_mean] + filt.xs_filt[:T - k], axis=1)
    return KStepResult(sources @ a_k.T, k, k)


def emit_embedding(params: LdmParams, x: Tensor) -> Tensor:
    """Map states (..., n) through the emission: a = C x."""
    return x @ params.C.T


def cov_diagonals(sigmas: list) -> Tensor:
    """Stack per-step (B, n, n) covariances into their (B, T, n) diagonals."""
    n = sigmas[0].shape[-1]
    eye = np.eye(n)
    rows = [ad.reshape((s * eye).sum(axis=-1), (s.shape[0], 1, n)) for s in sigmas]
    return ad.concat(rows, axis=1)
