"""Multiscale fusion network.

Two per-timestep MLP encoders map the discrete stream s and the continuous
stream y into embeddings.  Each embedding drives a modality linear dynamical
model whose masked Kalman filter carries information across the gaps left by
missing samples, so the filtered embeddings a^s_{t|t} and a^y_{t|t} exist at
every timestep.  A fusion MLP merges them into a_t, which a final multiscale
LDM filters (and optionally smooths) into the shared latent state x_t.  Two
decoder MLPs map embeddings back to Poisson rates and Gaussian means.

A single-scale variant keeps one encoder, the multiscale LDM, and one
decoder; it has no fusion stage and no modality LDMs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ldm import (FilterResult, LdmParams, SmoothResult, emit_embedding,
                  init_ldm_params, kalman_filter, kalman_smooth)

RATE_CLAMP = 10.0  # pre-rate activations clamp to [-10, 10] before exp


@dataclass
class Mlp:
    """Plain MLP with tanh hidden activations and a linear output layer."""

    weights: list  # [Tensor (d_in, d_out)] per layer
    biases: list   # [Tensor (d_out,)]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.as_tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = ad.tanh(h)
        return h

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out


def init_mlp(d_in: int, d_out: int, hidden: tuple[int, int],
             rng: np.random.Generator) -> Mlp:
    """Xavier-normal weights, std sqrt(2 / (fan_in + fan_out)); zero biases.

    hidden is (n_layers, width): the number of hidden layers and their width.
    """
    n_hidden, width = hidden
    dims = [d_in] + [width] * n_hidden + [d_out]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(Tensor(std * rng.standard_normal((fan_in, fan_out)),
                              requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(weights, biases)


def apply_dropout(x: Tensor, rho: float, rng: np.random.Generator,
                  training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rho); identity at inference."""
    if not training or rho <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rho) / (1.0 - rho)
    return x * keep


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shape.  MLP sizes are (hidden_layers, width) pairs."""

    n_s: int
    n_y: int
    n_a: int = 32
    n_x: int = 32
    phi_s: tuple = (3, 128)
    phi_y: tuple = (3, 128)
    phi_m: tuple = (1, 128)
    theta_s: tuple = (3, 128)
    theta_y: tuple = (3, 128)
    single_scale: str | None = None   # None, "poisson", or "gaussian"
    obs_model_s: str = "poisson"      # "poisson" or "gaussian" (ablation)
    learn_initial_state: bool = False


@dataclass
class MrineModel:
    config: ModelConfig
    ldm_m: LdmParams                 # multiscale LDM: state n_x, obs n_a
    enc_s: Mlp | None = None
    enc_y: Mlp | None = None
    ldm_s: LdmParams | None = None   # modality LDMs: state n_a, obs n_a
    ldm_y: LdmParams | None = None
    fusion: Mlp | None = None
    dec_s: Mlp | None = None
    dec_y: Mlp | None = None

    @property
    def single_scale(self) -> str | None:
        return self.config.single_scale

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        parts = [("enc_s", self.enc_s), ("enc_y", self.enc_y), ("fusion", self.fusion),
                 ("dec_s", self.dec_s), ("dec_y", self.dec_y)]
        for prefix, mlp in parts:
            if mlp is not None:
                out.extend((f"{prefix}.{n}", t) for n, t in mlp.parameters())
        for prefix, ldm in [("ldm_s", self.ldm_s), ("ldm_y", self.ldm_y),
                            ("ldm_m", self.ldm_m)]:
            if ldm is not None:
                out.extend((f"{prefix}.{n}", t) for n, t in ldm.parameters())
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.parameters() if t.requires_grad]

    def mlp_weights(self) -> list[Tensor]:
        """Weight matrices of every MLP; biases and LDM parameters excluded."""
        out = []
        for mlp in (self.enc_s, self.enc_y, self.fusion, self.dec_s, self.dec_y):
            if mlp is not None:
                out.extend(mlp.weights)
        return out


def build_model(config: ModelConfig, rng: np.random.Generator) -> MrineModel:
    n_s, n_y, n_a, n_x = config.n_s, config.n_y, config.n_a, config.n_x
    if config.single_scale not in (None, "poisson", "gaussian"):
        raise ValueError(f"unknown single_scale mode: {config.single_scale}")
    lis = config.learn_initial_state
    ldm_m = init_ldm_params(n_x, n_a, rng, lis)
    if config.single_scale == "poisson":
        return MrineModel(
            config=config, ldm_m=ldm_m,
            enc_s=init_mlp(n_s, n_a, config.phi_s, rng),
            dec_s=init_mlp(n_a, n_s, config.theta_s, rng),
        )
    if config.single_scale == "gaussian":
        return MrineModel(
            config=config, ldm_m=ldm_m,
            enc_y=init_mlp(n_y, n_a, config.phi_y, rng),
            dec_y=init_mlp(n_a, n_y, config.theta_y, rng),
        )
    return MrineModel(
        config=config, ldm_m=ldm_m,
        enc_s=init_mlp(n_s, n_a, config.phi_s, rng),
        enc_y=init_mlp(n_y, n_a, config.phi_y, rng),
        ldm_s=init_ldm_params(n_a, n_a, rng, lis),
        ldm_y=init_ldm_params(n_a, n_a, rng, lis),
        fusion=init_mlp(2 * n_a, n_a, config.phi_m, rng),
        dec_s=init_mlp(n_a, n_s, config.theta_s, rng),
        dec_y=init_mlp(n_a, n_y, config.theta_y, rng),
    )


def sanitize(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out masked rows so NaN placeholders never enter the graph."""
    return np.where(mask[..., None] > 0, values, 0.0)


def zero_impute(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fill masked rows with zeros and report every step as observed.

    The returned mask is for inference only; losses must keep the original.
    """
    return sanitize(values, mask), np.ones_like(mask)


@dataclass
class ModelPass:
    """Everything one forward pass produces that the losses consume."""

    a_enc: Tensor                     # (B, T, n_a) encoder output
    filt: FilterResult                # multiscale LDM filter
    smooth: SmoothResult | None
    a_filt: Tensor                    # C_m x_{t|t}
    a_smooth: Tensor | None
    mod_s: FilterResult | None = None
    mod_y: FilterResult | None = None


def encode(model: MrineModel, s: np.ndarray, y: np.ndarray,
           mask_s: np.ndarray, mask_y: np.ndarray,
           training: bool = False, rng: np.random.Generator | None = None,
           rho_d: float = 0.0) -> tuple[Tensor, dict]:
    """Produce the fused embedding sequence a (B, T, n_a).

    Regular dropout (rate rho_d) applies to the raw encoder inputs and to the
    final encoder output, and only while training.  Masked rows are zeroed
    before encoding; the modality Kalman filters then skip their updates, so
    the junk value never influences any estimate.
    """
    if training and rho_d > 0.0 and rng is None:
        raise ValueError("training-time dropout needs an rng")
    mask_s = np.asarray(mask_s, dtype=np.float64)
    mask_y = np.asarray(mask_y, dtype=np.float64)
    if mask_s.sum() == 0 and mask_y.sum() == 0:
        raise ValueError("both modalities are missing at every timestep")
    aux: dict = {}

    if model.single_scale == "poisson":
        h = apply_dropout(ad.as_tensor(sanitize(s, mask_s)), rho_d, rng, training)
        a = model.enc_s(h)
        return apply_dropout(a, rho_d, rng, training), aux
    if model.single_scale == "gaussian":
        h = apply_dropout(ad.as_tensor(sanitize(y, mask_y)), rho_d, rng, training)
        a = model.enc_y(h)
        return apply_dropout(a, rho_d, rng, training), aux

    h_s = model.enc_s(apply_dropout(ad.as_tensor(sanitize(s, mask_s)), rho_d, rng, training))
    h_y = model.enc_y(apply_dropout(ad.as_tensor(sanitize(y, mask_y)), rho_d, rng, training))
    filt_s = kalman_filter(model.ldm_s, h_s, mask_s)
    filt_y = kalman_filter(model.ldm_y, h_y, mask_y)
    a_s = emit_embedding(model.ldm_s, filt_s.x_filt)
    a_y = emit_embedding(model.ldm_y, filt_y.x_filt)
    aux["mod_s"], aux["mod_y"] = filt_s, filt_y
    a = model.fusion(ad.concat([a_s, a_y], axis=2))
    return apply_dropout(a, rho_d, rng, training), aux


def forward(model: MrineModel, s: np.ndarray, y: np.ndarray,
            mask_s: np.ndarray, mask_y: np.ndarray,
            training: bool = False, rng: np.random.Generator | None = None,
            rho_d: float = 0.0, need_smooth: bool = True) -> ModelPass:
    """Encoder plus multiscale LDM filter (and smoother when requested)."""
    a_enc, aux = encode(model, s, y, mask_s, mask_y, training, rng, rho_d)
    B, T, _ = a_enc.shape
    filt = kalman_filter(model.ldm_m, a_enc, np.ones((B, T)))
    a_filt = emit_embedding(model.ldm_m, filt.x_filt)
    smooth = a_smooth = None
    if need_smooth:
        smooth = kalman_smooth(model.ldm_m, filt)
        a_smooth = emit_embedding(model.ldm_m, smooth.x_smooth)
    return ModelPass(a_enc, filt, smooth, a_filt, a_smooth,
                     aux.get("mod_s"), aux.get("mod_y"))


def decode_rates(model: MrineModel, a: Tensor) -> Tensor:
    """Poisson rates exp(clamp(pre, +-10)); under the Gaussian-observation
    ablation the head output is the mean directly (no link)."""
    if model.dec_s is None:
        raise ValueError("model has no discrete-stream decoder")
    pre = model.dec_s(a)
    if model.config.obs_model_s == "gaussian":
        return pre
    return ad.exp(ad.clip(pre, -RATE_CLAMP, RATE_CLAMP))


def decode_means(model: MrineModel, a: Tensor) -> Tensor:
    if model.dec_y is None:
        raise ValueError("model has no continuous-stream decoder")
    return model.dec_y(a)


@dataclass
class InferenceResult:
    x: np.ndarray                  # (B, T', n_x) latent states for the mode
    a: np.ndarray                  # (B, T', n_a) embeddings C x
    rates_s: np.ndarray | None
    means_y: np.ndarray | None
    mode: str
    offset: int                    # first target time (1-based); k for predict


def infer(model: MrineModel, s: np.ndarray, y: np.ndarray,
          mask_s: np.ndarray, mask_y: np.ndarray,
          mode: str = "filter", k: int | None = None) -> InferenceResult:
    """Run inference without gradient tracking.

    mode "filter" gives x_{t|t}, "smooth" gives x_{t|T}, "predict" gives
    x_{t|t-k} for t = k..T (so the output is k rows shorter than T plus one,
    with offset recording the first target time).
    """
    from .ldm import kstep_predict  # local import keeps module load light

    if mode not in ("filter", "smooth", "predict"):
        raise ValueError(f"unknown inference mode: {mode}")
    if mode == "predict":
        if not k or k < 1:
            raise ValueError("predict mode requires k >= 1")
    fwd = forward(model, s, y, mask_s, mask_y, need_smooth=(mode == "smooth"))
    if mode == "filter":
        x, a, offset = fwd.filt.x_filt, fwd.a_filt, 1
    elif mode == "smooth":
        x, a, offset = fwd.smooth.x_smooth, fwd.a_smooth, 1
    else:
        pred = kstep_predict(model.ldm_m, fwd.filt, k)
        x = pred.x
        a = emit_embedding(model.ldm_m, x)
        offset = pred.offset
    rates = decode_rates(model, a).data if model.dec_s is not None else None
    means = decode_means(model, a).data if model.dec_y is not None else None
    return InferenceResult(x.data, a.data, rates, means, mode, offset)
