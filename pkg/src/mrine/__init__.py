"""MRINE: multiscale real-time inference over a Poisson and a Gaussian
time-series with different sampling rates and missing samples."""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor
from .bundleio import (DatasetBundle, fold_split, load_bundle,
                       load_checkpoint, save_bundle, save_checkpoint)
from .evaluation import (latent_reconstruction_score, pearson_cc,
                         robustness_sweep, roc_auc, spike_auc,
                         wilcoxon_one_sided)
from .ldm import (FilterResult, KStepResult, LdmParams, SmoothResult,
                  emit_embedding, init_ldm_params, kalman_filter,
                  kalman_smooth, kstep_predict)
from .lorenz import LorenzConfig, ObsConfig, make_trials, simulate_latents
from .losses import (LossBreakdown, LossConfig, compute_tau, gaussian_loglik,
                     kl_gaussian_marginal, kl_gaussian_unitvar, kl_poisson,
                     loss_k_step, loss_smooth_recon, loss_smoothness,
                     loss_total, poisson_loglik)
from .network import (InferenceResult, Mlp, ModelConfig, MrineModel,
                      build_model, decode_means, decode_rates, infer)
from .training import (TrainConfig, TrainingDiverged, adam_step, lr_at,
                       time_dropout, train)

__all__ = [
    "Graph", "Tensor", "LdmParams", "FilterResult", "SmoothResult",
    "KStepResult", "kalman_filter", "kalman_smooth", "kstep_predict",
    "emit_embedding", "init_ldm_params", "LossConfig", "LossBreakdown",
    "poisson_loglik", "gaussian_loglik", "kl_poisson", "kl_gaussian_unitvar",
    "kl_gaussian_marginal", "compute_tau", "loss_k_step", "loss_smooth_recon",
    "loss_smoothness", "loss_total", "ModelConfig", "MrineModel", "Mlp",
    "build_model", "infer", "InferenceResult", "decode_rates", "decode_means",
    "TrainConfig", "TrainingDiverged", "train", "adam_step", "lr_at",
    "time_dropout", "LorenzConfig", "ObsConfig", "simulate_latents",
    "make_trials", "DatasetBundle", "save_bundle", "load_bundle",
    "fold_split", "save_checkpoint", "load_checkpoint", "pearson_cc",
    "roc_auc", "spike_auc", "wilcoxon_one_sided", "robustness_sweep",
    "latent_reconstruction_score",
]
