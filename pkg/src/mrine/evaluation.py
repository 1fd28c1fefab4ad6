"""Evaluation utilities: linear readouts, correlation and AUC metrics,
timescale alignment, inference-time robustness sweeps, and a one-sided
Wilcoxon signed-rank test (exact for small n).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.stats import norm as _norm

from .network import InferenceResult, MrineModel, infer
from .training import time_dropout

RIDGE = 1e-6


@dataclass
class Readout:
    """Affine map fitted by least squares: predict = X @ W + b."""

    weights: np.ndarray   # (d_in, d_out)
    intercept: np.ndarray  # (d_out,)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.intercept


def fit_readout(x: np.ndarray, y: np.ndarray) -> Readout:
    """Ordinary least squares with intercept; a tiny ridge kicks in when the
    design is rank deficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ValueError("fit_readout expects matching 2-D arrays")
    xa = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    sol, _, rank, _ = np.linalg.lstsq(xa, y, rcond=None)
    if rank < xa.shape[1]:
        warnings.warn("rank-deficient readout design; using ridge fallback")
        gram = xa.T @ xa + RIDGE * np.eye(xa.shape[1])
        sol = np.linalg.solve(gram, xa.T @ y)
    return Readout(sol[:-1], sol[-1])


def pearson_cc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two flattened arrays; 0 when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("inputs must have matching sizes")
    if len(a) < 2:
        raise ValueError("need at least two points")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return 0.0
    return float((da * db).sum() / denom)


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    ss_res = float(((y_true - y_pred) ** 2).sum())
    if ss_tot == 0.0:
        return 0.0 if ss_res > 0 else 1.0
    return 1.0 - ss_res / ss_tot


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outscores a random negative (ties half).

    Computed from midranks, which equals exhaustive pair counting.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = _midranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def spike_auc(rates: np.ndarray, counts: np.ndarray) -> float:
    """Mean per-channel AUC for detecting count > 0 from the decoded rate.

    Channels that are all-spike or all-silent have no defined AUC and are
    skipped.
    """
    rates = np.asarray(rates, dtype=np.float64)
    counts = np.asarray(counts)
    if rates.shape != counts.shape:
        raise ValueError("rates and counts must align")
    aucs = []
    for ch in range(rates.shape[1]):
        labels = counts[:, ch] > 0
        if labels.all() or not labels.any():
            continue
        aucs.append(roc_auc(rates[:, ch], labels))
    if not aucs:
        raise ValueError("no channel had both spike and no-spike bins")
    return float(np.mean(aucs))


def align_timescales(x: np.ndarray, ratio: int, method: str = "downsample") -> np.ndarray:
    """Map a base-rate sequence (T, d) onto a ratio-times-slower grid.

    downsample keeps rows 0, ratio, 2*ratio, ...; avg_pool averages each full
    non-overlapping window of length ratio (trailing partial windows drop).
    """
    x = np.asarray(x, dtype=np.float64)
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    if method == "downsample":
        return x[::ratio]
    if method == "avg_pool":
        n = (len(x) // ratio) * ratio
        if n == 0:
            raise ValueError("sequence shorter than one pooling window")
        return x[:n].reshape(-1, ratio, *x.shape[1:]).mean(axis=1)
    raise ValueError(f"unknown alignment method: {method}")


# ---------------------------------------------------------------------------
# reconstruction protocols


def latent_recon_cc(true_trials: list[np.ndarray], pred_trials: list[np.ndarray]) -> float:
    """Mean over trials and dimensions of the per-trial per-dimension CC."""
    if len(true_trials) != len(pred_trials) or not true_trials:
        raise ValueError("trial lists must be nonempty and aligned")
    ccs = []
    for xt, xp in zip(true_trials, pred_trials):
        for d in range(xt.shape[1]):
            ccs.append(pearson_cc(xt[:, d], xp[:, d]))
    return float(np.mean(ccs))


def behavior_cc(true_rows: np.ndarray, pred_rows: np.ndarray) -> float:
    """Mean over dimensions of the CC along concatenated time."""
    true_rows = np.asarray(true_rows, dtype=np.float64)
    pred_rows = np.asarray(pred_rows, dtype=np.float64)
    if true_rows.shape != pred_rows.shape:
        raise ValueError("shapes must match")
    return float(np.mean([pearson_cc(true_rows[:, d], pred_rows[:, d])
                          for d in range(true_rows.shape[1])]))


def _infer_latents(model: MrineModel, trials: list[dict], mode: str,
                   drop_s: float = 0.0, drop_y: float = 0.0,
                   rng: np.random.Generator | None = None,
                   zero_impute: bool = False) -> list[np.ndarray]:
    """Latent trajectories per trial, optionally after random sample dropping.

    With zero_impute the missing steps are filled with zeros and the model is
    told every step is observed, mirroring the imputation training policy.
    """
    from .network import sanitize

    out = []
    for tr in trials:
        ms, my = tr["mask_s"], tr["mask_y"]
        if drop_s > 0:
            ms = time_dropout(ms[None, :], drop_s, rng)[0]
        if drop_y > 0:
            my = time_dropout(my[None, :], drop_y, rng)[0]
        s, y = tr["s"], tr["y"]
        if zero_impute:
            s, y = sanitize(s, ms), sanitize(y, my)
            ms, my = np.ones_like(ms), np.ones_like(my)
        res = infer(model, s[None], y[None], ms[None, :], my[None, :], mode=mode)
        out.append(res.x[0])
    return out


def latent_reconstruction_score(model: MrineModel, train_trials: list[dict],
                                test_trials: list[dict], mode: str = "smooth",
                                drop_s: float = 0.0, drop_y: float = 0.0,
                                seed: int = 0, zero_impute: bool = False) -> float:
    """Fit a linear readout from inferred latents to the true latents on the
    training trials, then report the mean per-trial per-dimension CC on the
    test trials.  Optional sample dropping applies at inference on both
    splits (readout and test see the same condition)."""
    rng = np.random.default_rng(seed)
    lat_train = _infer_latents(model, train_trials, mode, drop_s, drop_y, rng,
                               zero_impute)
    lat_test = _infer_latents(model, test_trials, mode, drop_s, drop_y, rng,
                              zero_impute)
    x_train = np.concatenate(lat_train, axis=0)
    z_train = np.concatenate([tr["behavior"] for tr in train_trials], axis=0)
    readout = fit_readout(x_train, z_train)
    preds = [readout.predict(lx) for lx in lat_test]
    return latent_recon_cc([tr["behavior"] for tr in test_trials], preds)


@dataclass
class SweepResult:
    drop_s: list
    drop_y: list
    scores: np.ndarray   # (len(drop_s), len(drop_y))


def robustness_sweep(model: MrineModel, train_trials: list[dict],
                     test_trials: list[dict], drop_s_grid, drop_y_grid,
                     mode: str = "filter", seed: int = 0,
                     zero_impute: bool = False) -> SweepResult:
    """Latent reconstruction score under a grid of inference-time sample-drop
    probabilities.  Dropping happens only at inference; the model is fixed."""
    scores = np.zeros((len(drop_s_grid), len(drop_y_grid)))
    for (i, ps), (j, py) in product(enumerate(drop_s_grid), enumerate(drop_y_grid)):
        scores[i, j] = latent_reconstruction_score(
            model, train_trials, test_trials, mode=mode,
            drop_s=ps, drop_y=py, seed=seed, zero_impute=zero_impute)
    return SweepResult(list(drop_s_grid), list(drop_y_grid), scores)


# ---------------------------------------------------------------------------
# paired significance test


def wilcoxon_one_sided(diffs: np.ndarray) -> float:
    """One-sided Wilcoxon signed-rank p-value for the alternative median > 0.

    Zero differences are discarded.  With n <= 12 the null distribution of
    W+ is enumerated exactly over all sign assignments (ties get midranks);
    beyond that a normal approximation with tie correction is used.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    d = d[d != 0.0]
    n = len(d)
    if n < 5:
        raise ValueError("need at least 5 nonzero differences")
    ranks = _midranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    if n <= 12:
        count = 0
        total = 1 << n
        for bits in range(total):
            w = 0.0
            for i in range(n):
                if bits >> i & 1:
                    w += ranks[i]
            if w >= w_pos - 1e-12:
                count += 1
        return count / total
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = (w_pos - mean) / np.sqrt(var)
    return float(_norm.sf(z))
