"""Command line interface.

Subcommands: simulate (synthetic Lorenz bundles), train, infer, decode,
eval-recon, and sweep.  Configs are JSON files validated strictly; every run
writes a reproducibility record (seed, config hash, code version) next to
its outputs.  Usage and config errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .bundleio import (DatasetBundle, canonical_json, config_hash, fold_split,
                       load_bundle, load_checkpoint, save_bundle,
                       save_checkpoint)
from .evaluation import (Readout, align_timescales, behavior_cc, fit_readout,
                         latent_reconstruction_score, pearson_cc, r_squared,
                         robustness_sweep, spike_auc)
from .lorenz import LorenzConfig, ObsConfig, make_trials, simulate_latents
from .losses import compute_tau
from .network import build_model, infer, sanitize
from .presets import ConfigError, resolve_config
from .training import TrainingDiverged, train

_SIM_KEYS = {
    "name", "n_trials", "n_steps", "dt", "noise_var", "burn_in",
    "scale_noise_by_dt", "seed", "n_s", "n_y", "gaussian_noise_var",
    "base_rate_hz", "bin_s", "obs_seed", "timescale_ratio",
}


def _fail(msg: str) -> "NoReturn":
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(2)


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        _fail(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        _fail(f"invalid JSON in {path}: {err}")


def _write_run_record(out_dir: str, seed, config) -> None:
    record = {
        "code_version": __version__,
        "seed": seed,
        "config_hash": config_hash(config),
        "config": config,
    }
    with open(os.path.join(out_dir, "run_record.json"), "w") as f:
        json.dump(record, f, indent=2)
        f.write("\n")


def _parse_fold(text: str | None, n_trials: int):
    if text is None:
        return None
    try:
        k, n = text.split("/")
        k, n = int(k), int(n)
    except ValueError:
        _fail(f"--fold wants K/N, got {text!r}")
    if not 1 <= k <= n:
        _fail(f"fold {k} outside 1..{n}")
    if n > n_trials:
        _fail(f"{n} folds but only {n_trials} trials")
    return k, n


def _split(bundle: DatasetBundle, fold):
    if fold is None:
        return bundle.trials, []
    return fold_split(bundle.trials, fold[0], fold[1])


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    if args.system != "lorenz":
        _fail(f"unknown system: {args.system}")
    cfg = _load_json(args.config) if args.config else {}
    unknown = set(cfg) - _SIM_KEYS
    if unknown:
        _fail(f"unknown simulate config keys: {sorted(unknown)}")
    lorenz_cfg = LorenzConfig(
        n_trials=int(cfg.get("n_trials", 750)),
        n_steps=int(cfg.get("n_steps", 200)),
        dt=float(cfg.get("dt", 0.006)),
        noise_var=float(cfg.get("noise_var", 0.01)),
        burn_in=int(cfg.get("burn_in", 500)),
        scale_noise_by_dt=bool(cfg.get("scale_noise_by_dt", False)),
        seed=int(cfg.get("seed", 0)),
    )
    obs_cfg = ObsConfig(
        n_s=int(cfg.get("n_s", 10)),
        n_y=int(cfg.get("n_y", 20)),
        gaussian_noise_var=float(cfg.get("gaussian_noise_var", 5.0)),
        base_rate_hz=float(cfg.get("base_rate_hz", 5.0)),
        bin_s=float(cfg.get("bin_s", 0.005)),
        seed=int(cfg.get("obs_seed", cfg.get("seed", 0) + 1)),
    )
    ratio = int(cfg.get("timescale_ratio", 1))
    sim = simulate_latents(lorenz_cfg)
    trials = make_trials(sim, obs_cfg, ratio)
    bundle = DatasetBundle(
        name=str(cfg.get("name", "lorenz")),
        trials=trials, timescale_ratio=ratio,
        seeds={"latents": lorenz_cfg.seed, "observations": obs_cfg.seed},
    )
    os.makedirs(args.out, exist_ok=True)
    save_bundle(bundle, args.out)
    _write_run_record(args.out, lorenz_cfg.seed, cfg)
    print(f"wrote {len(trials)} trials to {args.out}")
    return 0


def cmd_train(args) -> int:
    bundle = load_bundle(args.data)
    fold = _parse_fold(args.fold, len(bundle.trials))
    train_trials, val_trials = _split(bundle, fold)
    raw = _load_json(args.config) if args.config else {}
    if args.preset:
        raw = {"preset": args.preset, "variant": args.variant, **raw}
    try:
        resolved = resolve_config(raw, bundle.n_s, bundle.n_y)
    except ConfigError as err:
        _fail(str(err))
    model_cfg, train_cfg, loss_cfg = resolved["model"], resolved["train"], resolved["loss"]
    if resolved["zero_impute"]:
        from dataclasses import replace
        train_cfg = replace(train_cfg, zero_impute=True)
    if "tau" not in resolved["echo"]:
        if model_cfg.obs_model_s == "gaussian":
            tau = 1.0   # both streams share the observation model, no rescale
        else:
            tau = compute_tau(train_trials)
        from dataclasses import replace
        loss_cfg = replace(loss_cfg, tau=tau)
    rng = np.random.default_rng(train_cfg.seed)
    model = build_model(model_cfg, rng)
    try:
        log = train(model, train_trials, train_cfg, loss_cfg,
                    val_trials=val_trials or None, verbose=args.verbose)
        diverged = None
    except TrainingDiverged as err:
        log, diverged = err.log, str(err)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    save_checkpoint(ckpt_path, model, train_cfg, loss_cfg, loss_cfg.tau,
                    epochs_trained=len([e for e in log if e["epoch"] > 0]),
                    config_echo=raw,
                    extra={"fold": args.fold, "data": os.path.abspath(args.data)})
    with open(os.path.join(args.out, "train_log.json"), "w") as f:
        json.dump({"log": log, "diverged": diverged}, f, indent=2)
        f.write("\n")
    _write_run_record(args.out, train_cfg.seed, raw)
    if diverged:
        print(f"training diverged: {diverged}", file=sys.stderr)
        return 1
    print(f"wrote checkpoint to {ckpt_path} (tau={loss_cfg.tau:.6g})")
    return 0


def _parse_mode(text: str):
    if text in ("filter", "smooth"):
        return text, None
    if text.startswith("predict:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError:
            _fail(f"bad predict horizon in {text!r}")
        if k < 1:
            _fail("predict horizon must be >= 1")
        return "predict", k
    _fail(f"unknown mode: {text!r} (want filter, smooth, or predict:K)")


def cmd_infer(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    bundle = load_bundle(args.data)
    fold = _parse_fold(args.fold, len(bundle.trials))
    trials = _split(bundle, fold)[1] if (fold and args.split == "test") else (
        _split(bundle, fold)[0] if fold else bundle.trials)
    mode, k = _parse_mode(args.mode)
    zero_impute = bool(meta["train_config"].get("zero_impute", False))
    rng = np.random.default_rng(args.drop_seed)
    from .training import time_dropout

    os.makedirs(args.out, exist_ok=True)
    lat_rows, emb_rows = [], []
    for i, tr in enumerate(trials):
        ms, my = tr["mask_s"], tr["mask_y"]
        if args.drop_s > 0:
            ms = time_dropout(ms[None, :], args.drop_s, rng)[0]
        if args.drop_y > 0:
            my = time_dropout(my[None, :], args.drop_y, rng)[0]
        s, y = tr["s"], tr["y"]
        if zero_impute:
            s, y = sanitize(s, ms), sanitize(y, my)
            ms, my = np.ones_like(ms), np.ones_like(my)
        res = infer(model, s[None], y[None], ms[None, :], my[None, :],
                    mode=mode, k=k)
        for j in range(res.x.shape[1]):
            t_target = res.offset + j
            lat_rows.append([i, t_target] + list(res.x[0, j]))
            emb_rows.append([i, t_target] + list(res.a[0, j]))
    n_x = len(lat_rows[0]) - 2
    n_a = len(emb_rows[0]) - 2

    def _write(path, rows, prefix, n_cols):
        header = "trial,time," + ",".join(f"{prefix}{i}" for i in range(n_cols))
        with open(path, "w") as f:
            f.write(header + "\n")
            for row in rows:
                f.write(f"{int(row[0])},{int(row[1])},"
                        + ",".join(format(v, ".17g") for v in row[2:]) + "\n")

    _write(os.path.join(args.out, "latents.csv"), lat_rows, "x", n_x)
    _write(os.path.join(args.out, "embeddings.csv"), emb_rows, "a", n_a)
    meta_out = {"mode": mode, "k": k, "offset": (k if mode == "predict" else 1),
                "ckpt": os.path.abspath(args.ckpt), "fold": args.fold,
                "split": args.split, "drop_s": args.drop_s, "drop_y": args.drop_y,
                "n_trials": len(trials), "zero_impute": zero_impute}
    with open(os.path.join(args.out, "infer_meta.json"), "w") as f:
        json.dump(meta_out, f, indent=2)
        f.write("\n")
    _write_run_record(args.out, args.drop_seed, meta_out)
    print(f"wrote latents for {len(trials)} trials to {args.out}")
    return 0


def _read_latents_csv(path: str) -> list[np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        _fail(f"no rows in {path}")
    trials = []
    for tid in np.unique(data[:, 0]):
        rows = data[data[:, 0] == tid]
        trials.append(rows[np.argsort(rows[:, 1]), 2:])
    return trials


def _parse_align(text: str | None):
    if text is None:
        return None, 1
    try:
        method, ratio = text.split(":")
        return method, int(ratio)
    except ValueError:
        _fail(f"--align wants METHOD:RATIO, got {text!r}")


def cmd_decode(args) -> int:
    lat_trials = _read_latents_csv(os.path.join(args.latents, "latents.csv"))
    bundle = load_bundle(args.data)
    with open(os.path.join(args.latents, "infer_meta.json")) as f:
        imeta = json.load(f)
    if imeta.get("fold"):
        _fail("decode expects latents inferred over the full bundle")
    if len(lat_trials) != len(bundle.trials):
        _fail(f"{len(lat_trials)} latent trials vs {len(bundle.trials)} in bundle")
    offset = int(imeta.get("offset", 1))
    method, ratio = _parse_align(args.align)
    folds = []
    for fold in range(1, args.folds + 1):
        idx = np.arange(len(bundle.trials))
        tr_idx, te_idx = fold_split(list(idx), fold, args.folds)
        xs, zs = {}, {}
        for key, ids in (("train", tr_idx), ("test", te_idx)):
            lx, lz = [], []
            for i in ids:
                x = lat_trials[i]
                z = bundle.trials[i]["behavior"][offset - 1: offset - 1 + len(x)]
                if method:
                    x = align_timescales(x, ratio, method)
                    z = z[::ratio][:len(x)]
                lx.append(x)
                lz.append(z)
            xs[key] = np.concatenate(lx, axis=0)
            zs[key] = np.concatenate(lz, axis=0)
        readout = fit_readout(xs["train"], zs["train"])
        pred = readout.predict(xs["test"])
        folds.append({
            "fold": fold,
            "cc": behavior_cc(zs["test"], pred),
            "r2": float(np.mean([r_squared(zs["test"][:, d], pred[:, d])
                                 for d in range(pred.shape[1])])),
        })
    report = {
        "folds": folds,
        "mean_cc": float(np.mean([f["cc"] for f in folds])),
        "mean_r2": float(np.mean([f["r2"] for f in folds])),
        "align": args.align,
        "latents": os.path.abspath(args.latents),
    }
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    print(f"mean decode CC {report['mean_cc']:.4f} over {args.folds} folds")
    return 0


def cmd_eval_recon(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    bundle = load_bundle(args.data)
    fold = _parse_fold(args.fold, len(bundle.trials))
    trials = _split(bundle, fold)[1] if fold else bundle.trials
    zero_impute = bool(meta["train_config"].get("zero_impute", False))
    cc_vals, auc_rates, auc_counts = [], [], []
    for tr in trials:
        s, y, ms, my = tr["s"], tr["y"], tr["mask_s"], tr["mask_y"]
        s_in, y_in, ims, imy = s, y, ms, my
        if zero_impute:
            s_in, y_in = sanitize(s, ms), sanitize(y, my)
            ims, imy = np.ones_like(ms), np.ones_like(my)
        res = infer(model, s_in[None], y_in[None], ims[None, :], imy[None, :],
                    mode="smooth")
        if res.means_y is not None and my.sum() >= 2:
            obs = my > 0
            for d in range(y.shape[1]):
                cc_vals.append(pearson_cc(y[obs, d], res.means_y[0, obs, d]))
        if res.rates_s is not None and ms.sum() >= 2:
            obs = ms > 0
            auc_rates.append(res.rates_s[0, obs])
            auc_counts.append(s[obs])
    report = {"n_trials": len(trials), "fold": args.fold}
    if cc_vals:
        report["gaussian_recon_cc"] = float(np.mean(cc_vals))
    if auc_rates:
        report["spike_auc"] = spike_auc(np.concatenate(auc_rates, axis=0),
                                        np.concatenate(auc_counts, axis=0))
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    print(json.dumps(report))
    return 0


def _parse_grid(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        _fail(f"bad grid: {text!r}")
    if any(not 0 <= v < 1 for v in vals):
        _fail("drop probabilities must be in [0, 1)")
    return vals


def cmd_sweep(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    bundle = load_bundle(args.data)
    fold = _parse_fold(args.fold, len(bundle.trials))
    if fold is None:
        _fail("sweep needs --fold K/N to define train/test splits")
    train_trials, test_trials = _split(bundle, fold)
    zero_impute = bool(meta["train_config"].get("zero_impute", False))
    grid_s = _parse_grid(args.drop_s)
    grid_y = _parse_grid(args.drop_y)
    result = robustness_sweep(model, train_trials, test_trials, grid_s, grid_y,
                              mode=args.mode, seed=args.seed,
                              zero_impute=zero_impute)
    with open(args.out, "w") as f:
        f.write("drop_s,drop_y,score\n")
        for i, ps in enumerate(result.drop_s):
            for j, py in enumerate(result.drop_y):
                f.write(f"{ps:.17g},{py:.17g},{result.scores[i, j]:.17g}\n")
    print(f"wrote {len(grid_s) * len(grid_y)} grid scores to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrine", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic dataset bundle")
    sp.add_argument("system", help="benchmark system (lorenz)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON config file")
    sp.set_defaults(func=cmd_simulate)

    tp = sub.add_parser("train", help="train a model on a bundle")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", help="JSON config file")
    tp.add_argument("--preset", help="named preset (lorenz, grid-same, ...)")
    tp.add_argument("--variant", default="mrine",
                    help="preset variant: mrine, ss-poisson, ss-gaussian")
    tp.add_argument("--fold", help="K/N holds out block K of N for validation")
    tp.add_argument("--verbose", action="store_true")
    tp.set_defaults(func=cmd_train)

    ip = sub.add_parser("infer", help="run inference, write latents CSV")
    ip.add_argument("--ckpt", required=True)
    ip.add_argument("--data", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--mode", default="filter", help="filter | smooth | predict:K")
    ip.add_argument("--fold", help="restrict to a fold split")
    ip.add_argument("--split", default="test", choices=["train", "test"])
    ip.add_argument("--drop-s", type=float, default=0.0)
    ip.add_argument("--drop-y", type=float, default=0.0)
    ip.add_argument("--drop-seed", type=int, default=0)
    ip.set_defaults(func=cmd_infer)

    dp = sub.add_parser("decode", help="linear behavior decoding from latents")
    dp.add_argument("--latents", required=True, help="directory from infer")
    dp.add_argument("--data", required=True)
    dp.add_argument("--out", required=True)
    dp.add_argument("--folds", type=int, default=5)
    dp.add_argument("--align", help="downsample:R or avg_pool:R")
    dp.set_defaults(func=cmd_decode)

    ep = sub.add_parser("eval-recon", help="reconstruction metrics (CC, AUC)")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--fold", help="evaluate on the test block of K/N")
    ep.set_defaults(func=cmd_eval_recon)

    wp = sub.add_parser("sweep", help="robustness to inference-time sample drop")
    wp.add_argument("--ckpt", required=True)
    wp.add_argument("--data", required=True)
    wp.add_argument("--out", required=True)
    wp.add_argument("--fold", required=False, help="K/N train/test split")
    wp.add_argument("--drop-s", default="0", help="comma list of probabilities")
    wp.add_argument("--drop-y", default="0", help="comma list of probabilities")
    wp.add_argument("--mode", default="filter", choices=["filter", "smooth"])
    wp.add_argument("--seed", type=int, default=0)
    wp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
