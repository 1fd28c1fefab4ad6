"""Dataset bundles and model checkpoints on disk.

A bundle is a directory: manifest.json plus flat CSV tables (spikes,
gaussian, masks, behavior) holding every trial concatenated along time, with
per-trial lengths recorded in the manifest.  Floats are written with 17
significant digits so values round-trip exactly.  Checkpoints are a single
JSON file carrying the full configuration echo and every parameter array.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .losses import LossConfig
from .network import ModelConfig, MrineModel, build_model
from .training import TrainConfig

SCHEMA_VERSION = 1

_TABLES = {
    "spikes": ("s", "n_s"),
    "gaussian": ("y", "n_y"),
    "mask_s": ("mask_s", None),
    "mask_y": ("mask_y", None),
    "behavior": ("behavior", "behavior_dim"),
}


def _write_atomic(path: str, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(arr: np.ndarray, prefix: str) -> str:
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    header = ",".join(f"{prefix}{i}" for i in range(arr.shape[1]))
    lines = [header]
    for row in arr:
        lines.append(",".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def _read_csv(path: str) -> np.ndarray:
    with open(path) as f:
        header = f.readline()
        n_cols = len(header.strip().split(","))
        data = np.loadtxt(f, delimiter=",", ndmin=2)
    if data.size == 0:
        data = data.reshape(0, n_cols)
    return data


@dataclass
class DatasetBundle:
    name: str
    trials: list          # dicts with s, y, mask_s, mask_y, behavior
    timescale_ratio: int = 1
    seeds: dict | None = None

    @property
    def n_s(self) -> int:
        return self.trials[0]["s"].shape[1]

    @property
    def n_y(self) -> int:
        return self.trials[0]["y"].shape[1]

    @property
    def behavior_dim(self) -> int:
        return self.trials[0]["behavior"].shape[1]


def save_bundle(bundle: DatasetBundle, out_dir: str) -> None:
    if not bundle.trials:
        raise ValueError("bundle has no trials")
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "name": bundle.name,
        "n_s": bundle.n_s,
        "n_y": bundle.n_y,
        "behavior_dim": bundle.behavior_dim,
        "timescale_ratio": bundle.timescale_ratio,
        "seeds": bundle.seeds or {},
        "trials": [{"id": i, "T": len(tr["s"])} for i, tr in enumerate(bundle.trials)],
    }
    for fname, (key, _) in _TABLES.items():
        parts = [np.asarray(tr[key], dtype=np.float64) for tr in bundle.trials]
        rows = np.concatenate([p.reshape(len(p), -1) for p in parts], axis=0)
        _write_atomic(os.path.join(out_dir, f"{fname}.csv"),
                      _csv_text(rows, key if key in ("s", "y") else fname[0]))
    _write_atomic(os.path.join(out_dir, "manifest.json"),
                  json.dumps(manifest, indent=2) + "\n")


def _validate_table(name: str, rows: np.ndarray, total_t: int) -> None:
    if len(rows) != total_t:
        raise ValueError(f"{name}.csv has {len(rows)} rows, manifest expects {total_t}")


def load_bundle(in_dir: str) -> DatasetBundle:
    mpath = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no manifest.json under {in_dir}")
    with open(mpath) as f:
        manifest = json.load(f)
    lengths = [tr["T"] for tr in manifest["trials"]]
    if not lengths:
        raise ValueError("manifest lists no trials")
    if min(lengths) <= 0:
        raise ValueError("manifest contains an empty trial")
    total_t = int(sum(lengths))
    tables = {}
    for fname, (key, _) in _TABLES.items():
        path = os.path.join(in_dir, f"{fname}.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"bundle table missing: {fname}.csv")
        rows = _read_csv(path)
        _validate_table(fname, rows, total_t)
        tables[key] = rows
    for key in ("mask_s", "mask_y"):
        vals = tables[key]
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError(f"{key} entries must be 0 or 1")
        tables[key] = vals[:, 0]
    for key, mkey in (("s", "mask_s"), ("y", "mask_y")):
        observed = tables[mkey] > 0
        if not np.isfinite(tables[key][observed]).all():
            raise ValueError(f"non-finite {key} value at an observed timestep")
    if (tables["s"][tables["mask_s"] > 0] < 0).any():
        raise ValueError("negative count in the discrete stream")
    trials = []
    lo = 0
    for t_len in lengths:
        hi = lo + t_len
        trials.append({
            "s": tables["s"][lo:hi],
            "y": tables["y"][lo:hi],
            "mask_s": tables["mask_s"][lo:hi],
            "mask_y": tables["mask_y"][lo:hi],
            "behavior": tables["behavior"][lo:hi],
        })
        lo = hi
    return DatasetBundle(manifest["name"], trials,
                         manifest.get("timescale_ratio", 1),
                         manifest.get("seeds"))


def fold_split(trials: list, fold: int, n_folds: int) -> tuple[list, list]:
    """Contiguous fold split: fold k of N holds out the k-th block of
    len(trials) // N trials; the remainder (if any) always trains."""
    if not 1 <= fold <= n_folds:
        raise ValueError(f"fold must be in 1..{n_folds}")
    block = len(trials) // n_folds
    if block == 0:
        raise ValueError("more folds than trials")
    lo, hi = (fold - 1) * block, fold * block
    return trials[:lo] + trials[hi:], trials[lo:hi]


# ---------------------------------------------------------------------------
# checkpoints


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def save_checkpoint(path: str, model: MrineModel, train_cfg: TrainConfig,
                    loss_cfg: LossConfig, tau: float, epochs_trained: int,
                    config_echo: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "model_config": asdict(model.config),
        "train_config": asdict(train_cfg),
        "loss_config": asdict(loss_cfg),
        "tau": tau,
        "epochs_trained": epochs_trained,
        "params": {name: t.data.tolist() for name, t in model.parameters()},
        "config_echo": canonical_json(config_echo) if config_echo is not None else None,
        "config_hash": config_hash(config_echo) if config_echo is not None else None,
    }
    if extra:
        payload.update(extra)
    _write_atomic(path, json.dumps(payload) + "\n")


def _tuplify(cfg: dict) -> dict:
    out = dict(cfg)
    for key in ("phi_s", "phi_y", "phi_m", "theta_s", "theta_y"):
        if key in out and out[key] is not None:
            out[key] = tuple(out[key])
    return out


def load_checkpoint(path: str) -> tuple[MrineModel, dict]:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema: {payload.get('schema_version')}")
    mc = ModelConfig(**_tuplify(payload["model_config"]))
    model = build_model(mc, np.random.default_rng(0))
    params = dict(model.parameters())
    saved = payload["params"]
    if set(saved) != set(params):
        raise ValueError("checkpoint parameters do not match the architecture")
    for name, tensor in params.items():
        arr = np.asarray(saved[name], dtype=np.float64)
        if arr.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}")
        tensor.data = arr
    meta = {k: v for k, v in payload.items() if k != "params"}
    lc = dict(payload["loss_config"])
    lc["horizons"] = tuple(lc["horizons"])
    meta["loss_config_obj"] = LossConfig(**lc)
    meta["train_config_obj"] = TrainConfig(**payload["train_config"])
    return model, meta
