"""Round-trip and validation tests for dataset bundles and checkpoints."""

import json
import os

import numpy as np
import pytest

from mrine.bundleio import (
    DatasetBundle,
    canonical_json,
    config_hash,
    fold_split,
    load_bundle,
    load_checkpoint,
    save_bundle,
    save_checkpoint,
)
from mrine.losses import LossConfig
from mrine.network import ModelConfig, build_model, infer
from mrine.training import TrainConfig


def make_bundle(rng, n_trials=3, lengths=(12, 9, 15)):
    trials = []
    for t_len in lengths[:n_trials]:
        mask_y = (rng.uniform(size=t_len) > 0.4).astype(float)
        trials.append({
            "s": rng.poisson(2.0, (t_len, 4)).astype(float),
            "y": rng.standard_normal((t_len, 3)),
            "mask_s": np.ones(t_len),
            "mask_y": mask_y,
            "behavior": rng.standard_normal((t_len, 2)),
        })
    return DatasetBundle("toy", trials, timescale_ratio=5, seeds={"data": 7})


def small_model(seed=0):
    cfg = ModelConfig(n_s=3, n_y=2, n_a=4, n_x=3, phi_s=(1, 8), phi_y=(1, 8),
                      phi_m=(1, 8), theta_s=(1, 8), theta_y=(1, 8))
    return build_model(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# bundles


def test_bundle_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    bundle = make_bundle(rng)
    # nasty values that expose insufficient print precision
    bundle.trials[0]["y"][0, 0] = 1.0 / 3.0
    bundle.trials[0]["y"][0, 1] = 1e-300
    bundle.trials[0]["y"][1, 0] = -1.2345678901234567e18
    bundle.trials[0]["behavior"][0, 0] = np.nextafter(0.1, 1.0)
    save_bundle(bundle, str(tmp_path))
    back = load_bundle(str(tmp_path))
    assert back.name == "toy"
    assert back.timescale_ratio == 5
    assert back.seeds == {"data": 7}
    assert len(back.trials) == 3
    for orig, got in zip(bundle.trials, back.trials):
        for key in ("s", "y", "mask_s", "mask_y", "behavior"):
            assert np.array_equal(np.asarray(orig[key]), got[key]), key
    assert back.n_s == 4 and back.n_y == 3 and back.behavior_dim == 2


def test_bundle_masked_rows_may_hold_nan(tmp_path):
    rng = np.random.default_rng(1)
    bundle = make_bundle(rng, n_trials=1, lengths=(8,))
    tr = bundle.trials[0]
    tr["mask_y"][:] = 1.0
    tr["mask_y"][3] = 0.0
    tr["y"][3, :] = np.nan
    save_bundle(bundle, str(tmp_path))
    back = load_bundle(str(tmp_path))
    assert np.isnan(back.trials[0]["y"][3]).all()
    assert np.isfinite(back.trials[0]["y"][back.trials[0]["mask_y"] > 0]).all()


def test_bundle_rejects_nonfinite_observed_rows(tmp_path):
    rng = np.random.default_rng(2)
    bundle = make_bundle(rng, n_trials=1, lengths=(8,))
    bundle.trials[0]["mask_y"][:] = 1.0
    bundle.trials[0]["y"][2, 1] = np.inf
    save_bundle(bundle, str(tmp_path))
    with pytest.raises(ValueError, match="non-finite"):
        load_bundle(str(tmp_path))


def test_bundle_rejects_negative_observed_counts(tmp_path):
    rng = np.random.default_rng(3)
    bundle = make_bundle(rng, n_trials=1, lengths=(6,))
    bundle.trials[0]["s"][1, 0] = -2.0
    save_bundle(bundle, str(tmp_path))
    with pytest.raises(ValueError, match="negative count"):
        load_bundle(str(tmp_path))


def test_bundle_rejects_bad_masks(tmp_path):
    rng = np.random.default_rng(4)
    bundle = make_bundle(rng, n_trials=1, lengths=(6,))
    bundle.trials[0]["mask_s"][2] = 0.5
    save_bundle(bundle, str(tmp_path))
    with pytest.raises(ValueError, match="0 or 1"):
        load_bundle(str(tmp_path))


def test_bundle_missing_pieces(tmp_path):
    rng = np.random.default_rng(5)
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_bundle(str(tmp_path))
    bundle = make_bundle(rng, n_trials=1, lengths=(6,))
    save_bundle(bundle, str(tmp_path))
    os.unlink(tmp_path / "gaussian.csv")
    with pytest.raises(FileNotFoundError, match="gaussian"):
        load_bundle(str(tmp_path))


def test_bundle_row_count_mismatch(tmp_path):
    rng = np.random.default_rng(6)
    bundle = make_bundle(rng, n_trials=1, lengths=(6,))
    save_bundle(bundle, str(tmp_path))
    path = tmp_path / "spikes.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError, match="rows"):
        load_bundle(str(tmp_path))


def test_bundle_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_bundle(DatasetBundle("x", []), str(tmp_path))


# ---------------------------------------------------------------------------
# fold splitting


def test_fold_split_sizes_and_blocks():
    trials = list(range(750))
    for fold in range(1, 6):
        train, test = fold_split(trials, fold, 5)
        assert len(train) == 600 and len(test) == 150
        assert test == trials[(fold - 1) * 150:fold * 150]
        assert sorted(train + test) == trials
    # test blocks tile the prefix; the remainder always lands in train
    train, test = fold_split(list(range(7)), 3, 3)
    assert test == [4, 5]
    assert 6 in train and len(train) == 5
    with pytest.raises(ValueError):
        fold_split(trials, 0, 5)
    with pytest.raises(ValueError):
        fold_split(trials, 6, 5)
    with pytest.raises(ValueError):
        fold_split([1, 2], 1, 3)


# ---------------------------------------------------------------------------
# checkpoints


def test_canonical_json_is_key_order_invariant():
    a = {"b": 1, "a": [1, 2], "c": {"y": 0.5, "x": None}}
    b = {"c": {"x": None, "y": 0.5}, "a": [1, 2], "b": 1}
    assert canonical_json(a) == canonical_json(b)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "b": 2})
    assert len(config_hash(a)) == 64


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = small_model(seed=11)
    tc = TrainConfig(epochs=3, batch_size=2, seed=9)
    lc = LossConfig(horizons=(1, 2), tau=1.25, gamma_s=3.0, gamma_y=0.5,
                    gamma_x=2.0, gamma_r=1e-4)
    echo = {"system": "toy", "fold": 2}
    path = str(tmp_path / "ck.json")
    save_checkpoint(path, model, tc, lc, tau=1.25, epochs_trained=3,
                    config_echo=echo, extra={"note": "hi"})
    loaded, meta = load_checkpoint(path)
    orig = dict(model.parameters())
    back = dict(loaded.parameters())
    assert set(orig) == set(back)
    for name in orig:
        assert np.array_equal(orig[name].data, back[name].data), name
    assert meta["tau"] == 1.25
    assert meta["epochs_trained"] == 3
    assert meta["note"] == "hi"
    assert meta["config_echo"] == canonical_json(echo)
    assert meta["config_hash"] == config_hash(echo)
    assert meta["loss_config_obj"] == lc
    assert meta["train_config_obj"] == tc
    assert loaded.config == model.config


def test_checkpoint_round_trip_preserves_inference(tmp_path):
    rng = np.random.default_rng(12)
    model = small_model(seed=13)
    path = str(tmp_path / "ck.json")
    save_checkpoint(path, model, TrainConfig(), LossConfig(), 1.0, 0)
    loaded, _ = load_checkpoint(path)
    s = rng.poisson(1.0, (2, 10, 3)).astype(float)
    y = rng.standard_normal((2, 10, 2))
    masks = np.ones((2, 10))
    a = infer(model, s, y, masks, masks, mode="smooth")
    b = infer(loaded, s, y, masks, masks, mode="smooth")
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.rates_s, b.rates_s)
    assert np.array_equal(a.means_y, b.means_y)


def test_checkpoint_rejects_tampering(tmp_path):
    model = small_model(seed=14)
    path = str(tmp_path / "ck.json")
    save_checkpoint(path, model, TrainConfig(), LossConfig(), 1.0, 0)
    payload = json.loads(open(path).read())

    broken = dict(payload)
    broken["schema_version"] = 99
    alt = tmp_path / "bad_schema.json"
    alt.write_text(json.dumps(broken))
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(str(alt))

    broken = json.loads(json.dumps(payload))
    first = next(iter(broken["params"]))
    del broken["params"][first]
    alt = tmp_path / "missing_param.json"
    alt.write_text(json.dumps(broken))
    with pytest.raises(ValueError, match="do not match"):
        load_checkpoint(str(alt))

    broken = json.loads(json.dumps(payload))
    name = next(iter(broken["params"]))
    flat = np.asarray(broken["params"][name], dtype=np.float64).ravel().tolist()
    broken["params"][name] = flat + [0.0]
    alt = tmp_path / "bad_shape.json"
    alt.write_text(json.dumps(broken))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(str(alt))
