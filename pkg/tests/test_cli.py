import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from scenecomp import checkpoint as ckpt
from scenecomp import core, report
from scenecomp.cli import encoder_extractor, main, nearest_neighbor
from scenecomp.config import Config, ConfigError, echo_config, load_config, parse_items
from scenecomp.core import DataError
from scenecomp.data import DatasetBundle, ToyLayoutRule, generate_toy_dataset
from scenecomp.training import build_models


TINY = """
resolution = 32
toy_n = 24
batch_size = 4
epochs = 2
gen_base_channels = 8
disc_base_channels = 8
stn_base_channels = 8
stn_fc_dim = 32
inpaint_base_channels = 8
flow_base_channels = 8
inpaint_steps = 6
flow_steps = 6
checkpoint_interval = 2
sample_interval = 5
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# --- config ------------------------------------------------------------------

def test_config_defaults_round_trip(tmp_path):
    cfg = Config()
    echo_config(cfg, tmp_path / "echo.cfg")
    back = load_config(tmp_path / "echo.cfg")
    assert back == cfg


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_items({"definitely_not_a_key": "1"})


def test_config_bad_value_rejected():
    with pytest.raises(ConfigError, match="bad value"):
        parse_items({"epochs": "many"})


def test_config_types_parsed():
    cfg = parse_items({"epochs": "7", "lr": "1e-3", "esmr_update_d": "true", "toy_mode": "unpaired"})
    assert cfg.epochs == 7 and cfg.lr == 1e-3 and cfg.esmr_update_d is True
    assert cfg.toy_mode == "unpaired"


def test_config_validation():
    with pytest.raises(ConfigError):
        parse_items({"resolution": "33"})
    with pytest.raises(ConfigError):
        parse_items({"dec_target": "everything"})


# --- report ------------------------------------------------------------------

def test_metrics_writer_stable_key_order(tmp_path):
    path = tmp_path / "m.txt"
    w = report.MetricsWriter(path)
    w.write({"step": 0, "loss": 1.5, "aux": 2})
    w.write({"aux": 3, "loss": 0.25, "step": 1})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("step=0 loss=1.5 aux=2")
    assert lines[1].startswith("step=1 loss=0.25 aux=3")
    back = report.read_metrics(path)
    assert back[1]["loss"] == 0.25


def test_metrics_writer_rejects_missing_keys(tmp_path):
    w = report.MetricsWriter(tmp_path / "m.txt")
    w.write({"step": 0, "loss": 1.0})
    with pytest.raises(ValueError):
        w.write({"step": 1})


def test_image_grid_written(tmp_path):
    imgs = [torch.rand(3, 16, 16) * 2 - 1 for _ in range(3)]
    report.save_image_grid([("row", imgs)], tmp_path / "grid.png")
    assert (tmp_path / "grid.png").stat().st_size > 0


# --- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = parse_items({"resolution": "32", "gen_base_channels": "8", "disc_base_channels": "8",
                       "stn_base_channels": "8", "stn_fc_dim": "32"})
    torch.manual_seed(3)
    model, stn = build_models(cfg)
    cache = {"c": torch.rand(2, 3, 32, 32)}
    ckpt.save_composition(tmp_path / "ck.pt", cfg, model, stn, real_cache=cache, step=17)
    back = ckpt.load_composition(tmp_path / "ck.pt")
    assert back.step == 17
    assert back.cfg == cfg
    for k, v in model.state_dict().items():
        assert torch.equal(back.model.state_dict()[k], v), k
    for k, v in stn.state_dict().items():
        assert torch.equal(back.stn.state_dict()[k], v), k
    assert torch.equal(back.real_cache["c"], cache["c"])


def test_checkpoint_kind_mismatch_rejected(tmp_path):
    torch.save({"kind": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        ckpt.load_composition(tmp_path / "bad.pt")


# --- nearest neighbor ---------------------------------------------------------

def planted_bundle(n=10, size=16, seed=0):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(-1, 1, size=(n, 3, size, size))).float()
    y = torch.from_numpy(rng.uniform(-1, 1, size=(n, 3, size, size))).float()
    c = torch.from_numpy(rng.uniform(-1, 1, size=(n, 3, size, size))).float()
    masks = torch.ones(n, size, size)
    return DatasetBundle(mode="paired", resolution=size, x=x, x_mask=masks, y=y,
                         y_mask=masks, c=c, c_labels=torch.zeros(n, size, size, dtype=torch.int64))


def mean_extractor(images):
    return images.mean(dim=(2, 3))


def test_nn_exact_match_returns_zero_distance():
    bundle = planted_bundle()
    comp, idx, dist = nearest_neighbor(bundle.x[4], bundle.y[4], bundle, mean_extractor)
    assert idx == 4 and dist <= 1e-6
    assert torch.equal(comp, bundle.c[4])


def test_nn_matches_brute_force_oracle():
    bundle = planted_bundle(seed=1)
    rng = np.random.default_rng(2)
    qx = torch.from_numpy(rng.uniform(-1, 1, size=(3, 16, 16))).float()
    qy = torch.from_numpy(rng.uniform(-1, 1, size=(3, 16, 16))).float()
    _, idx, dist = nearest_neighbor(qx, qy, bundle, mean_extractor)
    fx, fy = mean_extractor(qx.unsqueeze(0))[0], mean_extractor(qy.unsqueeze(0))[0]
    best, best_d = None, None
    for i in range(10):
        d = float((mean_extractor(bundle.x[i : i + 1])[0] - fx).norm()
                  + (mean_extractor(bundle.y[i : i + 1])[0] - fy).norm())
        if best_d is None or d < best_d - 1e-12:
            best, best_d = i, d
    assert idx == best
    assert abs(dist - best_d) <= 1e-6


def test_nn_tie_breaks_to_lowest_index():
    bundle = planted_bundle(seed=3)
    bundle.x[7] = bundle.x[3]
    bundle.y[7] = bundle.y[3]
    _, idx, _ = nearest_neighbor(bundle.x[3], bundle.y[3], bundle, mean_extractor)
    assert idx == 3


def test_nn_empty_training_set_rejected():
    bundle = planted_bundle()
    bundle.c = None
    with pytest.raises(DataError):
        nearest_neighbor(bundle.x[0], bundle.y[0], bundle, mean_extractor)


def test_encoder_extractor_shapes():
    cfg = parse_items({"resolution": "32", "gen_base_channels": "8", "disc_base_channels": "8",
                       "stn_base_channels": "8", "stn_fc_dim": "32"})
    model, _ = build_models(cfg)
    feats = encoder_extractor(model)(torch.rand(4, 3, 32, 32))
    assert feats.shape[0] == 4 and feats.dim() == 2


# --- commands ----------------------------------------------------------------

def test_make_data_manifest_counts(tiny_cfg, tmp_path):
    out = tmp_path / "data"
    rc = main(["make-data", "--config", str(tiny_cfg), "--out", str(out), "--n", "9", "--seed", "3"])
    assert rc == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["count_x"] == meta["count_y"] == meta["count_c"] == 9
    assert (out / "config.cfg").is_file()


def test_unknown_config_key_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("mystery_knob = 3\n")
    rc = main(["make-data", "--config", str(bad), "--out", str(tmp_path / "d")])
    assert rc == 2


def test_missing_data_exit_code(tmp_path):
    rc = main(["emit-grid", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "g.png")])
    assert rc == 3


def test_env_seed_override(tiny_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("CODEGAN_SEED", "4242")
    out = tmp_path / "d"
    assert main(["make-data", "--config", str(tiny_cfg), "--out", str(out), "--n", "2"]) == 0
    assert "seed = 4242" in (out / "config.cfg").read_text()


def test_train_code_deterministic_metrics(tiny_cfg, tmp_path):
    data = tmp_path / "data"
    assert main(["make-data", "--config", str(tiny_cfg), "--out", str(data), "--seed", "3"]) == 0
    runs = []
    for name in ("r1", "r2"):
        rc = main([
            "train-code", "--config", str(tiny_cfg), "--out", str(tmp_path / name),
            "--data", str(data), "--seed", "7",
        ])
        assert rc == 0
        runs.append(report.read_metrics(tmp_path / name / "metrics.txt"))
    assert len(runs[0]) == len(runs[1])
    for rec1, rec2 in zip(runs[0], runs[1]):
        for key in rec1:
            assert abs(rec1[key] - rec2[key]) <= 1e-6, key
    assert (tmp_path / "r1" / "checkpoints" / "code.pt").is_file()
    assert (tmp_path / "r1" / "eval.txt").is_file()
    assert (tmp_path / "r1" / "loss.png").is_file()


def test_infer_zero_steps_noop_and_outputs(tiny_cfg, tmp_path):
    data = tmp_path / "data"
    assert main(["make-data", "--config", str(tiny_cfg), "--out", str(data), "--seed", "5"]) == 0
    run = tmp_path / "run"
    assert main([
        "train-code", "--config", str(tiny_cfg), "--out", str(run), "--data", str(data), "--seed", "5",
    ]) == 0
    out = tmp_path / "infer"
    rc = main([
        "infer", "--checkpoint", str(run / "checkpoints" / "code.pt"),
        "--x", str(data / "X" / "00000.png"), "--y", str(data / "Y" / "00000.png"),
        "--steps", "0", "--out-dir", str(out),
    ])
    assert rc == 0
    before = core.load_image(out / "c_before.png")
    after = core.load_image(out / "c_after.png")
    assert torch.equal(before, after)
    for name in ("c_before.png", "c_after.png", "c_assembled.png", "labels.png", "summary.png"):
        assert (out / name).is_file(), name


def test_eval_nn_command(tiny_cfg, tmp_path):
    data = tmp_path / "data"
    assert main(["make-data", "--config", str(tiny_cfg), "--out", str(data), "--seed", "6"]) == 0
    run = tmp_path / "run"
    assert main([
        "train-code", "--config", str(tiny_cfg), "--out", str(run), "--data", str(data), "--seed", "6",
    ]) == 0
    out = tmp_path / "nn"
    rc = main([
        "eval-nn", "--checkpoint", str(run / "checkpoints" / "code.pt"), "--data", str(data),
        "--x", str(data / "X" / "00002.png"), "--y", str(data / "Y" / "00002.png"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    record = (out / "nn.txt").read_text()
    assert "index=2" in record and "distance=0" in record


def test_emit_grid_command(tiny_cfg, tmp_path):
    data = tmp_path / "data"
    assert main(["make-data", "--config", str(tiny_cfg), "--out", str(data), "--seed", "8"]) == 0
    out = tmp_path / "grid.png"
    assert main(["emit-grid", "--data", str(data), "--out", str(out), "--n", "4"]) == 0
    assert out.stat().st_size > 0
