import hashlib
import json

import numpy as np
import pytest
import torch

from mdsnoise import denoise as dn
from mdsnoise import harness as H
from mdsnoise.errors import ConfigurationError, ProtocolError

TINY_TOML = """
seed = 3
activities = ["sit-down", "walk-to-fall"]
recordings_per_activity = 2
snr_levels = [0]
noise_models = ["AWGN"]
architectures = ["dncnn"]
split_rates = [0.5]
pair_split_rate = 0.5
clean_patches_per_recording = 4

[denoiser]
epochs = 1
width = 4
time_budget_s = 60.0

[classifier]
epochs = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path, monkeypatch):
    monkeypatch.delenv(H.OUTPUT_ENV, raising=False)
    path = tmp_path / "exp.toml"
    out = (tmp_path / "out").as_posix()
    path.write_text(f'output_dir = "{out}"\n' + TINY_TOML)
    return path


def test_config_defaults_follow_desk_scale():
    cfg = H.ExperimentConfig()
    assert cfg.recordings_per_activity == 8
    assert tuple(cfg.snr_levels) == (-10, -5, 0, 5, 10, 15, 20, 25)
    assert tuple(cfg.split_rates) == (0.8, 0.7, 0.6)
    assert cfg.gan.latent_dim == 100


def test_load_config_and_env_override(tiny_cfg, monkeypatch, tmp_path):
    cfg = H.load_config(tiny_cfg)
    assert cfg.seed == 3 and cfg.denoiser.width == 4 and cfg.activities == ("sit-down", "walk-to-fall")
    monkeypatch.setenv(H.OUTPUT_ENV, str(tmp_path / "elsewhere"))
    assert H.load_config(tiny_cfg).output_dir == str(tmp_path / "elsewhere")
    assert H.load_config(tiny_cfg).hash == cfg.hash  # output location is not part of the hash


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense_key = 1\n")
    with pytest.raises(ConfigurationError):
        H.load_config(bad)
    bad.write_text("[denoiser]\nwidht = 3\n")
    with pytest.raises(ConfigurationError):
        H.load_config(bad)
    with pytest.raises(ConfigurationError):
        H.load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigurationError):
        H.ExperimentConfig(architectures=("vgg",))


def test_split_recordings_is_stratified():
    cfg = H.ExperimentConfig(activities=("sit-down", "stand-up"), recordings_per_activity=5)
    recs = H.build_recordings(cfg)
    tr, te = H.split_recordings(recs, 0.6, seed=0)
    assert len(tr) == 6 and len(te) == 4 and not set(tr) & set(te)
    with pytest.raises(ProtocolError):
        H.split_recordings(recs[:1] + recs[5:6], 0.5, 0)


def test_classifier_outputs_probabilities():
    net = H.Classifier().eval()
    p = net.predict_proba(torch.rand(3, 1, 128, 128))
    assert p.shape == (3, 6)
    np.testing.assert_allclose(p.sum(dim=1).detach().numpy(), 1.0, atol=1e-6)


def test_identity_denoiser_matches_baseline_exactly():
    cfg = H.ExperimentConfig(activities=("sit-down", "walk-to-fall", "stand-up"), recordings_per_activity=3)
    recs = H.build_recordings(cfg)
    rep = H.classify_eval({"identity": None}, recs, H.ClassifierConfig(epochs=2), 0.7, seed=1)
    assert rep.accuracy["identity"] == rep.baseline_accuracy
    assert rep.confusion["identity"] == rep.confusion["baseline"]


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_tiny_run_cardinality_and_determinism(tiny_cfg, tmp_path):
    cfg = H.load_config(tiny_cfg)
    out = H.run_experiment(cfg)
    metrics = H.read_csv(out / "metrics.csv")
    classes = H.read_csv(out / "classification.csv")
    assert len(metrics) == 1 and len(classes) == 1
    assert len(list((out / "denoisers").iterdir())) == 1
    assert metrics[0]["config_hash"] == cfg.hash == classes[0]["config_hash"]
    assert metrics[0]["n_patches"] > 0
    first = _digest(out)
    cfg.output_dir = str(tmp_path / "again")
    second = _digest(H.run_experiment(cfg))
    assert first == second

    written = H.render_reports(out)
    assert written["notice"] is None
    table = H.read_csv(out / "table_ssim_improvement.csv")
    assert len(table) == 1 and table[0]["0"] == metrics[0]["ssim_improvement"]
    (fig, lines), = written["figures"].items()
    assert fig.exists() and lines == 2  # one model curve + baseline


def test_csv_parse_back_round_trips(tmp_path):
    rows = [{"arch": "dncnn", "model": "MNM", "snr_db": -5.0, "psnr_improvement": 1 / 3, "ssim_improvement": float("inf"),
             "n_patches": 7, "seed": 0, "config_hash": "abc", "stage": "evaluate"}]
    H._write_csv(tmp_path / "m.csv", H.METRIC_FIELDS, rows)
    back = H.read_csv(tmp_path / "m.csv")
    for k, v in rows[0].items():
        assert back[0][k] == v


def test_render_full_grid_has_three_curves_and_baseline(tmp_path):
    rows = []
    for m in ("MNM", "AWGN", "MIX"):
        for s in (-10.0, 0.0, 10.0):
            rows.append({"arch": "dncnn", "model": m, "snr_db": s, "split_rate": 0.8, "accuracy": 0.5,
                         "baseline_accuracy": 0.4, "seed": 0, "config_hash": "h", "stage": "classify"})
    H._write_csv(tmp_path / "classification.csv", H.CLASS_FIELDS, rows)
    written = H.render_reports(tmp_path)
    assert list(written["figures"].values()) == [4]


def test_render_empty(tmp_path):
    assert H.render_reports(tmp_path)["notice"]


def test_failure_manifest(tiny_cfg, tmp_path, monkeypatch):
    cfg = H.load_config(tiny_cfg)

    def boom(*a, **k):
        raise RuntimeError("injected")

    monkeypatch.setattr(dn, "train_denoiser", boom)
    with pytest.raises(RuntimeError):
        H.run_experiment(cfg)
    failure = json.loads((tmp_path / "out" / "failure.json").read_text())
    assert failure["stage"].startswith("train-denoiser") and "injected" in failure["error"]
    assert (tmp_path / "out" / "config.json").exists()
