"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (``-s`` is not needed
for the verdict lines, which bypass capture).
"""

import hashlib
import math
import shutil
import time

import numpy as np
import pytest
import torch
from torch import nn

from mdsnoise import denoise as dn
from mdsnoise import gan
from mdsnoise import harness as H
from mdsnoise.cli import main
from mdsnoise.formats import read_mdp, read_mds, write_mdp, write_mds
from mdsnoise.metrics import psnr, ssim
from mdsnoise.noise_models import SNR_LEVELS, NoiseModel, emit, lag1_autocorr, measured_snr, target_variance
from mdsnoise.sim import NaturalNoiseParams, compose_recording, template_for
from mdsnoise.spectrogram import ACTIVITIES, ActivityLabel, NoisePatch

GEN_TABLE = [(22400,), (25, 7, 128), (25, 7, 128), (25, 7, 64), (50, 14, 64), (100, 28, 1)]
CRITIC_TABLE = [(50, 14, 64), (25, 7, 128), (22400,), (256,), (64,), (1,)]
DENOISE_SNRS = (0.0, 5.0, 10.0)
SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def emit_line(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit_line


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------- 1: formula oracles


def oracle_ssim(x, y, c1=1e-4, c2=9e-4):
    x, y = x.ravel(), y.ravel()
    mx, my = math.fsum(x) / x.size, math.fsum(y) / y.size
    vx = math.fsum((x - mx) ** 2) / x.size
    vy = math.fsum((y - my) ** 2) / y.size
    cxy = math.fsum((x - mx) * (y - my)) / x.size
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def oracle_psnr(x, y):
    return 10 * math.log10(1.0 / (math.fsum(((x - y) ** 2).ravel()) / x.size))


def oracle_residual_loss(pred, noisy, clean):
    return sum(math.fsum(((p - (y - x)) ** 2).ravel()) for p, y, x in zip(pred, noisy, clean)) / (2 * len(pred))


def test_1_formula_oracles(verdict):
    worst = {"loss": 0.0, "ssim": 0.0, "variance": 0.0, "psnr": 0.0}
    torch.manual_seed(0)
    net = dn.build("dncnn", depth=3, width=4).double().eval()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        clean = rng.uniform(0, 1, (4, 100, 28))
        noisy = np.clip(clean + rng.normal(0, 0.1, clean.shape), 0, 1)
        with torch.no_grad():
            pred = net(torch.from_numpy(noisy).unsqueeze(1))
        got = dn.residual_loss(pred, torch.from_numpy(noisy - clean).unsqueeze(1)).item()
        worst["loss"] = max(worst["loss"], rel_err(got, oracle_residual_loss(pred.squeeze(1).numpy(), noisy, clean)))

        x, y = clean[0], noisy[0]
        worst["ssim"] = max(worst["ssim"], rel_err(ssim(x, y), oracle_ssim(x, y)))
        worst["psnr"] = max(worst["psnr"], rel_err(psnr(x, y), oracle_psnr(x, y)))
        sigma, snr = float(rng.uniform(1e-3, 1.0)), float(rng.uniform(-10, 25))
        worst["variance"] = max(worst["variance"], rel_err(target_variance(sigma, snr), sigma * 10 ** (-snr / 10)))
    ok = worst["loss"] <= 1e-6 and worst["variance"] <= 1e-6 and worst["ssim"] <= 1e-9 and worst["psnr"] <= 1e-9
    verdict(1, ok, "worst relative errors " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()))


# ---------------------------------------------------------------- 2: gradient penalty


class UnitLinear(nn.Module):
    def forward(self, x):
        return x.flatten(1).sum(dim=1, keepdim=True) / math.sqrt(x[0].numel())


class Constant(nn.Module):
    def forward(self, x):
        return torch.full((x.shape[0], 1), 0.3, dtype=x.dtype)


def test_2_gradient_penalty(verdict):
    torch.manual_seed(1)
    real = torch.rand(6, 1, 100, 28, dtype=torch.float64)
    fake = torch.rand(6, 1, 100, 28, dtype=torch.float64)
    x_hat = gan.interpolate(real, fake)
    _, gp_linear = gan.critic_loss(real, fake, x_hat, UnitLinear())
    loss_const, _ = gan.critic_loss(real, fake, x_hat, Constant(), gp_lambda=10.0)

    critic = nn.Sequential(nn.Conv2d(1, 3, 3), nn.Tanh(), nn.Flatten(), nn.Linear(3 * 4 * 3, 1)).double()
    x = torch.rand(1, 1, 6, 5, dtype=torch.float64)
    analytic = gan.critic_gradient_norms(critic, x).item()
    h, grad = 1e-6, np.zeros(x.numel())
    with torch.no_grad():
        for i in range(x.numel()):
            e = torch.zeros(x.numel(), dtype=torch.float64)
            e[i] = h
            e = e.view_as(x)
            grad[i] = (critic(x + e).item() - critic(x - e).item()) / (2 * h)
    fd_err = rel_err(analytic, float(np.linalg.norm(grad)))

    ok = abs(gp_linear.item()) <= 1e-6 and abs(loss_const.item() - 10.0) <= 1e-6 and fd_err <= 1e-3
    verdict(2, ok, f"unit-linear GP={gp_linear.item():.1e}, constant-critic loss={loss_const.item():.7f}, "
                   f"finite-difference rel err={fd_err:.1e}")


# ---------------------------------------------------------------- 3: layer tables


def test_3_shape_traces(verdict):
    t0 = time.perf_counter()
    g_trace = gan.shape_trace(gan.Generator(), torch.randn(2, 100))
    c_trace = gan.shape_trace(gan.Critic(), torch.randn(2, 1, 100, 28))
    elapsed = time.perf_counter() - t0
    ok = g_trace == GEN_TABLE and c_trace == CRITIC_TABLE and elapsed < 10
    verdict(3, ok, f"generator {g_trace[-1]}, critic {c_trace[-1]}, tables match={g_trace == GEN_TABLE and c_trace == CRITIC_TABLE}, {elapsed:.2f}s")


# ---------------------------------------------------------------- 4: SNR round trip


def test_4_snr_round_trip(verdict, desk_generator):
    rng = np.random.default_rng(4)
    clean = rng.uniform(0, 0.8, (100, 28))
    sigma = float(clean.var())
    t0 = time.perf_counter()
    worst = 0.0
    for tag in ("MNM", "AWGN", "MIX"):
        model = NoiseModel(tag, desk_generator if tag == "MNM" else None)
        for k, snr in enumerate(SNR_LEVELS):
            sp = emit(model, clean, snr, seed=k)
            worst = max(worst, abs(measured_snr(sigma, float(np.var(sp.patch.data.astype(np.float64)))) - snr))
    elapsed = time.perf_counter() - t0
    verdict(4, worst <= 1e-6 and elapsed < 30, f"max |SNR error| = {worst:.2e} dB over 3 models x 8 levels, {elapsed:.2f}s")


# ---------------------------------------------------------------- 5: noise correlation


def test_5_noise_correlation(verdict, desk_gan_run):
    generator, seconds = desk_gan_run
    clean = np.full((100, 28), 0.5) + np.linspace(0, 0.3, 28)
    lags = {}
    for tag in ("AWGN", "MIX", "MNM"):
        model = NoiseModel(tag, generator if tag == "MNM" else None)
        lags[tag] = lag1_autocorr(np.stack([emit(model, clean, 0.0, seed=s).patch.data for s in range(64)]), axis=-1)
    ok = abs(lags["AWGN"]) < 0.05 and abs(lags["MIX"]) < 0.05 and lags["MNM"] >= 0.3 and seconds <= 600
    verdict(5, ok, ", ".join(f"{k} lag-1={v:+.3f}" for k, v in lags.items()) + f", generator trained in {seconds:.0f}s")


# ---------------------------------------------------------------- 6, 7: denoising on correlated noise


@pytest.fixture(scope="module")
def denoising_runs(desk_generator, tmp_path_factory):
    """Harness runs (DnCNN, 3 models, SNR 0/5/10) for three seeds; returns rows and seconds."""
    rows, t0 = [], time.perf_counter()
    for seed in SEEDS:
        cfg = H.ExperimentConfig(seed=seed, output_dir=str(tmp_path_factory.mktemp(f"dn{seed}")),
                                 architectures=("dncnn",), snr_levels=DENOISE_SNRS, classification=False)
        rows += H.read_csv(H.run_experiment(cfg, generator=desk_generator) / "metrics.csv")
    return rows, time.perf_counter() - t0


def seed_mean(rows, model, snr, key):
    return float(np.mean([r[key] for r in rows if r["model"] == model and r["snr_db"] == snr]))


@pytest.mark.slow
def test_6_mnm_awgn_mix_ordering(verdict, denoising_runs):
    rows, seconds = denoising_runs
    n_patches = min(r["n_patches"] for r in rows)
    lines, ok = [], n_patches >= 50 and seconds <= 45 * 60
    for snr in DENOISE_SNRS:
        m, a, x = (seed_mean(rows, t, snr, "ssim_improvement") for t in ("MNM", "AWGN", "MIX"))
        ok &= m > a > x
        lines.append(f"{snr:g}dB MNM={m:+.4f} AWGN={a:+.4f} MIX={x:+.4f}")
    verdict(6, ok, "; ".join(lines) + f" ({n_patches} patches x {len(SEEDS)} seeds, {seconds / 60:.1f} min)")


@pytest.mark.slow
def test_7_mnm_improves_at_0db(verdict, denoising_runs):
    rows, _ = denoising_runs
    dp, ds = seed_mean(rows, "MNM", 0.0, "psnr_improvement"), seed_mean(rows, "MNM", 0.0, "ssim_improvement")
    verdict(7, dp > 0 and ds > 0, f"DnCNN(MNM) at 0 dB: psnr_improvement={dp:+.3f} dB, ssim_improvement={ds:+.4f}")


# ---------------------------------------------------------------- 8: classification


@pytest.fixture(scope="module")
def classification_runs(desk_generator, tmp_path_factory):
    recs = H.build_recordings(H.ExperimentConfig())
    actual, level = H.matched_snr(recs, SNR_LEVELS)
    reports, t0 = [], time.perf_counter()
    for seed in SEEDS:
        cfg = H.ExperimentConfig(seed=seed, output_dir=str(tmp_path_factory.mktemp(f"cls{seed}")), architectures=("dncnn",),
                                 snr_levels=(float(level),), noise_models=("MNM", "AWGN"), split_rates=(0.8,))
        reports += H.read_csv(H.run_experiment(cfg, generator=desk_generator) / "classification.csv")
    return reports, actual, level, time.perf_counter() - t0


@pytest.mark.slow
def test_8a_clean_accuracy(verdict):
    cfg = H.ExperimentConfig()
    recs = H.build_recordings(cfg)
    acc = [H.classify_eval({}, recs, cfg.classifier, 0.8, seed, use_clean=True).baseline_accuracy for seed in SEEDS]
    verdict("8a", min(acc) >= 0.95, f"clean-data accuracy per seed {acc}")


@pytest.mark.slow
def test_8b_identity_matches_noisy_baseline(verdict):
    cfg = H.ExperimentConfig()
    rep = H.classify_eval({"identity": None}, H.build_recordings(cfg), cfg.classifier, 0.8, seed=0)
    ok = rep.accuracy["identity"] == rep.baseline_accuracy
    verdict("8b", ok, f"identity accuracy {rep.accuracy['identity']} vs noisy baseline {rep.baseline_accuracy}")


@pytest.mark.slow
def test_8c_mnm_not_worse_than_awgn(verdict, classification_runs):
    rows, actual, level, seconds = classification_runs
    acc = {m: float(np.mean([r["accuracy"] for r in rows if r["model"] == m])) for m in ("MNM", "AWGN")}
    base = float(np.mean([r["baseline_accuracy"] for r in rows if r["model"] == "MNM"]))
    ok = acc["MNM"] >= acc["AWGN"] and seconds <= 30 * 60
    verdict("8c", ok, f"measured SNR {actual:.1f} dB -> level {level:g} dB; mean accuracy MNM={acc['MNM']:.3f} "
                      f"AWGN={acc['AWGN']:.3f} noisy={base:.3f} ({seconds / 60:.1f} min)")


# ---------------------------------------------------------------- 9: CLI determinism


RUN_TOML = """
seed = 5
activities = ["sit-down", "walk-to-fall"]
recordings_per_activity = 2
snr_levels = [0]
noise_models = ["AWGN", "MIX"]
architectures = ["dncnn"]
split_rates = [0.5]
pair_split_rate = 0.5
clean_patches_per_recording = 4

[denoiser]
epochs = 2
width = 4

[classifier]
epochs = 1
"""


def cli_pipeline(root):
    """Run every stage once under ``root``; returns the files written."""
    r = lambda *a: main([str(x) for x in a])
    steps = [
        ("simulate", "--activities", "sit-down,stand-up", "--seed", 1, "--out", root / "rec.mds", "--clean-out", root / "clean.mds"),
        ("clean-patches", "--activities", "sit-down,stand-up", "--recordings", 2, "--per-recording", 4, "--out", root / "c.mdp"),
        ("extract", root / "rec.mds", "--out", root / "noise.mdp"),
        ("train-gan", "--patches", root / "noise.mdp", "--epochs", 1, "--batch-size", 8, "--out", root / "gan"),
        ("gen-noise", "--model", "mnm", "--ckpt", root / "gan", "--snr", 5, "--count", 3, "--clean", root / "c.mdp", "--out", root / "g.mdp"),
        ("make-pairs", "--clean", root / "c.mdp", "--model", "awgn", "--snr", 0, "--split-rate", 0.5, "--out", root / "ds"),
        ("train-denoiser", "--dataset", root / "ds", "--epochs", 2, "--width", 4, "--budget", 0, "--out", root / "ckpt"),
        ("denoise", "--ckpt", root / "ckpt", "--in", root / "rec.mds", "--out", root / "den.mds"),
        ("evaluate", "--gt", root / "clean.mds", "--noisy", root / "rec.mds", "--denoised", root / "den.mds", "--out", root / "eval.json"),
        ("run", "--config", root / "exp.toml", "--output-dir", root / "exp"),
        ("render", "--results", root / "exp"),
    ]
    root.mkdir(parents=True)
    (root / "exp.toml").write_text(RUN_TOML)
    for step in steps:
        assert r(*step) == 0, step[0]
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_9_cli_rerun_is_bit_identical(verdict, tmp_path, monkeypatch):
    monkeypatch.delenv(H.OUTPUT_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    a = cli_pipeline(tmp_path / "run")
    shutil.rmtree(tmp_path / "run")
    b = cli_pipeline(tmp_path / "run")
    differ = sorted(k for k in a if a[k] != b.get(k)) + sorted(set(b) - set(a))
    verdict(9, not differ and len(a) > 10, f"{len(a)} files compared across two runs, differing: {differ or 'none'}")


# ---------------------------------------------------------------- 10: container round trip


def test_10_container_round_trip(verdict, tmp_path):
    rec = compose_recording([(template_for(ActivityLabel.from_name(n)), ActivityLabel.from_name(n)) for n in ACTIVITIES[:3]],
                            1.5, NaturalNoiseParams(), seed=10, rid="acc-10")
    spec = rec.to_spectrogram()
    write_mds(tmp_path / "r.mds", spec)
    back = read_mds(tmp_path / "r.mds")
    mds_ok = np.array_equal(back.data, spec.data) and back.data.dtype == spec.data.dtype and back.meta == spec.meta
    write_mds(tmp_path / "r2.mds", back)
    mds_ok &= (tmp_path / "r.mds").read_bytes() == (tmp_path / "r2.mds").read_bytes()

    rng = np.random.default_rng(10)
    patches = [NoisePatch(rng.random((100, 28)).astype(np.float32), "extracted", ("acc-10", 3, 14 * i)) for i in range(5)]
    meta = {"source": "acceptance", "snr_db": -5.0}
    write_mdp(tmp_path / "p.mdp", patches, meta)
    got, header = read_mdp(tmp_path / "p.mdp")
    mdp_ok = all(np.array_equal(g.data, p.data) and g.origin == p.origin and g.kind == p.kind for g, p in zip(got, patches))
    mdp_ok &= len(got) == len(patches) and header["meta"] == meta
    write_mdp(tmp_path / "p2.mdp", got, header["meta"])
    mdp_ok &= (tmp_path / "p.mdp").read_bytes() == (tmp_path / "p2.mdp").read_bytes()
    verdict(10, mds_ok and mdp_ok, f"MDS1 data+header exact={mds_ok}, MDP1 patches+header exact={mdp_ok}")
