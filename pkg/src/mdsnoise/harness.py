"""Config-driven experiment runner: data, GAN, pairs, denoisers, metric and classification tables."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import denoise as dn
from . import gan
from .errors import ConfigurationError, ParameterError, ProtocolError
from .extract import IdleDetectorConfig, harvest
from .metrics import SsimParams, improvement
from .noise_models import MODEL_TAGS, SNR_LEVELS, NoiseModel
from .pairs import PAPER_SPLIT_RATES, PatchPool, make_pairs
from .sim import MeasuredRecording, NaturalNoiseParams, compose_recording, derive_seeds, template_for
from .spectrogram import ACTIVITIES, PATCH_SHAPE, ActivityLabel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

OUTPUT_ENV = "MDSNOISE_OUTPUT_DIR"
CLASSIFIER_INPUT = (128, 128)
METRIC_FIELDS = (
    "arch", "model", "snr_db", "n_patches", "psnr_noisy", "psnr_denoised", "ssim_noisy", "ssim_denoised",
    "psnr_improvement", "ssim_improvement", "seed", "config_hash", "stage",
)
CLASS_FIELDS = ("arch", "model", "snr_db", "split_rate", "accuracy", "baseline_accuracy", "seed", "config_hash", "stage")


# ---------------------------------------------------------------- configuration


@dataclass
class ClassifierConfig:
    epochs: int = 25
    batch_size: int = 16
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ParameterError("classifier hyper-parameters must be positive")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "results"
    activities: tuple[str, ...] = ACTIVITIES
    recordings_per_activity: int = 8
    idle_gap: float = 2.5
    snr_levels: tuple[float, ...] = SNR_LEVELS
    noise_models: tuple[str, ...] = MODEL_TAGS
    architectures: tuple[str, ...] = dn.ARCHES
    split_rates: tuple[float, ...] = PAPER_SPLIT_RATES
    pair_split_rate: float = 0.8
    clean_patches_per_recording: int = 8
    test_noise_draws: int = 1
    residual: str = "effective"
    classification: bool = True
    noise: NaturalNoiseParams = field(default_factory=NaturalNoiseParams)
    gan: gan.GanConfig = field(default_factory=lambda: gan.GanConfig(batch_size=32, learning_rate=2e-4, epochs=3))
    denoiser: dn.TrainConfig = field(default_factory=lambda: dn.TrainConfig(learning_rate=1e-3, epochs=25, width=16, time_budget_s=None))
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        for name in self.activities:
            ActivityLabel.from_name(name)
        for tag in self.noise_models:
            NoiseModel(tag, None) if tag.upper() != "MNM" else None
        for arch in self.architectures:
            if arch not in dn.ARCHES:
                raise ConfigurationError(f"unknown architecture {arch!r}")
        if self.recordings_per_activity < 2:
            raise ConfigurationError("need at least two recordings per activity to split")
        if self.residual not in ("unclipped", "effective"):
            raise ConfigurationError(f"unknown residual mode {self.residual!r}")
        if not 0 < self.pair_split_rate < 1 or any(not 0 < r < 1 for r in self.split_rates):
            raise ConfigurationError("split rates must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output_dir")
        return json.loads(json.dumps(d))  # tuples -> lists, canonical types

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"noise": NaturalNoiseParams, "gan": gan.GanConfig, "denoiser": dn.TrainConfig, "classifier": ClassifierConfig}


def _coerce(base, values: dict):
    """Override fields of the default section ``base``; unknown keys are errors."""
    known = {f.name for f in dataclasses.fields(base)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown {type(base).__name__} keys: {sorted(unknown)}")
    return dataclasses.replace(base, **{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    defaults = ExperimentConfig()
    sections = {k: _coerce(getattr(defaults, k), data.pop(k)) for k in _SECTIONS if k in data}
    return ExperimentConfig(**{**_coerce_top(data), **sections})


def _coerce_top(data: dict) -> dict:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}


def load_config(path) -> ExperimentConfig:
    """Read a TOML config; ``$MDSNOISE_OUTPUT_DIR`` overrides ``output_dir``."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    cfg = config_from_dict(data)
    if os.environ.get(OUTPUT_ENV):
        cfg.output_dir = os.environ[OUTPUT_ENV]
    return cfg


# ---------------------------------------------------------------- data


def build_recordings(cfg: ExperimentConfig) -> list[MeasuredRecording]:
    """One single-activity recording (idle, activity, idle) per (activity, repeat)."""
    seeds = derive_seeds(cfg.seed, len(cfg.activities) * cfg.recordings_per_activity)
    recs, k = [], 0
    for name in cfg.activities:
        label = ActivityLabel.from_name(name)
        for r in range(cfg.recordings_per_activity):
            recs.append(compose_recording([(template_for(label), label)], cfg.idle_gap, cfg.noise, seeds[k], rid=f"{name}-{r:03d}"))
            k += 1
    return recs


def activity_segment(rec: MeasuredRecording, clean: bool = False) -> np.ndarray:
    a, b, _ = rec.activity_intervals[0]
    spec = rec.spectrogram
    src = rec.clean if clean else spec.data
    return np.asarray(src[:, spec.column(a) : spec.column(b)], dtype=np.float64)


def recording_label(rec: MeasuredRecording) -> int:
    return rec.activity_intervals[0][2].class_id


def clean_patches(rec: MeasuredRecording, count: int, seed: int, min_var: float = 1e-3) -> list[np.ndarray]:
    """Random (100, 28) windows of a recording's clean activity segment with visible content."""
    seg = activity_segment(rec, clean=True)
    h, w = PATCH_SHAPE
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(50 * count):
        f = int(rng.integers(0, seg.shape[0] - h + 1))
        t = int(rng.integers(0, seg.shape[1] - w + 1))
        win = seg[f : f + h, t : t + w]
        if win.var() > min_var:
            out.append(win.copy())
            if len(out) == count:
                break
    return out


def split_recordings(recs: list[MeasuredRecording], rate: float, seed: int) -> tuple[list[int], list[int]]:
    """Per-class split of recording indices; every class keeps >= 1 on each side."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(recs):
        by_class.setdefault(recording_label(r), []).append(i)
    for cls in sorted(by_class):
        idx = by_class[cls]
        if len(idx) < 2:
            raise ProtocolError(f"class {cls} has fewer than two recordings")
        n_train = min(max(int(round(rate * len(idx))), 1), len(idx) - 1)
        perm = rng.permutation(len(idx))
        train += [idx[k] for k in perm[:n_train]]
        test += [idx[k] for k in perm[n_train:]]
    return sorted(train), sorted(test)


def _patch_sets(recs, idx, cfg: ExperimentConfig, salt: int):
    seeds = derive_seeds(cfg.seed + salt, len(recs))
    patches, sources = [], []
    for i in idx:
        for j, p in enumerate(clean_patches(recs[i], cfg.clean_patches_per_recording, seeds[i])):
            patches.append(p)
            sources.append(f"{recs[i].rid}/{j}")
    return patches, sources


# ---------------------------------------------------------------- evaluation


def evaluate_denoiser(den, test_pairs, params: SsimParams = SsimParams()) -> dict:
    """Mean before/after metrics over test pairs (``den=None`` is the identity)."""
    noisy = [p.noisy for p in test_pairs]
    out = np.stack(noisy) if den is None else dn.denoise_patches(den, noisy)
    reps = [improvement(p.clean, p.noisy, o, params) for p, o in zip(test_pairs, out)]
    keys = ("psnr_noisy", "psnr_denoised", "ssim_noisy", "ssim_denoised", "psnr_improvement", "ssim_improvement")
    row = {k: float(np.mean([getattr(r, k) for r in reps])) for k in keys}
    row["n_patches"] = len(reps)
    return row


class Classifier(nn.Module):
    """Reduced VGG: four (conv-BN-ReLU x2, pool) blocks of widths 16/32/64/64 and two dense layers."""

    def __init__(self, n_classes: int = len(ACTIVITIES), widths=(16, 32, 64, 64), hidden: int = 64):
        super().__init__()
        layers, cin = [], 1
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
                       nn.Conv2d(w, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            cin = w
        self.features = nn.Sequential(*layers)
        side = CLASSIFIER_INPUT[0] // 2 ** len(widths), CLASSIFIER_INPUT[1] // 2 ** len(widths)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(cin * side[0] * side[1], hidden), nn.ReLU(inplace=True), nn.Linear(hidden, n_classes))

    def forward(self, x):
        return self.head(self.features(x))

    def predict_proba(self, x):
        return torch.softmax(self.forward(x), dim=1)


def resize(data: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))[None, None]
    return F.interpolate(x, size=CLASSIFIER_INPUT, mode="bilinear", align_corners=False)[0]


def train_classifier(x: torch.Tensor, y: torch.Tensor, cfg: ClassifierConfig, seed: int, n_classes: int = len(ACTIVITIES)) -> Classifier:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        net = Classifier(n_classes)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        net.train()
        for _ in range(cfg.epochs):
            perm = torch.randperm(len(x), generator=gen)
            for b in range(0, len(x), cfg.batch_size):
                idx = perm[b : b + cfg.batch_size]
                loss = F.cross_entropy(net(x[idx]), y[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
    net.eval()
    return net


@dataclass
class ClassificationReport:
    split_rate: float
    seed: int
    baseline_accuracy: float
    accuracy: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)


def _accuracy(net, x, y, n_classes) -> tuple[float, list[list[int]]]:
    with torch.no_grad():
        pred = net(x).argmax(dim=1)
    cm = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(y.tolist(), pred.tolist()):
        cm[t, p] += 1
    return float((pred == y).float().mean()), cm.tolist()


def classify_eval(denoisers: dict, recordings, cfg: ClassifierConfig, split_rate: float, seed: int,
                  use_clean: bool = False) -> ClassificationReport:
    """Train and test a classifier on each denoised data path plus the noisy baseline.

    ``denoisers`` maps a key to a trained denoiser or ``None`` (identity).
    Every classifier shares the same split and initialisation seed.
    """
    train_idx, test_idx = split_recordings(recordings, split_rate, seed)
    labels = torch.tensor([recording_label(r) for r in recordings])
    n_classes = len(ACTIVITIES)
    if set(labels[test_idx].tolist()) != set(labels.tolist()):
        raise ProtocolError("a class has no test samples")
    segs = [activity_segment(r, clean=use_clean) for r in recordings]

    def path(den):
        if den is None:
            data = segs
        else:
            data = [dn.apply(den, s) for s in segs]
        x = torch.stack([resize(d) for d in data])
        net = train_classifier(x[train_idx], labels[train_idx], cfg, seed, n_classes)
        return _accuracy(net, x[test_idx], labels[test_idx], n_classes)

    base_acc, base_cm = path(None)
    rep = ClassificationReport(split_rate, seed, base_acc)
    rep.confusion["baseline"] = base_cm
    for key, den in denoisers.items():
        acc, cm = path(den)
        rep.accuracy[key] = acc
        rep.confusion[key] = cm
    return rep


def matched_snr(recordings, levels) -> tuple[float, float]:
    """Actual activity-segment SNR of the recordings and the nearest configured level."""
    sig = np.mean([activity_segment(r, clean=True).var() for r in recordings])
    noise = np.mean([(activity_segment(r) - activity_segment(r, clean=True)).var() for r in recordings])
    actual = 10 * math.log10(sig / noise)
    return actual, min(levels, key=lambda s: abs(s - actual))


# ---------------------------------------------------------------- driver


def _write_csv(path: Path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})


def read_csv(path) -> list[dict]:
    """Parse a report CSV back, converting numeric columns to float/int."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out = {}
            for k, v in r.items():
                try:
                    out[k] = int(v)
                except ValueError:
                    try:
                        out[k] = float(v)
                    except ValueError:
                        out[k] = v
            rows.append(out)
    return rows


def run_experiment(cfg: ExperimentConfig, progress: bool = False, generator: gan.TrainedGenerator | None = None) -> Path:
    """Run every stage; on failure keep partial results, write ``failure.json`` and re-raise.

    A pre-trained ``generator`` skips GAN training (it is still saved under ``gan/``).
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    (out / "config.json").write_text(json.dumps({"config_hash": h, "config": cfg.to_dict()}, indent=2, sort_keys=True))
    stage = "setup"
    metric_rows: list[dict] = []
    class_rows: list[dict] = []
    try:
        stage = "simulate"
        recs = build_recordings(cfg)
        train_idx, test_idx = split_recordings(recs, cfg.pair_split_rate, cfg.seed)

        stage = "train-gan"
        if "MNM" in [t.upper() for t in cfg.noise_models]:
            if generator is None:
                noise_train = harvest([recs[i] for i in train_idx], IdleDetectorConfig())
                generator = gan.train(noise_train, cfg.gan, progress=progress)
            gan.save_generator(generator, out / "gan")

        stage = "make-pairs"
        train_clean, train_src = _patch_sets(recs, train_idx, cfg, 1)
        test_clean, test_src = _patch_sets(recs, test_idx, cfg, 2)
        pool = PatchPool(harvest([recs[i] for i in test_idx], IdleDetectorConfig()), tag="REAL")

        denoisers: dict = {}
        dn_cfg = dataclasses.replace(cfg.denoiser, seed=cfg.denoiser.seed + cfg.seed)
        for s_idx, snr in enumerate(cfg.snr_levels):
            test_pairs, _ = make_pairs(test_clean, pool, [snr], cfg.test_noise_draws, cfg.seed + 7919, "clean", test_src)
            for tag in cfg.noise_models:
                model = NoiseModel(tag, generator if tag.upper() in ("MNM", "MN") else None)
                for arch in cfg.architectures:
                    stage = f"train-denoiser:{arch}:{model.tag}:{snr:g}"
                    kind = dn.ARCH_TARGET[arch]
                    pairs, _ = make_pairs(train_clean, model, [snr], 1, cfg.seed, kind, train_src, cfg.residual)
                    den = dn.train_denoiser(pairs, arch, dn_cfg, progress=progress)
                    dn.save_denoiser(den, out / "denoisers" / f"{arch}-{model.tag}-{snr:g}")
                    denoisers[(arch, model.tag, float(snr))] = den
                    stage = f"evaluate:{arch}:{model.tag}:{snr:g}"
                    row = {"arch": arch, "model": model.tag, "snr_db": float(snr), "seed": cfg.seed, "config_hash": h, "stage": "evaluate"}
                    row.update(evaluate_denoiser(den, test_pairs))
                    metric_rows.append(row)
                    if progress:
                        log.info("%s %s %g dB: dSSIM=%.4f dPSNR=%.3f", arch, model.tag, snr, row["ssim_improvement"], row["psnr_improvement"])
        _write_csv(out / "metrics.csv", METRIC_FIELDS, metric_rows)

        if cfg.classification:
            for rate in cfg.split_rates:
                stage = f"classify:{rate:g}"
                keys = {f"{a}|{m}|{s!r}": d for (a, m, s), d in denoisers.items()}
                rep = classify_eval(keys, recs, cfg.classifier, rate, cfg.seed)
                for key, acc in rep.accuracy.items():
                    a, m, s = key.split("|")
                    class_rows.append({"arch": a, "model": m, "snr_db": float(s), "split_rate": rate, "accuracy": acc,
                                       "baseline_accuracy": rep.baseline_accuracy, "seed": cfg.seed, "config_hash": h, "stage": "classify"})
                (out / f"confusion-{rate:g}.json").write_text(json.dumps(rep.confusion, indent=1, sort_keys=True))
            actual, level = matched_snr(recs, cfg.snr_levels)
            (out / "noise_level.json").write_text(json.dumps({"actual_snr_db": actual, "matched_level": level}, sort_keys=True))
            _write_csv(out / "classification.csv", CLASS_FIELDS, class_rows)
    except Exception as exc:
        if metric_rows:
            _write_csv(out / "metrics.csv", METRIC_FIELDS, metric_rows)
        if class_rows:
            _write_csv(out / "classification.csv", CLASS_FIELDS, class_rows)
        (out / "failure.json").write_text(json.dumps(
            {"config_hash": h, "stage": stage, "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()},
            indent=2, sort_keys=True))
        raise
    return out


def render_reports(results_dir) -> dict:
    """Write wide tables (CSV) and accuracy-vs-SNR figures; returns what was written."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    res = Path(results_dir)
    written = {"tables": [], "figures": {}, "notice": None}
    metrics_path, class_path = res / "metrics.csv", res / "classification.csv"
    metric_rows = read_csv(metrics_path) if metrics_path.exists() else []
    class_rows = read_csv(class_path) if class_path.exists() else []
    if not metric_rows and not class_rows:
        written["notice"] = f"no results in {res}"
        (res / "REPORT_EMPTY.txt").write_text(written["notice"] + "\n")
        return written

    if metric_rows:
        snrs = sorted({r["snr_db"] for r in metric_rows})
        for metric in ("ssim_improvement", "psnr_improvement"):
            cells = {(r["arch"], r["model"], r["snr_db"]): r[metric] for r in metric_rows}
            rows = []
            for arch in dict.fromkeys(r["arch"] for r in metric_rows):
                for model in dict.fromkeys(r["model"] for r in metric_rows):
                    row = {"arch": arch, "model": model}
                    row.update({f"{s:g}": cells.get((arch, model, s), "") for s in snrs})
                    rows.append(row)
            path = res / f"table_{metric}.csv"
            _write_csv(path, ["arch", "model"] + [f"{s:g}" for s in snrs], rows)
            written["tables"].append(path)

    if class_rows:
        for rate in dict.fromkeys(r["split_rate"] for r in class_rows):
            for arch in dict.fromkeys(r["arch"] for r in class_rows):
                sub = [r for r in class_rows if r["split_rate"] == rate and r["arch"] == arch]
                if not sub:
                    continue
                fig, ax = plt.subplots(figsize=(5, 3.5))
                for model in dict.fromkeys(r["model"] for r in sub):
                    pts = sorted((r["snr_db"], r["accuracy"]) for r in sub if r["model"] == model)
                    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=model)
                ax.axhline(sub[0]["baseline_accuracy"], color="k", linestyle="--", label="noisy baseline")
                ax.set_xlabel("training SNR (dB)")
                ax.set_ylabel("accuracy")
                ax.set_title(f"{arch}, split {rate:g}")
                ax.legend()
                fig.tight_layout()
                path = res / f"accuracy_{arch}_{rate:g}.png"
                fig.savefig(path, metadata={"Software": None})
                written["figures"][path] = len(ax.get_lines())
                plt.close(fig)
    return written
