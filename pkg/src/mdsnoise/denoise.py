"""Denoisers: residual DnCNN and direct-prediction CAE / UNet comparators."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .errors import ConfigurationError, ContractError, DimensionError, ParameterError, TrainingDiverged
from .spectrogram import PATCH_SHAPE, Spectrogram

log = logging.getLogger(__name__)

ARCHES = ("dncnn", "cae", "unet")
ARCH_TARGET = {"dncnn": "noise_patch", "cae": "clean", "unet": "clean"}
PARITY_BAND = 0.20
TILE_STRIDE = (50, 14)
CHECKPOINT_VERSION = 1


class DnCNN(nn.Module):
    """Conv+ReLU, (depth-2) x Conv+BN+ReLU, Conv; predicts the noise in its input."""

    def __init__(self, depth: int = 8, width: int = 64):
        super().__init__()
        if depth < 2:
            raise ParameterError("DnCNN depth must be >= 2")
        layers = [nn.Conv2d(1, width, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
        layers.append(nn.Conv2d(width, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class CAE(nn.Module):
    """Strided-conv encoder to a (25, 7) bottleneck and a mirrored transposed-conv decoder."""

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(1, w, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.decoder(self.encoder(x))


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Three-level encoder-decoder with skip connections (100x28 -> 50x14 -> 25x7)."""

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.enc1 = _double_conv(1, w)
        self.enc2 = _double_conv(w, 2 * w)
        self.mid = _double_conv(2 * w, 4 * w)
        self.pool = nn.MaxPool2d(2)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _double_conv(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _double_conv(2 * w, w)
        self.head = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        m = self.mid(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(m), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


def n_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def _parity_width(cls, reference: int) -> int:
    best = min(range(2, 129), key=lambda w: abs(n_params(cls(w)) - reference))
    return best


def build(arch: str, depth: int = 8, width: int = 64) -> nn.Module:
    """Construct an architecture; CAE/UNet widths are chosen to match the DnCNN parameter count."""
    if arch not in ARCHES:
        raise ParameterError(f"unknown architecture {arch!r}")
    ref = DnCNN(depth, width)
    if arch == "dncnn":
        return ref
    cls = CAE if arch == "cae" else UNet
    net = cls(_parity_width(cls, n_params(ref)))
    ratio = n_params(net) / n_params(ref)
    if abs(ratio - 1.0) > PARITY_BAND:
        raise ConfigurationError(f"{arch} has {ratio:.2f}x the DnCNN parameter count")
    return net


def residual_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1/(2N) * sum_i ||pred_i - target_i||_F**2`` over a batch of N."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).sum() / (2 * pred.shape[0])


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays])).unsqueeze(1)


def dncnn_loss(net: nn.Module, pairs) -> float:
    if any(p.target_kind != "noise_patch" for p in pairs):
        raise ContractError("DnCNN loss needs noise-patch targets")
    with torch.no_grad():
        return float(residual_loss(net(_stack([p.noisy for p in pairs])), _stack([p.target for p in pairs])))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 150
    batch_size: int = 32
    seed: int = 0
    time_budget_s: float | None = 300.0
    grad_clip: float | None = 1.0
    depth: int = 8
    width: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1 or self.depth < 2 or self.width < 1:
            raise ParameterError("training hyper-parameters must be positive")


@dataclass
class TrainedDenoiser:
    arch: str
    net: nn.Module
    config: TrainConfig
    loss_history: list[float] = field(default_factory=list)
    model_tag: str | None = None
    snr_db: float | None = None
    stopped_by_budget: bool = False

    @property
    def residual(self) -> bool:
        return self.arch == "dncnn"

    def denoise_patches(self, patches) -> np.ndarray:
        return denoise_patches(self, patches)


def train_denoiser(pairs, arch: str, cfg: TrainConfig = TrainConfig(), progress: bool = False) -> TrainedDenoiser:
    """Minimise the Frobenius objective against noise targets (dncnn) or clean targets (cae/unet).

    Stops after ``cfg.epochs`` or once an epoch ends past the wall-clock budget.
    """
    if arch not in ARCHES:
        raise ParameterError(f"unknown architecture {arch!r}")
    if not pairs:
        raise ParameterError("empty dataset")
    want = ARCH_TARGET[arch]
    if any(p.target_kind != want for p in pairs):
        raise ContractError(f"{arch} trains on {want!r} targets")
    tags = {p.model_tag for p in pairs}
    snrs = {p.snr_db for p in pairs}
    x_all, y_all = _stack([p.noisy for p in pairs]), _stack([p.target for p in pairs])

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        rng = torch.Generator().manual_seed(cfg.seed)
        net = build(arch, cfg.depth, cfg.width)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        out = TrainedDenoiser(arch, net, cfg, model_tag=tags.pop() if len(tags) == 1 else None,
                              snr_db=snrs.pop() if len(snrs) == 1 else None)
        n, bs = x_all.shape[0], cfg.batch_size
        start = time.monotonic()
        step = 0
        net.train()
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n, generator=rng)
            total = 0.0
            for b in range(0, n, bs):
                idx = perm[b : b + bs]
                if idx.numel() < 2 and n >= 2:
                    continue  # batch-norm needs more than one sample
                loss = residual_loss(net(x_all[idx]), y_all[idx])
                step += 1
                if not torch.isfinite(loss):
                    raise TrainingDiverged(step)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
                opt.step()
                total += float(loss.detach()) * 2 * idx.numel()
            out.loss_history.append(total / (2 * n))
            if progress:
                log.info("%s epoch %d/%d loss=%.5f", arch, epoch + 1, cfg.epochs, out.loss_history[-1])
            if cfg.time_budget_s is not None and time.monotonic() - start > cfg.time_budget_s:
                out.stopped_by_budget = epoch + 1 < cfg.epochs
                break
    net.eval()
    return out


def _run(denoiser: TrainedDenoiser, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    """Network estimate of the clean content of each (100, 28) window."""
    net = denoiser.net
    net.eval()
    outs = []
    with torch.no_grad():
        for b in range(0, len(windows), batch):
            x = torch.from_numpy(np.ascontiguousarray(windows[b : b + batch], dtype=np.float32)).unsqueeze(1)
            y = net(x)
            outs.append((x - y if denoiser.residual else y).squeeze(1).numpy())
    return np.concatenate(outs).astype(np.float64)


def denoise_patches(denoiser: TrainedDenoiser, patches) -> np.ndarray:
    arr = np.stack([np.asarray(getattr(p, "data", p), dtype=np.float64) for p in patches])
    if arr.shape[1:] != PATCH_SHAPE:
        raise DimensionError(f"patches must be {PATCH_SHAPE}")
    return np.clip(_run(denoiser, arr), 0.0, 1.0)


def tile_offsets(n: int, size: int, stride: int) -> list[int]:
    if n < size:
        raise DimensionError(f"extent {n} smaller than window {size}")
    offs = list(range(0, n - size + 1, stride))
    if offs[-1] + size < n:
        offs.append(n - size)
    return offs


def tile_windows(shape, stride=TILE_STRIDE) -> list[tuple[int, int]]:
    return [(f, t) for f in tile_offsets(shape[0], PATCH_SHAPE[0], stride[0]) for t in tile_offsets(shape[1], PATCH_SHAPE[1], stride[1])]


def apply(denoiser: TrainedDenoiser, spectrogram: Spectrogram | np.ndarray, stride=TILE_STRIDE):
    """Denoise a full spectrogram window by window and average the overlaps.

    A plain array in gives a plain array out.
    """
    data = np.asarray(getattr(spectrogram, "data", spectrogram), dtype=np.float64)
    if data.shape[0] < PATCH_SHAPE[0] or data.shape[1] < PATCH_SHAPE[1]:
        raise DimensionError(f"spectrogram {data.shape} smaller than one {PATCH_SHAPE} window")
    h, w = PATCH_SHAPE
    offsets = tile_windows(data.shape, stride)
    est = _run(denoiser, np.stack([data[f : f + h, t : t + w] for f, t in offsets]))
    acc = np.zeros_like(data)
    count = np.zeros_like(data)
    for (f, t), e in zip(offsets, est):
        acc[f : f + h, t : t + w] += e
        count[f : f + h, t : t + w] += 1.0
    out = np.clip(acc / count, 0.0, 1.0)
    return spectrogram.with_data(out) if isinstance(spectrogram, Spectrogram) else out


def save_denoiser(den: TrainedDenoiser, directory) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "mdsnoise-denoiser",
        "version": CHECKPOINT_VERSION,
        "arch": den.arch,
        "config": asdict(den.config),
        "loss_history": den.loss_history,
        "model_tag": den.model_tag,
        "snr_db": den.snr_db,
        "stopped_by_budget": den.stopped_by_budget,
    }
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    state = {k: v.detach().contiguous() for k, v in den.net.state_dict().items()}
    save_file(state, str(path / "params.safetensors"))
    return path


def load_denoiser(directory) -> TrainedDenoiser:
    path = Path(directory)
    if not (path / "config.json").exists():
        raise ConfigurationError(f"no denoiser checkpoint at {path}")
    meta = json.loads((path / "config.json").read_text())
    if meta.get("format") != "mdsnoise-denoiser" or meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path} is not a version-{CHECKPOINT_VERSION} denoiser checkpoint")
    cfg = TrainConfig(**meta["config"])
    net = build(meta["arch"], cfg.depth, cfg.width)
    net.load_state_dict(load_file(str(path / "params.safetensors")))
    net.eval()
    return TrainedDenoiser(meta["arch"], net, cfg, meta["loss_history"], meta["model_tag"], meta["snr_db"], meta["stopped_by_budget"])
