"""WGAN-GP noise model: a generator that maps 100-d latents to (100, 28) noise patches."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .errors import ConfigurationError, DimensionError, ParameterError, TrainingDiverged
from .spectrogram import PATCH_SHAPE, NoisePatch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.2

# (channels, kernel, stride, (H, W) out) per transposed conv, as listed for the generator
GEN_RESHAPE = (128, 25, 7)
GEN_DECONVS = (
    (128, 5, 1, (25, 7)),
    (64, 3, 1, (25, 7)),
    (64, 5, 2, (50, 14)),
    (1, 5, 2, (100, 28)),
)
CRITIC_CONVS = (
    (64, 5, 2, (50, 14)),
    (128, 5, 2, (25, 7)),
)
CRITIC_DENSE = (256, 64, 1)


def solve_conv_padding(n_in, n_out, kernel: int, stride: int) -> int:
    """Smallest zero padding giving ``n_out`` from ``n_in`` in every dimension."""
    for pad in range(kernel):
        if all((i + 2 * pad - kernel) // stride + 1 == o for i, o in zip(n_in, n_out)):
            return pad
    raise DimensionError(f"no padding maps {n_in} to {n_out} with k={kernel}, s={stride}")


def solve_transpose_padding(n_in, n_out, kernel: int, stride: int) -> tuple[int, int]:
    """(padding, output_padding) for a transposed conv mapping ``n_in`` to ``n_out``."""
    for pad in range(kernel):
        for extra in range(stride):
            if all((i - 1) * stride - 2 * pad + kernel + extra == o for i, o in zip(n_in, n_out)):
                return pad, extra
    raise DimensionError(f"no padding maps {n_in} to {n_out} with k={kernel}, s={stride}")


def _hwc(t: torch.Tensor) -> tuple[int, ...]:
    """Per-sample shape in the height-width-channel order of the layer tables."""
    shape = tuple(t.shape[1:])
    return shape if len(shape) == 1 else (shape[1], shape[2], shape[0])


class Generator(nn.Module):
    def __init__(self, latent_dim: int = 100):
        super().__init__()
        c, h, w = GEN_RESHAPE
        self.latent_dim = latent_dim
        self.project = nn.Sequential(
            nn.Linear(latent_dim, c * h * w),
            nn.BatchNorm1d(c * h * w),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        blocks = []
        in_ch, size = c, (h, w)
        for i, (out_ch, k, s, out_size) in enumerate(GEN_DECONVS):
            pad, extra = solve_transpose_padding(size, out_size, k, s)
            layers = [nn.ConvTranspose2d(in_ch, out_ch, k, s, pad, output_padding=extra)]
            if i < len(GEN_DECONVS) - 1:
                layers += [nn.BatchNorm2d(out_ch), nn.LeakyReLU(LEAKY_SLOPE)]
            blocks.append(nn.Sequential(*layers))
            in_ch, size = out_ch, out_size
        self.deconvs = nn.ModuleList(blocks)

    def forward(self, z: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        x = self.project(z)
        if trace is not None:
            trace.append(_hwc(x))
        x = x.view(-1, *GEN_RESHAPE)
        if trace is not None:
            trace.append(_hwc(x))
        for block in self.deconvs:
            x = block(x)
            if trace is not None:
                trace.append(_hwc(x))
        return x


class Critic(nn.Module):
    def __init__(self, final_sigmoid: bool = False, dropout: float = 0.3):
        super().__init__()
        convs = []
        in_ch, size = 1, PATCH_SHAPE
        for out_ch, k, s, out_size in CRITIC_CONVS:
            pad = solve_conv_padding(size, out_size, k, s)
            convs.append(nn.Sequential(nn.Conv2d(in_ch, out_ch, k, s, pad), nn.LeakyReLU(LEAKY_SLOPE), nn.Dropout(dropout)))
            in_ch, size = out_ch, out_size
        self.convs = nn.ModuleList(convs)
        n_flat = in_ch * size[0] * size[1]
        dense = []
        for i, width in enumerate(CRITIC_DENSE):
            layers = [nn.Linear(n_flat, width)]
            if i < len(CRITIC_DENSE) - 1:
                layers.append(nn.ReLU())
            elif final_sigmoid:
                layers.append(nn.Sigmoid())
            dense.append(nn.Sequential(*layers))
            n_flat = width
        self.dense = nn.ModuleList(dense)
        self.final_sigmoid = final_sigmoid

    def forward(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        for block in self.convs:
            x = block(x)
            if trace is not None:
                trace.append(_hwc(x))
        x = x.flatten(1)
        if trace is not None:
            trace.append(_hwc(x))
        for block in self.dense:
            x = block(x)
            if trace is not None:
                trace.append(_hwc(x))
        return x


def shape_trace(module: nn.Module, x: torch.Tensor) -> list[tuple[int, ...]]:
    trace: list = []
    was_training = module.training
    module.eval()
    with torch.no_grad():
        module(x, trace=trace)
    module.train(was_training)
    return trace


def interpolate(real: torch.Tensor, fake: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
    """Points on straight lines between paired real and fake samples, one uniform weight per sample."""
    eps = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=rng, dtype=real.dtype)
    return eps * real + (1 - eps) * fake


def critic_gradient_norms(critic, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        out = critic(x)
        if not out.requires_grad:
            return torch.zeros(x.shape[0], dtype=x.dtype)
        (grads,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph, allow_unused=True)
    if grads is None:
        return torch.zeros(x.shape[0], dtype=x.dtype)
    return grads.flatten(1).norm(2, dim=1)


def critic_loss(real, fake, interpolates, critic, gp_lambda: float = 10.0):
    """Critic objective ``E[D(fake)] - E[D(real)] + lambda * GP``.

    Returns ``(loss, gp_term)`` as scalar tensors; ``gp_term`` is the
    unweighted mean of ``(||grad D(x_hat)|| - 1)**2``.
    """
    if real.shape != fake.shape or real.shape != interpolates.shape:
        raise DimensionError(f"batch shapes differ: {tuple(real.shape)}, {tuple(fake.shape)}, {tuple(interpolates.shape)}")
    norms = critic_gradient_norms(critic, interpolates, create_graph=True)
    gp = ((norms - 1.0) ** 2).mean()
    loss = critic(fake).mean() - critic(real).mean() + gp_lambda * gp
    return loss, gp


@dataclass
class GanConfig:
    latent_dim: int = 100
    gp_lambda: float = 10.0
    critic_steps_per_gen_step: int = 5
    learning_rate: float = 5e-5
    rmsprop_alpha: float = 0.99
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    critic_final_sigmoid: bool = False
    standardize: bool = True

    def __post_init__(self):
        if self.latent_dim < 1 or self.batch_size < 1 or self.critic_steps_per_gen_step < 1:
            raise ParameterError("latent_dim, batch_size and critic steps must be positive")
        if self.gp_lambda < 0 or self.learning_rate <= 0 or self.epochs < 0:
            raise ParameterError("gp_lambda, learning_rate and epochs must be non-negative")


@dataclass
class TrainedGenerator:
    generator: Generator
    config: GanConfig
    history: list[dict] = field(default_factory=list)
    epoch_stats: list[dict] = field(default_factory=list)
    data_mean: float = 0.0
    data_std: float = 1.0

    def sample(self, count: int, seed: int) -> list[NoisePatch]:
        return sample(self, count, seed)


def _as_tensor(patches) -> torch.Tensor:
    arr = np.stack([np.asarray(p.data if isinstance(p, NoisePatch) else p, dtype=np.float32) for p in patches])
    if arr.shape[1:] != PATCH_SHAPE:
        raise DimensionError(f"patches must be {PATCH_SHAPE}, got {arr.shape[1:]}")
    return torch.from_numpy(arr).unsqueeze(1)


def _finite(value: torch.Tensor, step: int, what: str) -> float:
    v = float(value.detach())
    if not np.isfinite(v):
        raise TrainingDiverged(step, what)
    return v


def train(real_patches, cfg: GanConfig = GanConfig(), progress: bool = False) -> TrainedGenerator:
    """Alternate ``critic_steps_per_gen_step`` critic updates with one generator update.

    One epoch is one shuffled pass of the critic over the real patches
    (incomplete final batches are dropped).
    """
    data = _as_tensor(real_patches)
    if data.shape[0] < cfg.batch_size:
        raise ParameterError(f"need at least batch_size={cfg.batch_size} patches, got {data.shape[0]}")
    mean, std = (float(data.mean()), float(data.std())) if cfg.standardize else (0.0, 1.0)
    std = std if std > 0 else 1.0
    data = (data - mean) / std

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        rng = torch.Generator().manual_seed(cfg.seed)
        gen = Generator(cfg.latent_dim)
        critic = Critic(cfg.critic_final_sigmoid)
        opt_g = torch.optim.RMSprop(gen.parameters(), lr=cfg.learning_rate, alpha=cfg.rmsprop_alpha)
        opt_d = torch.optim.RMSprop(critic.parameters(), lr=cfg.learning_rate, alpha=cfg.rmsprop_alpha)
        probe_z = torch.randn(256, cfg.latent_dim, generator=rng)
        trained = TrainedGenerator(gen, cfg, data_mean=mean, data_std=std)

        bs, n = cfg.batch_size, data.shape[0]
        step = 0
        gen_loss = float("nan")
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n, generator=rng)
            for b in range(n // bs):
                real = data[perm[b * bs : (b + 1) * bs]]
                z = torch.randn(bs, cfg.latent_dim, generator=rng)
                with torch.no_grad():
                    fake = gen(z)
                x_hat = interpolate(real, fake, rng)
                loss, gp = critic_loss(real, fake, x_hat, critic, cfg.gp_lambda)
                opt_d.zero_grad(set_to_none=True)
                loss.backward()
                opt_d.step()
                step += 1
                record = {"step": step, "epoch": epoch + 1, "critic_loss": _finite(loss, step, "critic loss"), "gp": float(gp.detach())}
                if step % cfg.critic_steps_per_gen_step == 0:
                    z = torch.randn(bs, cfg.latent_dim, generator=rng)
                    g_loss = -critic(gen(z)).mean()
                    opt_g.zero_grad(set_to_none=True)
                    g_loss.backward()
                    opt_g.step()
                    gen_loss = _finite(g_loss, step, "generator loss")
                record["gen_loss"] = gen_loss
                trained.history.append(record)
            trained.epoch_stats.append({"epoch": epoch + 1, **_probe(trained, probe_z)})
            if progress:
                last = trained.history[-1] if trained.history else {}
                log.info("gan epoch %d/%d critic=%.4f gp=%.4f gen=%.4f", epoch + 1, cfg.epochs,
                         last.get("critic_loss", float("nan")), last.get("gp", float("nan")), gen_loss)
    gen.eval()
    return trained


def _probe(trained: TrainedGenerator, z: torch.Tensor) -> dict:
    out = _generate(trained, z)
    centred = out - out.mean(axis=(1, 2), keepdims=True)
    num = (centred[:, :, 1:] * centred[:, :, :-1]).sum()
    den = (centred**2).sum()
    return {
        "mean": float(out.mean()),
        "std": float(out.std()),
        "lag1_time": float(num / den) if den > 0 else 0.0,
    }


def _generate(trained: TrainedGenerator, z: torch.Tensor) -> np.ndarray:
    gen = trained.generator
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        out = gen(z).squeeze(1).double().numpy()
    gen.train(was_training)
    return out * trained.data_std + trained.data_mean


def sample(trained: TrainedGenerator, count: int, seed: int) -> list[NoisePatch]:
    """Draw ``count`` patches with batch-norm in inference mode; deterministic in ``seed``."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    rng = torch.Generator().manual_seed(int(seed))
    z = torch.randn(count, trained.config.latent_dim, generator=rng)
    out = _generate(trained, z)
    return [NoisePatch(p, kind="generated", origin="generated") for p in out]


def save_generator(trained: TrainedGenerator, directory) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "mdsnoise-generator",
        "version": CHECKPOINT_VERSION,
        "config": asdict(trained.config),
        "data_mean": trained.data_mean,
        "data_std": trained.data_std,
    }
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    (path / "history.json").write_text(json.dumps({"steps": trained.history, "epochs": trained.epoch_stats}, sort_keys=True))
    state = {k: v.detach().contiguous() for k, v in trained.generator.state_dict().items()}
    save_file(state, str(path / "params.safetensors"))
    return path


def load_generator(directory) -> TrainedGenerator:
    path = Path(directory)
    if not (path / "config.json").exists():
        raise ConfigurationError(f"no generator checkpoint at {path}")
    meta = json.loads((path / "config.json").read_text())
    if meta.get("format") != "mdsnoise-generator" or meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path} is not a version-{CHECKPOINT_VERSION} generator checkpoint")
    cfg = GanConfig(**meta["config"])
    gen = Generator(cfg.latent_dim)
    gen.load_state_dict(load_file(str(path / "params.safetensors")))
    gen.eval()
    hist = json.loads((path / "history.json").read_text()) if (path / "history.json").exists() else {}
    return TrainedGenerator(gen, cfg, hist.get("steps", []), hist.get("epochs", []), meta["data_mean"], meta["data_std"])
