"""Training/testing pair construction and source-level splits."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParameterError, SplitError
from .formats import read_mdp, write_mdp
from .noise_models import NoiseModel, ScaledPatch, emit, scale_to_snr
from .spectrogram import PATCH_SHAPE, NoisePatch

TARGET_KINDS = ("noise_patch", "clean")
PAPER_SPLIT_RATES = (0.8, 0.7, 0.6)


@dataclass
class TrainingPair:
    noisy: np.ndarray
    target: np.ndarray
    target_kind: str
    snr_db: float
    model_tag: str
    provenance: tuple[str, int]
    clean: np.ndarray | None = None


@dataclass
class DatasetManifest:
    pair_count: int
    seed: int
    config_hash: str
    config: dict
    provenance: list[dict] = field(default_factory=list)
    splits: dict | None = None

    @property
    def source_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for p in self.provenance:
            seen.setdefault(p["source_id"], None)
        return list(seen)


class PatchPool:
    """Draws real (e.g. extracted) noise patches and scales them like a noise model."""

    def __init__(self, patches, tag: str = "REAL"):
        self.patches = [np.asarray(getattr(p, "data", p), dtype=np.float64) for p in patches]
        if not self.patches:
            raise ParameterError("empty patch pool")
        self.tag = tag

    def emit(self, clean: np.ndarray, snr_db: float, seed: int) -> ScaledPatch:
        idx = int(np.random.default_rng(seed).integers(len(self.patches)))
        return scale_to_snr(self.patches[idx], clean, snr_db, kind="extracted", origin=(self.tag, 0, idx))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.patches:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def _model_fingerprint(model) -> str:
    if isinstance(model, PatchPool):
        return model.fingerprint()
    if model.generator is None:
        return ""
    h = hashlib.sha256()
    for k, v in sorted(model.generator.generator.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    h.update(repr((model.generator.data_mean, model.generator.data_std)).encode())
    return h.hexdigest()


def pair_seed(seed: int, clean_index: int, snr_index: int, draw: int) -> int:
    return int(np.random.SeedSequence([int(seed), clean_index, snr_index, draw]).generate_state(1)[0])


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def make_pairs(
    clean_patches,
    model: NoiseModel | PatchPool,
    snr_levels,
    n_per_clean: int = 1,
    seed: int = 0,
    target_kind: str = "noise_patch",
    source_ids: list[str] | None = None,
    residual: str = "unclipped",
) -> tuple[list[TrainingPair], DatasetManifest]:
    """Add ``n_per_clean`` noise draws per SNR level to every clean patch.

    ``noisy = clip01(clean + scaled_noise)``.  Residual targets default to the
    unclipped scaled noise; ``residual="effective"`` uses ``noisy - clean``
    instead (what survives clipping).
    """
    cleans = [np.asarray(getattr(c, "data", c), dtype=np.float64) for c in clean_patches]
    snr_levels = [float(s) for s in snr_levels]
    if not cleans or not snr_levels:
        raise ParameterError("need at least one clean patch and one SNR level")
    if n_per_clean < 1:
        raise ParameterError("n_per_clean must be >= 1")
    if target_kind not in TARGET_KINDS:
        raise ContractError(f"target_kind must be one of {TARGET_KINDS}")
    if residual not in ("effective", "unclipped"):
        raise ParameterError("residual must be 'effective' or 'unclipped'")
    if any(c.shape != PATCH_SHAPE for c in cleans):
        raise ParameterError(f"clean patches must be {PATCH_SHAPE}")
    source_ids = source_ids or [f"src-{i}" for i in range(len(cleans))]
    if len(source_ids) != len(cleans):
        raise ParameterError("one source id per clean patch")

    tag = model.tag
    pairs, prov = [], []
    for i, (clean, sid) in enumerate(zip(cleans, source_ids)):
        for s_idx, snr in enumerate(snr_levels):
            for j in range(n_per_clean):
                nseed = pair_seed(seed, i, s_idx, j)
                sp = model.emit(clean, snr, nseed) if isinstance(model, PatchPool) else emit(model, clean, snr, nseed)
                noise = sp.patch.data
                noisy = np.clip(clean + noise, 0.0, 1.0)
                if target_kind == "clean":
                    target = clean.copy()
                else:
                    target = noisy - clean if residual == "effective" else noise.copy()
                pairs.append(TrainingPair(noisy, target, target_kind, snr, tag, (sid, nseed), clean))
                prov.append({"source_id": sid, "snr_db": snr, "noise_seed": nseed, "model_tag": tag, "alpha": sp.alpha})

    h = hashlib.sha256()
    for c in cleans:
        h.update(c.tobytes())
    config = {
        "model_tag": tag,
        "model_fingerprint": _model_fingerprint(model),
        "snr_levels": snr_levels,
        "n_per_clean": n_per_clean,
        "seed": int(seed),
        "target_kind": target_kind,
        "residual": residual,
        "clean_digest": h.hexdigest(),
        "source_ids": list(source_ids),
    }
    manifest = DatasetManifest(len(pairs), int(seed), config_hash(config), config, prov)
    return pairs, manifest


def split(manifest: DatasetManifest, rate: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    """Split by clean-source id so no source lands on both sides."""
    if not 0.0 < rate < 1.0:
        raise SplitError(f"split rate must lie in (0, 1), got {rate}")
    if not any(abs(rate - r) < 1e-12 for r in PAPER_SPLIT_RATES):
        warnings.warn(f"split rate {rate} is not one of {PAPER_SPLIT_RATES}", stacklevel=2)
    sources = manifest.source_ids
    n = len(sources)
    if n < 2:
        raise SplitError("need at least two clean sources to split")
    n_train = min(max(int(round(rate * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train = sorted(sources[k] for k in perm[:n_train])
    test = sorted(sources[k] for k in perm[n_train:])
    return train, test


def select(pairs: list[TrainingPair], source_ids) -> list[TrainingPair]:
    keep = set(source_ids)
    return [p for p in pairs if p.provenance[0] in keep]


def save_dataset(directory, pairs: list[TrainingPair], manifest: DatasetManifest) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    origins = [(p.provenance[0], int(p.provenance[1]), 0) for p in pairs]
    write_mdp(path / "noisy.mdp", [NoisePatch(p.noisy, "noisy", o) for p, o in zip(pairs, origins)])
    write_mdp(path / "target.mdp", [NoisePatch(p.target, "target", o) for p, o in zip(pairs, origins)])
    if all(p.clean is not None for p in pairs):
        write_mdp(path / "clean.mdp", [NoisePatch(p.clean, "clean", o) for p, o in zip(pairs, origins)])
    body = asdict(manifest)
    body["target_kind"] = pairs[0].target_kind if pairs else None
    (path / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return path


def load_dataset(directory) -> tuple[list[TrainingPair], DatasetManifest]:
    path = Path(directory)
    body = json.loads((path / "manifest.json").read_text())
    kind = body.pop("target_kind")
    manifest = DatasetManifest(**body)
    noisy, _ = read_mdp(path / "noisy.mdp")
    target, _ = read_mdp(path / "target.mdp")
    clean = read_mdp(path / "clean.mdp")[0] if (path / "clean.mdp").exists() else [None] * len(noisy)
    pairs = []
    for n, t, c, pv in zip(noisy, target, clean, manifest.provenance):
        pairs.append(
            TrainingPair(
                n.data.astype(np.float64), t.data.astype(np.float64), kind, pv["snr_db"], pv["model_tag"],
                (pv["source_id"], pv["noise_seed"]), None if c is None else c.data.astype(np.float64),
            )
        )
    return pairs, manifest
