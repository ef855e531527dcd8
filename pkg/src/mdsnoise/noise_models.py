"""MNM / AWGN / MIX noise models with SNR-controlled scaling.

SNR follows the variance convention ``SNR = 10 log10(var_signal / var_noise)``.
A raw patch with variance ``sigma2`` is mean-centred and multiplied by
``sqrt(alpha)`` where ``alpha = sigma2' / sigma2`` is the variance ratio, so the
emitted patch has variance exactly ``sigma2'``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParameterError
from .gan import TrainedGenerator, sample
from .spectrogram import PATCH_SHAPE, NoisePatch

SNR_LEVELS = (-10, -5, 0, 5, 10, 15, 20, 25)
MODEL_TAGS = ("MNM", "AWGN", "MIX")
MAX_RESAMPLES = 8
_UNIFORM_HALF_WIDTH = math.sqrt(3.0)  # zero-mean, unit-variance uniform on [-sqrt3, sqrt3]


@dataclass
class NoiseModel:
    tag: str
    generator: TrainedGenerator | None = None

    def __post_init__(self):
        self.tag = self.tag.upper()
        if self.tag == "MN":
            self.tag = "MNM"
        if self.tag not in MODEL_TAGS:
            raise ParameterError(f"unknown noise model {self.tag!r}")
        if self.tag == "MNM" and self.generator is None:
            raise ConfigurationError("MNM needs a trained generator")


@dataclass
class ScaledPatch:
    patch: NoisePatch
    alpha: float
    sigma1: float
    sigma2: float
    sigma2_prime: float


def target_variance(sigma_signal: float, snr_db: float) -> float:
    if not sigma_signal > 0:
        raise ParameterError(f"signal variance must be positive, got {sigma_signal}")
    if not math.isfinite(snr_db):
        raise ParameterError("snr_db must be finite")
    return sigma_signal / 10.0 ** (snr_db / 10.0)


def measured_snr(sigma_signal: float, sigma_noise: float) -> float:
    return 10.0 * math.log10(sigma_signal / sigma_noise)


def raw_noise(tag: str, shape, rng: np.random.Generator) -> np.ndarray:
    """Unscaled pixel-independent noise for the AWGN and MIX models."""
    if tag == "AWGN":
        return rng.standard_normal(shape)
    if tag == "MIX":
        g = rng.standard_normal(shape)
        u = rng.uniform(-_UNIFORM_HALF_WIDTH, _UNIFORM_HALF_WIDTH, shape)
        return 0.5 * g + 0.5 * u
    raise ParameterError(f"no closed-form raw noise for {tag!r}")


def scale_to_variance(raw: np.ndarray, sigma2_prime: float) -> tuple[np.ndarray, float, float]:
    """Mean-centre ``raw`` and rescale it to variance ``sigma2_prime``; returns (patch, alpha, sigma2)."""
    raw = np.asarray(raw, dtype=np.float64)
    sigma2 = float(raw.var())
    if not sigma2 > 0:
        raise ParameterError("raw noise patch has zero variance")
    alpha = sigma2_prime / sigma2
    centred = raw - raw.mean()
    return centred * math.sqrt(alpha), alpha, sigma2


def scale_to_snr(raw: np.ndarray, clean: np.ndarray, snr_db: float, kind: str = "extracted", origin="generated") -> ScaledPatch:
    sigma1 = float(np.var(np.asarray(clean, dtype=np.float64)))
    s2p = target_variance(sigma1, snr_db)
    data, alpha, sigma2 = scale_to_variance(raw, s2p)
    return ScaledPatch(NoisePatch(data, kind=kind, origin=origin), alpha, sigma1, sigma2, s2p)


def draw_raw(model: NoiseModel, seed: int) -> np.ndarray:
    """One unscaled (100, 28) patch; MNM resamples the next seed if the generator output is constant."""
    if model.tag != "MNM":
        return raw_noise(model.tag, PATCH_SHAPE, np.random.default_rng(seed))
    if model.generator is None:
        raise ConfigurationError("MNM needs a trained generator")
    for attempt in range(MAX_RESAMPLES):
        raw = sample(model.generator, 1, seed + attempt)[0].data
        if raw.var() > 0:
            return raw
    raise ParameterError(f"generator produced constant patches for {MAX_RESAMPLES} seeds from {seed}")


def emit(model: NoiseModel, clean_patch: np.ndarray, snr_db: float, seed: int) -> ScaledPatch:
    clean_patch = np.asarray(clean_patch, dtype=np.float64)
    if clean_patch.shape != PATCH_SHAPE:
        raise ParameterError(f"clean patch must be {PATCH_SHAPE}, got {clean_patch.shape}")
    return scale_to_snr(draw_raw(model, seed), clean_patch, snr_db, kind=model.tag.lower(), origin="generated")


def lag1_autocorr(fields: np.ndarray, axis: int = -1) -> float:
    """Pooled lag-1 autocorrelation along ``axis`` after removing each field's mean."""
    x = np.asarray(fields, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
        axis = axis + 1 if axis >= 0 else axis
    x = x - x.mean(axis=(-2, -1), keepdims=True)
    a = np.moveaxis(x, axis, -1)
    num = (a[..., 1:] * a[..., :-1]).sum()
    den = (a * a).sum()
    return float(num / den) if den > 0 else 0.0
