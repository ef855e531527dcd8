"""SSIM, PSNR and before/after improvement deltas."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DimensionError

PSNR_INF = math.inf


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window: int | None = None  # None: whole-image statistics; int: sliding square window

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def ssim(x, y, params: SsimParams = SsimParams()) -> float:
    """Structural similarity from means, variances and covariance.

    The raw value is returned; it can fall below 0 for anti-correlated inputs.
    """
    x, y = _pair(x, y)
    c1, c2 = params.c1, params.c2
    if params.window is None:
        mx, my = x.mean(), y.mean()
        dx, dy = x - mx, y - my
        vx, vy, cxy = (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        return float(num / den)
    f = lambda a: uniform_filter(a, size=params.window, mode="reflect")
    mx, my = f(x), f(y)
    vx = f(x * x) - mx * mx
    vy = f(y * y) - my * my
    cxy = f(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(smap.mean())


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(((x - y) ** 2).mean())


def psnr(x, y, peak: float = 1.0) -> float:
    """``10 log10(peak**2 / MSE)``; identical inputs give ``PSNR_INF``."""
    err = mse(x, y)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / err)


@dataclass
class MetricsReport:
    psnr_noisy: float
    psnr_denoised: float
    ssim_noisy: float
    ssim_denoised: float
    psnr_improvement: float
    ssim_improvement: float
    ids: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def as_row(self) -> dict:
        row = dict(self.ids)
        row.update({k: v for k, v in asdict(self).items() if k not in ("ids", "flags")})
        row["flags"] = ";".join(self.flags)
        return row


def improvement(gt, noisy, denoised, params: SsimParams = SsimParams(), peak: float = 1.0, **ids) -> MetricsReport:
    gt_a, noisy_a = _pair(gt, noisy)
    _pair(gt_a, denoised)
    p_n, p_d = psnr(gt, noisy, peak), psnr(gt, denoised, peak)
    s_n, s_d = ssim(gt, noisy, params), ssim(gt, denoised, params)
    flags = [name for name, v in (("ssim_noisy", s_n), ("ssim_denoised", s_d)) if not 0.0 <= v <= 1.0]
    # inf - inf is undefined; a perfect denoiser on a perfect input has no improvement
    dp = 0.0 if p_d == p_n else p_d - p_n
    return MetricsReport(p_n, p_d, s_n, s_d, dp, s_d - s_n, ids, [f"{f}_out_of_range" for f in flags])
