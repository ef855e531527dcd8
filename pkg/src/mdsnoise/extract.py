"""Idle-period detection and sliding-window harvesting of real noise patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, RangeError
from .sim import MeasuredRecording
from .spectrogram import PATCH_SHAPE, NoisePatch

DEFAULT_STRIDE = (14, 14)


@dataclass(frozen=True)
class IdleDetectorConfig:
    energy_percentile: float = 30.0
    exclusion_margin: int = 0
    use_ground_truth_intervals: bool = True

    def __post_init__(self):
        if not 0.0 < self.energy_percentile < 100.0:
            raise ParameterError("energy_percentile must lie in (0, 100)")
        if self.exclusion_margin < 0:
            raise ParameterError("exclusion_margin must be >= 0")


def _column_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open column ranges."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    return list(zip(np.nonzero(edges == 1)[0].tolist(), np.nonzero(edges == -1)[0].tolist()))


def detect_idle(recording: MeasuredRecording, cfg: IdleDetectorConfig = IdleDetectorConfig()) -> list[tuple[float, float]]:
    spec = recording.spectrogram
    dt = spec.dt
    if cfg.use_ground_truth_intervals:
        runs = [(spec.column(a), spec.column(b)) for a, b in recording.idle_intervals]
    else:
        energy = spec.data.astype(np.float64).sum(axis=0)
        threshold = np.percentile(energy, cfg.energy_percentile)
        runs = _column_runs(energy <= threshold)
    m = cfg.exclusion_margin
    t0 = spec.time_axis[0]
    return [(t0 + (a + m) * dt, t0 + (b - m) * dt) for a, b in runs if b - a > 2 * m]


def window_offsets(n: int, size: int, stride: int) -> list[int]:
    if n < size:
        return []
    return list(range(0, n - size + 1, stride))


def extract_patches(
    recording: MeasuredRecording,
    intervals: list[tuple[float, float]],
    stride: tuple[int, int] = DEFAULT_STRIDE,
) -> list[NoisePatch]:
    """Tile every interval with (100, 28) windows; patches come out sorted by
    (interval index, Doppler offset, time offset)."""
    df, dtc = stride
    if df < 1 or dtc < 1:
        raise ParameterError(f"stride components must be >= 1, got {stride}")
    spec = recording.spectrogram
    n_f, n_t = spec.shape
    h, w = PATCH_SHAPE
    patches = []
    for idx, (start, end) in enumerate(intervals):
        c0, c1 = spec.column(start), spec.column(end)
        if c0 < 0 or c1 > n_t or c0 > c1:
            raise RangeError(f"interval ({start}, {end}) outside recording of {spec.duration} s")
        for f in window_offsets(n_f, h, df):
            for t in window_offsets(c1 - c0, w, dtc):
                block = spec.data[f : f + h, c0 + t : c0 + t + w].copy()
                patches.append(NoisePatch(block, kind="extracted", origin=(recording.rid, f, c0 + t)))
    return patches


def expected_patch_count(n_f: int, interval_cols: list[int], stride=DEFAULT_STRIDE) -> int:
    h, w = PATCH_SHAPE
    total = 0
    for cols in interval_cols:
        nf = (n_f - h) // stride[0] + 1 if n_f >= h else 0
        nt = (cols - w) // stride[1] + 1 if cols >= w else 0
        total += nf * nt
    return total


def harvest(recordings: list[MeasuredRecording], cfg: IdleDetectorConfig = IdleDetectorConfig(), stride=DEFAULT_STRIDE) -> list[NoisePatch]:
    """Detect idle periods and extract patches from every recording, in order."""
    out = []
    for rec in recordings:
        out.extend(extract_patches(rec, detect_idle(rec, cfg), stride))
    return out
