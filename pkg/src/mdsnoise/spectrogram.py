"""Core data types: spectrograms, activity labels and noise patches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DimensionError, ParameterError

PATCH_SHAPE = (100, 28)
DEFAULT_SHAPE = (128, 256)
DOPPLER_BIN_HZ = 1.5
DEFAULT_DT = 1.0 / 32.0
DB_WINDOW = (-60.0, 0.0)

ACTIVITIES = (
    "sit-down",
    "stand-up",
    "sit-to-walk",
    "walk-to-sit",
    "walk-to-fall",
    "stand-from-floor",
)

PATCH_KINDS = ("extracted", "generated", "awgn", "mix", "mnm", "clean", "noisy", "target")


@dataclass(frozen=True)
class ActivityLabel:
    class_id: int
    name: str

    def __post_init__(self):
        if not 0 <= self.class_id < len(ACTIVITIES) or ACTIVITIES[self.class_id] != self.name:
            raise ParameterError(f"invalid activity label ({self.class_id}, {self.name!r})")

    @classmethod
    def from_name(cls, name: str) -> "ActivityLabel":
        return cls(ACTIVITIES.index(name), name)

    @classmethod
    def from_id(cls, class_id: int) -> "ActivityLabel":
        return cls(class_id, ACTIVITIES[class_id])


def doppler_axis(n_bins: int, bin_hz: float = DOPPLER_BIN_HZ) -> np.ndarray:
    """Doppler bin centres in Hz; bin ``n_bins // 2`` is exactly 0 Hz."""
    return (np.arange(n_bins) - n_bins // 2) * bin_hz


def time_axis(n_cols: int, dt: float = DEFAULT_DT) -> np.ndarray:
    return np.arange(n_cols) * dt


def default_scale_meta() -> dict:
    return {"db_min": DB_WINDOW[0], "db_max": DB_WINDOW[1]}


def db_to_unit(db: np.ndarray, scale_meta: dict | None = None) -> np.ndarray:
    """Clip a dB field to the window and map it affinely onto [0, 1]."""
    meta = scale_meta or default_scale_meta()
    lo, hi = meta["db_min"], meta["db_max"]
    return (np.clip(db, lo, hi) - lo) / (hi - lo)


def unit_to_db(data: np.ndarray, scale_meta: dict | None = None) -> np.ndarray:
    meta = scale_meta or default_scale_meta()
    lo, hi = meta["db_min"], meta["db_max"]
    return lo + np.asarray(data, dtype=np.float64) * (hi - lo)


@dataclass
class Spectrogram:
    """Normalised time-frequency magnitude field of shape (doppler bins, time bins).

    ``meta`` carries optional header fields (label, intervals, seed) that the
    MDS1 container persists alongside the data.
    """

    data: np.ndarray
    doppler_axis: np.ndarray
    time_axis: np.ndarray
    scale_meta: dict = field(default_factory=default_scale_meta)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.doppler_axis = np.asarray(self.doppler_axis, dtype=np.float64)
        self.time_axis = np.asarray(self.time_axis, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError(f"spectrogram must be 2-D, got {self.data.shape}")
        n_f, n_t = self.data.shape
        if n_f < PATCH_SHAPE[0] or n_t < PATCH_SHAPE[1]:
            raise DimensionError(f"spectrogram {self.data.shape} smaller than one {PATCH_SHAPE} window")
        if self.doppler_axis.shape != (n_f,) or self.time_axis.shape != (n_t,):
            raise DimensionError("axis lengths do not match data shape")
        if np.any(np.diff(self.doppler_axis) <= 0) or np.any(np.diff(self.time_axis) <= 0):
            raise ParameterError("axes must be strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("spectrogram contains non-finite values")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ParameterError("spectrogram values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dt(self) -> float:
        return float(self.time_axis[1] - self.time_axis[0])

    @property
    def duration(self) -> float:
        return float(self.time_axis[-1] - self.time_axis[0] + self.dt)

    def column(self, t: float) -> int:
        """Column index whose left edge is at time ``t``."""
        return int(round((t - self.time_axis[0]) / self.dt))

    def with_data(self, data: np.ndarray, **meta) -> "Spectrogram":
        return Spectrogram(data, self.doppler_axis, self.time_axis, dict(self.scale_meta), {**self.meta, **meta})


@dataclass
class NoisePatch:
    """A (100, 28) noise field; ``origin`` is (recording id, f offset, t offset) or "generated"."""

    data: np.ndarray
    kind: str = "extracted"
    origin: Any = "generated"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != PATCH_SHAPE:
            raise DimensionError(f"noise patch must be {PATCH_SHAPE}, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("noise patch contains non-finite values")
        if self.kind not in PATCH_KINDS:
            raise ParameterError(f"unknown patch kind {self.kind!r}")
        if self.kind == "extracted" and not (isinstance(self.origin, (tuple, list)) and len(self.origin) == 3):
            raise ParameterError("extracted patches need an (id, f, t) origin")
