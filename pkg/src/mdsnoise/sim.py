"""Parametric micro-Doppler synthesis and structured environmental noise.

Clean spectrograms are sums of Gaussian ridges that follow per-body-part
Doppler trajectories.  "Measured" recordings interleave activities with idle
gaps and add a spatially correlated noise field on top.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from .errors import DimensionError, ParameterError, RangeError, SizeError
from .spectrogram import (
    DEFAULT_DT,
    DEFAULT_SHAPE,
    PATCH_SHAPE,
    ActivityLabel,
    Spectrogram,
    doppler_axis,
    time_axis,
)

PERTURBATION = 0.10


@dataclass(frozen=True)
class Trajectory:
    """Doppler centre f(t) = piecewise-linear bulk motion + a sinusoidal swing."""

    knots: tuple[tuple[float, float], ...]
    swing_hz: float = 0.0
    swing_rate: float = 1.0
    phase: float = 0.0

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        kt = np.array([k[0] for k in self.knots])
        kf = np.array([k[1] for k in self.knots])
        return np.interp(t, kt, kf) + self.swing_hz * np.sin(2 * np.pi * self.swing_rate * t + self.phase)


@dataclass(frozen=True)
class Component:
    amplitude: float
    trajectory: Trajectory
    spread_hz: float
    t0: float
    t1: float


@dataclass(frozen=True)
class MotionTemplate:
    components: tuple[Component, ...]
    duration: float
    name: str = ""

    def __post_init__(self):
        for c in self.components:
            if not 0.0 < c.amplitude <= 1.0:
                raise ParameterError(f"component amplitude {c.amplitude} outside (0, 1]")
            if c.spread_hz <= 0:
                raise ParameterError("Doppler spread must be positive")
            if not (0.0 <= c.t0 < c.t1 <= self.duration):
                raise ParameterError(f"support [{c.t0}, {c.t1}] invalid for duration {self.duration}")

    def perturbed(self, rng: np.random.Generator) -> "MotionTemplate":
        """Jitter amplitudes, Doppler excursions and swing phases by up to 10%."""
        out = []
        for c in self.components:
            a, fk, sk, ph = rng.uniform(-PERTURBATION, PERTURBATION, size=4)
            traj = c.trajectory
            traj = replace(
                traj,
                knots=tuple((t, f * (1 + fk)) for t, f in traj.knots),
                swing_hz=traj.swing_hz * (1 + sk),
                phase=traj.phase + ph * 2 * np.pi,
            )
            out.append(replace(c, amplitude=min(1.0, c.amplitude * (1 + a)), trajectory=traj))
        return replace(self, components=tuple(out))


def _walk(t0, t1, bulk, swing_torso=6.0, rate=1.0):
    """Torso, legs and arms while walking at a steady Doppler ``bulk``."""
    knots = ((t0, bulk), (t1, bulk))
    return (
        Component(0.5, Trajectory(knots, swing_torso, rate), 3.0, t0, t1),
        Component(0.25, Trajectory(knots, 30.0, rate), 4.5, t0, t1),
        Component(0.15, Trajectory(knots, 18.0, rate, np.pi), 4.5, t0, t1),
    )


def _templates() -> dict[str, MotionTemplate]:
    T = Trajectory
    sit_down = (
        Component(0.5, T(((1.0, 0.0), (2.25, -35.0), (3.5, -15.0), (4.5, 0.0))), 3.0, 1.0, 4.5),
        Component(0.25, T(((1.5, 0.0), (2.75, -20.0), (4.0, 0.0)), 10.0, 0.8), 6.0, 1.5, 4.0),
        Component(0.15, T(((1.0, 0.0), (2.5, -25.0), (4.5, 0.0)), 15.0, 1.2, np.pi / 2), 4.5, 1.0, 4.5),
    )
    stand_up = (
        Component(0.5, T(((1.0, 0.0), (2.0, 20.0), (3.25, 40.0), (4.5, 0.0))), 3.0, 1.0, 4.5),
        Component(0.25, T(((1.25, 0.0), (3.0, 25.0), (4.25, 0.0)), 8.0, 0.6), 6.0, 1.25, 4.25),
        Component(0.15, T(((1.0, 0.0), (3.0, 30.0), (4.5, 0.0)), 12.0, 1.5), 4.5, 1.0, 4.5),
    )
    sit_to_walk = (
        Component(0.5, T(((0.5, 0.0), (1.5, 30.0), (2.5, 20.0))), 3.0, 0.5, 2.5),
        Component(0.15, T(((0.5, 0.0), (1.5, 20.0), (2.5, 10.0)), 10.0, 1.0), 6.0, 0.5, 2.5),
    ) + _walk(2.5, 7.5, 45.0)
    walk_to_sit = _walk(0.5, 4.5, -40.0) + (
        Component(0.5, T(((4.5, -10.0), (5.75, -30.0), (7.0, 0.0))), 3.0, 4.5, 7.0),
        Component(0.25, T(((4.5, 0.0), (5.5, -15.0), (6.5, 0.0)), 12.0, 1.0), 6.0, 4.5, 6.5),
    )
    walk_to_fall = _walk(0.5, 4.0, 35.0, rate=1.2) + (
        Component(0.5, T(((4.0, 0.0), (4.6, -70.0), (5.2, -5.0), (6.0, 0.0))), 6.0, 4.0, 6.0),
        Component(0.25, T(((4.0, 0.0), (4.7, -45.0), (5.5, 0.0)), 15.0, 2.0), 9.0, 4.0, 5.5),
    )
    stand_from_floor = (
        Component(0.5, T(((0.5, 0.0), (2.0, 15.0), (3.5, 25.0), (4.5, 5.0))), 4.5, 0.5, 4.5),
        Component(0.25, T(((0.5, 0.0), (2.5, 20.0), (4.5, 0.0)), 12.0, 0.5), 7.5, 0.5, 4.5),
        Component(0.15, T(((1.0, 0.0), (3.0, 35.0), (4.5, 0.0)), 10.0, 0.9), 4.5, 1.0, 4.5),
    ) + _walk(5.0, 8.5, -45.0)
    raw = {
        "sit-down": (sit_down, 6.0),
        "stand-up": (stand_up, 6.0),
        "sit-to-walk": (sit_to_walk, 8.0),
        "walk-to-sit": (walk_to_sit, 8.0),
        "walk-to-fall": (walk_to_fall, 7.0),
        "stand-from-floor": (stand_from_floor, 9.0),
    }
    return {name: MotionTemplate(comps, dur, name) for name, (comps, dur) in raw.items()}


TEMPLATES: dict[str, MotionTemplate] = _templates()


def template_for(label: ActivityLabel | str) -> MotionTemplate:
    name = label.name if isinstance(label, ActivityLabel) else label
    return TEMPLATES[name]


def _check_shape(shape) -> tuple[int, int]:
    n_f, n_t = (int(s) for s in shape)
    if n_f < PATCH_SHAPE[0] or n_t < PATCH_SHAPE[1]:
        raise DimensionError(f"shape {shape} cannot hold a {PATCH_SHAPE} window")
    return n_f, n_t


def render_template(template: MotionTemplate, f_axis: np.ndarray, t_axis: np.ndarray) -> np.ndarray:
    """Sum the Gaussian ridges of an already-perturbed template on the given axes (unclipped)."""
    out = np.zeros((f_axis.size, t_axis.size), dtype=np.float64)
    for c in template.components:
        cols = np.nonzero((t_axis >= c.t0) & (t_axis < c.t1))[0]
        if cols.size == 0:
            continue
        centre = c.trajectory(t_axis[cols])
        if centre.min() < f_axis[0] or centre.max() > f_axis[-1]:
            raise RangeError(
                f"trajectory spans [{centre.min():.1f}, {centre.max():.1f}] Hz, "
                f"outside Doppler range [{f_axis[0]}, {f_axis[-1]}]"
            )
        diff = f_axis[:, None] - centre[None, :]
        out[:, cols] += c.amplitude * np.exp(-(diff**2) / (2 * c.spread_hz**2))
    return out


def synthesize_clean(
    template: MotionTemplate,
    shape=DEFAULT_SHAPE,
    seed: int = 0,
    dt: float | None = None,
) -> Spectrogram:
    """Clean spectrogram of one activity.

    With ``dt=None`` the time axis is stretched so that ``shape[1]`` columns
    span exactly ``template.duration``.
    """
    n_f, n_t = _check_shape(shape)
    dt = template.duration / n_t if dt is None else dt
    f_axis = doppler_axis(n_f)
    t_axis = time_axis(n_t, dt)
    jittered = template.perturbed(np.random.default_rng(seed))
    data = np.clip(render_template(jittered, f_axis, t_axis), 0.0, 1.0)
    return Spectrogram(data, f_axis, t_axis, meta={"seed": int(seed), "template": template.name})


@dataclass(frozen=True)
class NaturalNoiseParams:
    """Structured environmental noise: AR(1) texture, rectangular bursts, low-band gradient.

    ``floor`` lifts the background off zero so clipping at 0 stays rare.  The
    number of rectangles is drawn from ``rect_count`` for every
    ``rect_block_cols`` columns of field width.
    """

    rho_f: float = 0.7
    rho_t: float = 0.9
    background_std: float = 0.05
    floor: float = 0.15
    rect_count: tuple[int, int] = (1, 4)
    rect_rows: tuple[int, int] = (4, 10)
    rect_cols: tuple[int, int] = (20, 60)
    rect_intensity: tuple[float, float] = (0.3, 0.6)
    rect_block_cols: int = 256
    band_peak: float = 0.15
    band_rows: int = 16
    band_period_cols: int = 128

    def __post_init__(self):
        if not (abs(self.rho_f) < 1 and abs(self.rho_t) < 1):
            raise ParameterError("AR(1) coefficients must satisfy |rho| < 1")
        if self.background_std < 0 or self.band_peak < 0 or self.band_rows < 0:
            raise ParameterError("noise magnitudes must be non-negative")
        for lo, hi in (self.rect_count, self.rect_rows, self.rect_cols, self.rect_intensity):
            if lo > hi or lo < 0:
                raise ParameterError("rectangle ranges must be ordered and non-negative")
        if self.rect_block_cols < 1 or self.band_period_cols < 1:
            raise ParameterError("block and period lengths must be positive")

    @classmethod
    def white(cls, background_std: float = 0.05, floor: float = 0.15) -> "NaturalNoiseParams":
        """Pixel-independent Gaussian background only."""
        return cls(0.0, 0.0, background_std, floor, (0, 0), band_peak=0.0)


def ar1_field(white: np.ndarray, rho_f: float, rho_t: float) -> np.ndarray:
    """Separable stationary AR(1) filtering along time (axis 1) then Doppler (axis 0).

    Unit-variance white input yields unit-variance output with lag-1
    correlations ``rho_t`` and ``rho_f``.
    """
    x = np.array(white, dtype=np.float64)
    for axis, rho in ((1, rho_t), (0, rho_f)):
        if rho == 0.0:
            continue
        gain = math.sqrt(1.0 - rho * rho)
        idx = [slice(None)] * 2
        idx[axis] = 0
        x[tuple(idx)] /= gain  # stationary start: first output equals first input
        x = lfilter([gain], [1.0, -rho], x, axis=axis)
    return x


@dataclass
class NoiseLayers:
    background: np.ndarray
    rects: np.ndarray
    band: np.ndarray
    placements: list[dict] = field(default_factory=list)

    @property
    def total(self) -> np.ndarray:
        return np.clip(self.background + self.rects + self.band, 0.0, 1.0)


def natural_noise_layers(shape, params: NaturalNoiseParams, seed: int) -> NoiseLayers:
    n_f, n_t = _check_shape(shape)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((n_f, n_t))
    background = params.floor + params.background_std * ar1_field(white, params.rho_f, params.rho_t)

    rects = np.zeros((n_f, n_t))
    placements = []
    n_blocks = math.ceil(n_t / params.rect_block_cols)
    for b in range(n_blocks):
        count = int(rng.integers(params.rect_count[0], params.rect_count[1] + 1))
        for _ in range(count):
            h = int(rng.integers(params.rect_rows[0], params.rect_rows[1] + 1))
            w = int(rng.integers(params.rect_cols[0], params.rect_cols[1] + 1))
            h, w = min(h, n_f), min(w, n_t)
            f0 = int(rng.integers(0, n_f - h + 1))
            lo = b * params.rect_block_cols
            t0 = min(int(rng.integers(lo, min(lo + params.rect_block_cols, n_t))), n_t - w)
            level = float(rng.uniform(*params.rect_intensity))
            rects[f0 : f0 + h, t0 : t0 + w] += level
            placements.append({"f0": f0, "t0": t0, "rows": h, "cols": w, "intensity": level})

    band = np.zeros((n_f, n_t))
    if params.band_peak > 0 and params.band_rows > 0:
        rows = min(params.band_rows, n_f)
        profile = params.band_peak * (1.0 - np.arange(rows) / params.band_rows)
        phase = rng.uniform(0, 2 * np.pi)
        swell = 0.75 + 0.25 * np.sin(2 * np.pi * np.arange(n_t) / params.band_period_cols + phase)
        band[:rows] = profile[:, None] * swell[None, :]
    return NoiseLayers(background, rects, band, placements)


def synthesize_natural_noise(shape=DEFAULT_SHAPE, params: NaturalNoiseParams | None = None, seed: int = 0) -> Spectrogram:
    params = params or NaturalNoiseParams()
    layers = natural_noise_layers(shape, params, seed)
    n_f, n_t = layers.background.shape
    return Spectrogram(layers.total, doppler_axis(n_f), time_axis(n_t), meta={"seed": int(seed), "kind": "natural-noise"})


@dataclass
class MeasuredRecording:
    spectrogram: Spectrogram
    activity_intervals: list[tuple[float, float, ActivityLabel]]
    idle_intervals: list[tuple[float, float]]
    clean: np.ndarray | None = None
    noise_seed: int | None = None
    rid: str = "rec"

    @property
    def duration(self) -> float:
        return self.spectrogram.duration

    def to_spectrogram(self) -> Spectrogram:
        """Spectrogram with interval bookkeeping folded into its header metadata."""
        intervals = {
            "activity": [[a, b, lab.class_id] for a, b, lab in self.activity_intervals],
            "idle": [[a, b] for a, b in self.idle_intervals],
        }
        labels = [lab.name for _, _, lab in self.activity_intervals]
        return self.spectrogram.with_data(
            self.spectrogram.data, label=labels, intervals=intervals, noise_seed=self.noise_seed, rid=self.rid
        )

    @classmethod
    def from_spectrogram(cls, spec: Spectrogram) -> "MeasuredRecording":
        iv = spec.meta.get("intervals") or {"activity": [], "idle": []}
        acts = [(a, b, ActivityLabel.from_id(int(c))) for a, b, c in iv["activity"]]
        idle = [(a, b) for a, b in iv["idle"]]
        return cls(spec, acts, idle, noise_seed=spec.meta.get("noise_seed"), rid=spec.meta.get("rid", "rec"))


def derive_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


def compose_recording(
    activities: list[tuple[MotionTemplate, ActivityLabel]],
    idle_gap: float,
    noise_params: NaturalNoiseParams | None = None,
    seed: int = 0,
    dt: float = DEFAULT_DT,
    n_bins: int = DEFAULT_SHAPE[0],
    lead_in: bool = True,
    max_duration: float = 600.0,
    rid: str | None = None,
) -> MeasuredRecording:
    """Concatenate activities separated by idle gaps and add a natural-noise field.

    With ``lead_in`` the recording also starts and ends with an idle gap.
    The noise field is ``synthesize_natural_noise(shape, noise_params,
    recording.noise_seed)``, so it can be regenerated and subtracted.
    """
    if not activities:
        raise ParameterError("need at least one activity")
    if idle_gap <= 0:
        raise ParameterError("idle_gap must be positive")
    gap_cols = int(round(idle_gap / dt))
    if gap_cols < 1:
        raise ParameterError("idle_gap shorter than one column")
    act_cols = [int(round(tpl.duration / dt)) for tpl, _ in activities]
    n_gaps = len(activities) - 1 + (2 if lead_in else 0)
    total = sum(act_cols) + n_gaps * gap_cols
    if total * dt > max_duration:
        raise SizeError(f"recording of {total * dt:.1f} s exceeds maximum {max_duration} s")

    seeds = derive_seeds(seed, len(activities) + 1)
    noise_seed = seeds[0]
    blocks, acts, idle = [], [], []
    col = 0

    def add_gap():
        nonlocal col
        blocks.append(np.zeros((n_bins, gap_cols), dtype=np.float32))
        idle.append((col * dt, (col + gap_cols) * dt))
        col += gap_cols

    if lead_in:
        add_gap()
    for i, ((tpl, label), n_cols) in enumerate(zip(activities, act_cols)):
        if i > 0:
            add_gap()
        clean = synthesize_clean(tpl, (n_bins, max(n_cols, PATCH_SHAPE[1])), seeds[i + 1], dt=dt).data[:, :n_cols]
        blocks.append(clean)
        acts.append((col * dt, (col + n_cols) * dt, label))
        col += n_cols
    if lead_in:
        add_gap()

    clean = np.concatenate(blocks, axis=1)
    noise = synthesize_natural_noise((n_bins, total), noise_params, noise_seed).data
    data = np.clip(clean + noise, 0.0, 1.0)
    spec = Spectrogram(data, doppler_axis(n_bins), time_axis(total, dt), meta={"seed": int(seed)})
    return MeasuredRecording(spec, acts, idle, clean=clean, noise_seed=noise_seed, rid=rid or f"rec-{seed}")
