"""Deterministic synthetic near-eye scene generator.

A dark pupil disk (with smooth limb falloff) sits on a brighter iris disk over
a constant sclera background. For every grid target the pupil saccades from a
random start to the target position and then fixates with small jitter.
Micro-frames are rendered at a fixed rate; an event fires at a pixel whenever
the log-intensity change between consecutive micro-frames exceeds the contrast
threshold, with polarity equal to the sign of the change. Homogeneous Poisson
noise events with random polarity are mixed in.

Determinism is per-target: the RNG for target (row, col, repeat) is seeded
from (seed, row, col, repeat), so generation order (or parallelism over
targets) cannot change the output bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .events import EVENT_DTYPE, EventStream, save_events
from .frames import Frame, save_pgm
from .geometry import ScreenGeometry
from .manifest import DatasetManifest, SampleEntry, save_manifest

EPS_INTENSITY = 1e-3  # floor inside log() so dark pixels stay finite


@dataclass(frozen=True)
class SyntheticSceneConfig:
    width: int = 48
    height: int = 48
    pupil_radius_range: tuple[float, float] = (4.0, 5.5)
    iris_intensity: float = 0.45
    sclera_intensity: float = 0.85
    pupil_intensity: float = 0.05
    micro_frame_rate_hz: float = 1000.0
    contrast_threshold: float = 0.2
    dwell_ms: float = 100.0
    noise_rate: float = 0.1  # events / pixel / second
    seed: int = 0

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ConfigError("contrast threshold must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("sensor dimensions must be positive")
        if self.dwell_ms <= 0:
            raise ConfigError("dwell time must be positive")
        r_max = self.pupil_radius_range[1]
        if 2 * r_max >= min(self.width, self.height):
            raise ConfigError("pupil larger than sensor")


def render_eye(cx: float, cy: float, radius: float, cfg: SyntheticSceneConfig) -> np.ndarray:
    """Render one micro-frame for a pupil centred at (cx, cy)."""
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    dist = np.hypot(xx - cx, yy - cy)
    img = np.full((cfg.height, cfg.width), cfg.sclera_intensity)
    iris_r = 2.2 * radius
    # smoothstep edges, ~1.5 px wide, to get graded limb falloff
    iris_mix = np.clip((iris_r - dist) / 1.5, 0.0, 1.0)
    img = img * (1 - iris_mix) + cfg.iris_intensity * iris_mix
    pupil_mix = np.clip((radius - dist) / 1.5, 0.0, 1.0)
    img = img * (1 - pupil_mix) + cfg.pupil_intensity * pupil_mix
    return img


def events_between(prev: np.ndarray, cur: np.ndarray, theta: float):
    """Apply the contrast-threshold rule to one micro-frame pair.

    Returns (xs, ys, polarities) for pixels where |log(cur/prev)| >= theta.
    """
    dlog = np.log(cur + EPS_INTENSITY) - np.log(prev + EPS_INTENSITY)
    ys, xs = np.nonzero(np.abs(dlog) >= theta)
    pol = np.sign(dlog[ys, xs]).astype(np.int8)
    return xs, ys, pol


def pupil_trajectory(
    start: np.ndarray, target: np.ndarray, n_frames: int, rng: np.random.Generator
) -> np.ndarray:
    """Saccade (min-jerk, first 30% of frames) then fixation jitter."""
    n_sacc = max(2, int(0.3 * n_frames))
    s = np.linspace(0.0, 1.0, n_sacc)
    ease = 10 * s**3 - 15 * s**4 + 6 * s**5
    path = start[None, :] + ease[:, None] * (target - start)[None, :]
    n_fix = n_frames - n_sacc
    jitter = np.cumsum(rng.normal(0.0, 0.05, size=(n_fix, 2)), axis=0)
    jitter -= jitter * (np.arange(1, n_fix + 1) / n_fix)[:, None]  # pull back to target
    fix = target[None, :] + jitter
    return np.concatenate([path, fix], axis=0)


def target_position(row: int, col: int, grid: int, cfg: SyntheticSceneConfig) -> np.ndarray:
    """Pupil centre on the sensor corresponding to a grid cell."""
    # iris may clip at the border; only the pupil must stay inside
    margin = cfg.pupil_radius_range[1] + 1.0
    x = margin + (col / (grid - 1)) * (cfg.width - 1 - 2 * margin)
    y = margin + (row / (grid - 1)) * (cfg.height - 1 - 2 * margin)
    return np.array([x, y])


def synthesize_sample(
    row: int, col: int, repeat: int, grid: int, cfg: SyntheticSceneConfig
) -> tuple[Frame, EventStream]:
    """Generate the (frame, events) pair for one target dwell."""
    rng = np.random.default_rng([cfg.seed, row, col, repeat])
    radius = rng.uniform(*cfg.pupil_radius_range)
    target = target_position(row, col, grid, cfg)
    margin = cfg.pupil_radius_range[1] + 1.0
    start = rng.uniform(
        [margin, margin], [cfg.width - 1 - margin, cfg.height - 1 - margin]
    )

    dt_us = int(round(1e6 / cfg.micro_frame_rate_hz))
    n_frames = max(2, int(round(cfg.dwell_ms * 1e-3 * cfg.micro_frame_rate_hz)))
    t_end = n_frames * dt_us
    centers = pupil_trajectory(start, target, n_frames, rng)

    xs_all, ys_all, ts_all, pol_all = [], [], [], []
    prev = render_eye(centers[0, 0], centers[0, 1], radius, cfg)
    for k in range(1, n_frames):
        cur = render_eye(centers[k, 0], centers[k, 1], radius, cfg)
        xs, ys, pol = events_between(prev, cur, cfg.contrast_threshold)
        xs_all.append(xs)
        ys_all.append(ys)
        ts_all.append(np.full(len(xs), k * dt_us, dtype=np.uint64))
        pol_all.append(pol)
        prev = cur

    # Poisson noise events, uniform in space/time, random polarity
    n_noise = rng.poisson(cfg.noise_rate * cfg.width * cfg.height * t_end * 1e-6)
    xs_all.append(rng.integers(0, cfg.width, n_noise).astype(np.uint16))
    ys_all.append(rng.integers(0, cfg.height, n_noise).astype(np.uint16))
    ts_all.append(rng.integers(0, t_end, n_noise).astype(np.uint64))
    pol_all.append(rng.choice(np.array([-1, 1], dtype=np.int8), n_noise))

    xs = np.concatenate(xs_all).astype(np.uint16)
    ys = np.concatenate(ys_all).astype(np.uint16)
    ts = np.concatenate(ts_all).astype(np.uint64)
    pol = np.concatenate(pol_all).astype(np.int8)
    order = np.lexsort((pol, xs, ys, ts))  # total order for byte determinism

    ev = np.zeros(len(xs), dtype=EVENT_DTYPE)
    ev["x"], ev["y"], ev["t"], ev["polarity"] = xs[order], ys[order], ts[order], pol[order]
    stream = EventStream(ev, cfg.width, cfg.height, 0, t_end)
    frame = Frame(np.clip(prev, 0.0, 1.0), t=(n_frames - 1) * dt_us)
    return frame, stream


DEFAULT_SCREEN = dict(width_px=1920, height_px=1080, fov_h_deg=64.0)


def generate_synthetic(
    cfg: SyntheticSceneConfig,
    grid: int,
    n_repeats: int,
    out_dir,
    screen: ScreenGeometry | None = None,
    split_of_repeat=None,
) -> DatasetManifest:
    """Generate grid*grid*n_repeats samples and write manifest + files.

    split_of_repeat maps a repeat index to a split tag; by default every
    sample is tagged 'train'. Identical (cfg, grid, n_repeats) yields
    byte-identical output.
    """
    if grid < 2:
        raise ConfigError("grid must be >= 2")
    if n_repeats < 1:
        raise ConfigError("n_repeats must be >= 1")
    if screen is None:
        # vertical FoV chosen consistent with the horizontal one so the
        # implied eye distances agree
        d = (DEFAULT_SCREEN["width_px"] / 2) / math.tan(
            math.radians(DEFAULT_SCREEN["fov_h_deg"]) / 2
        )
        fov_v = math.degrees(2 * math.atan((DEFAULT_SCREEN["height_px"] / 2) / d))
        screen = ScreenGeometry(fov_v_deg=fov_v, **DEFAULT_SCREEN)
    if split_of_repeat is None:
        split_of_repeat = lambda k: "train"

    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "events").mkdir(parents=True, exist_ok=True)

    entries = []
    for row in range(grid):
        for col in range(grid):
            for k in range(n_repeats):
                frame, stream = synthesize_sample(row, col, k, grid, cfg)
                stem = f"r{row:02d}c{col:02d}k{k:02d}"
                save_pgm(frame, out_dir / "frames" / f"{stem}.pgm")
                save_events(stream, out_dir / "events" / f"{stem}.evt")
                sx = (col + 0.5) / grid * screen.width_px
                sy = (row + 0.5) / grid * screen.height_px
                entries.append(
                    SampleEntry(
                        frame=f"frames/{stem}.pgm",
                        events=f"events/{stem}.evt",
                        row=row,
                        col=col,
                        screen_x=sx,
                        screen_y=sy,
                        split=split_of_repeat(k),
                        subject="synthetic",
                        t_start=stream.t_start,
                        t_end=stream.t_end,
                    )
                )
    manifest = DatasetManifest(
        grid=grid,
        screen=screen,
        sensor_width=cfg.width,
        sensor_height=cfg.height,
        samples=entries,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
