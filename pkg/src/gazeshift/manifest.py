"""Gaze labels, samples, and the JSON dataset manifest.

The manifest stores relative paths; loading resolves them against the
manifest's own directory and verifies every referenced file exists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIntegrityError, ValidationError
from .events import EventStream, load_events
from .frames import Frame, load_pgm
from .geometry import ScreenGeometry

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GazeLabel:
    """Ground truth for one sample: grid cell, screen point, 3-D direction."""

    cell: tuple[int, int]
    screen_px: tuple[float, float]
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "cell", (int(self.cell[0]), int(self.cell[1])))
        if d.shape != (3,):
            raise ValidationError("gaze direction must be a 3-vector")
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValidationError("gaze direction must be unit length")

    def validate_grid(self, grid: int) -> None:
        r, c = self.cell
        if not (0 <= r < grid and 0 <= c < grid):
            raise ValidationError(f"cell {self.cell} outside {grid}x{grid} grid")


@dataclass(frozen=True)
class GazeSample:
    frame: Frame
    events: EventStream
    label: GazeLabel
    subject_id: str = "synthetic"

    def __post_init__(self):
        if not (self.events.t_start <= self.frame.t <= self.events.t_end):
            raise ValidationError("event window does not overlap the frame timestamp")


@dataclass(frozen=True)
class SampleEntry:
    """One manifest row; paths are relative to the manifest directory."""

    frame: str
    events: str
    row: int
    col: int
    screen_x: float
    screen_y: float
    split: str
    subject: str
    t_start: int = 0
    t_end: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split tag {self.split!r}")


@dataclass
class DatasetManifest:
    grid: int
    screen: ScreenGeometry
    sensor_width: int
    sensor_height: int
    samples: list[SampleEntry] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        if self.grid < 2:
            raise ValidationError("grid must be >= 2")
        seen: dict[str, str] = {}
        for s in self.samples:
            prev = seen.get(s.frame)
            if prev is not None and prev != s.split:
                raise ValidationError(
                    f"sample {s.frame} appears in both {prev!r} and {s.split!r} splits"
                )
            seen[s.frame] = s.split

    def split(self, tag: str) -> list[SampleEntry]:
        return [s for s in self.samples if s.split == tag]

    def load_sample(self, entry: SampleEntry) -> GazeSample:
        if self.root is None:
            raise ValidationError("manifest has no root directory; load it from disk")
        from .geometry import screen_to_gaze_vector

        frame = load_pgm(self.root / entry.frame, t=entry.t_end - 1)
        events = load_events(
            self.root / entry.events,
            self.sensor_width,
            self.sensor_height,
            entry.t_start,
            entry.t_end,
        )
        direction = screen_to_gaze_vector((entry.screen_x, entry.screen_y), self.screen)
        label = GazeLabel((entry.row, entry.col), (entry.screen_x, entry.screen_y), direction)
        label.validate_grid(self.grid)
        return GazeSample(frame, events, label, subject_id=entry.subject)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "grid": manifest.grid,
        "sensor": {"w_px": manifest.sensor_width, "h_px": manifest.sensor_height},
        "screen": {
            "w_px": manifest.screen.width_px,
            "h_px": manifest.screen.height_px,
            "fov_h_deg": manifest.screen.fov_h_deg,
            "fov_v_deg": manifest.screen.fov_v_deg,
        },
        "samples": [
            {
                "frame": s.frame,
                "events": s.events,
                "row": s.row,
                "col": s.col,
                "screen_x": s.screen_x,
                "screen_y": s.screen_y,
                "split": s.split,
                "subject": s.subject,
                "t_start": s.t_start,
                "t_end": s.t_end,
            }
            for s in manifest.samples
        ],
    }
    path.write_text(json.dumps(doc, indent=1))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataIntegrityError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataIntegrityError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    try:
        screen = ScreenGeometry(
            doc["screen"]["w_px"],
            doc["screen"]["h_px"],
            doc["screen"]["fov_h_deg"],
            doc["screen"]["fov_v_deg"],
        )
        samples = [SampleEntry(**rec) for rec in doc["samples"]]
        manifest = DatasetManifest(
            grid=doc["grid"],
            screen=screen,
            sensor_width=doc["sensor"]["w_px"],
            sensor_height=doc["sensor"]["h_px"],
            samples=samples,
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise DataIntegrityError(f"{path}: malformed manifest record: {exc}") from exc
    for s in manifest.samples:
        for rel in (s.frame, s.events):
            if not (path.parent / rel).exists():
                raise DataIntegrityError(f"{path}: referenced file missing: {rel}")
    return manifest
