"""Intensity frames and 8-bit binary PGM (P5) I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataIntegrityError, ValidationError


@dataclass(frozen=True)
class Frame:
    """A height x width grid of intensities in [0, 1], exposed at time t (us)."""

    intensity: np.ndarray
    t: int

    def __post_init__(self):
        arr = np.asarray(self.intensity, dtype=np.float64)
        object.__setattr__(self, "intensity", arr)
        if arr.ndim != 2:
            raise ValidationError("frame intensity must be 2-D")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("frame contains non-finite intensities")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("frame intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


def save_pgm(frame: Frame, path) -> None:
    """Write an 8-bit binary PGM. Intensities are quantized to 0..255."""
    data = np.round(frame.intensity * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path, t: int = 0) -> Frame:
    """Read an 8-bit binary PGM written by save_pgm."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        # header: magic, dims, maxval separated by whitespace; pixels follow.
        parts = []
        idx = 0
        while len(parts) < 4:
            while blob[idx : idx + 1].isspace():
                idx += 1
            if blob[idx : idx + 1] == b"#":
                idx = blob.index(b"\n", idx) + 1
                continue
            end = idx
            while not blob[end : end + 1].isspace():
                end += 1
            parts.append(blob[idx:end])
            idx = end
        if parts[0] != b"P5":
            raise DataIntegrityError(f"{path}: not a binary PGM (magic {parts[0]!r})")
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        if maxval != 255:
            raise DataIntegrityError(f"{path}: only 8-bit PGM supported")
        pixels = np.frombuffer(blob[idx + 1 :], dtype=np.uint8, count=w * h)
    except (ValueError, IndexError) as exc:
        raise DataIntegrityError(f"{path}: malformed PGM: {exc}") from exc
    return Frame(pixels.reshape(h, w).astype(np.float64) / 255.0, t=t)
