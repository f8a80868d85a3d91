"""Screen geometry, pixel-to-gaze-vector mapping, and evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class ScreenGeometry:
    """Display geometry seen from the eye origin.

    The eye-to-screen distance is derived from the horizontal field of view:
    d_screen = (width/2) / tan(fov_h/2), in pixel units. If the vertical FoV
    implies a distance off by more than 5% a warning is emitted (the two can
    legitimately disagree when FoV values are nominal rather than measured).
    """

    width_px: int
    height_px: int
    fov_h_deg: float
    fov_v_deg: float

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ConfigError("screen dimensions must be positive")
        for fov in (self.fov_h_deg, self.fov_v_deg):
            if not 0.0 < fov < 180.0:
                raise ConfigError(f"field of view must be in (0, 180) deg, got {fov}")
        d_v = (self.height_px / 2.0) / np.tan(np.radians(self.fov_v_deg) / 2.0)
        if abs(d_v - self.d_screen) > 0.05 * self.d_screen:
            warnings.warn(
                "horizontal and vertical FoV imply inconsistent eye distances "
                f"({self.d_screen:.1f}px vs {d_v:.1f}px); using the horizontal one",
                stacklevel=2,
            )

    @property
    def d_screen(self) -> float:
        return (self.width_px / 2.0) / np.tan(np.radians(self.fov_h_deg) / 2.0)

    def consistent_fov_v(self) -> float:
        """The vertical FoV implied by the horizontal one (degrees)."""
        return float(np.degrees(2.0 * np.arctan((self.height_px / 2.0) / self.d_screen)))


def screen_to_gaze_vector(px: np.ndarray | tuple, geom: ScreenGeometry) -> np.ndarray:
    """Map a screen pixel to the unit gaze direction from the eye origin.

    v = normalize((px_x - cx, px_y - cy, d_screen)). Accepts a single (x, y)
    pair or an (N, 2) array; returns matching shape with a trailing 3.
    """
    px = np.asarray(px, dtype=np.float64)
    single = px.ndim == 1
    pts = np.atleast_2d(px)
    if pts.shape[-1] != 2:
        raise ValidationError("expected (x, y) screen coordinates")
    if (
        pts[:, 0].min() < 0
        or pts[:, 0].max() > geom.width_px
        or pts[:, 1].min() < 0
        or pts[:, 1].max() > geom.height_px
    ):
        raise ValidationError("screen coordinates out of bounds")
    cx, cy = geom.width_px / 2.0, geom.height_px / 2.0
    v = np.stack(
        [pts[:, 0] - cx, pts[:, 1] - cy, np.full(len(pts), geom.d_screen)], axis=-1
    )
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v[0] if single else v


def mae(predictions, truths) -> float:
    """Mean angle error in degrees between paired 3-D gaze vectors.

    The cosine is clamped to [-1, 1] before arccos; vector norms cancel, so
    inputs need not be unit length (zero vectors are rejected).
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {t.shape}")
    p = np.atleast_2d(p)
    t = np.atleast_2d(t)
    np_norm = np.linalg.norm(p, axis=-1)
    nt_norm = np.linalg.norm(t, axis=-1)
    if np.any(np_norm == 0) or np.any(nt_norm == 0):
        raise ValidationError("zero-norm gaze vector")
    # atan2(|p x t|, p . t) instead of arccos(cos): identical vectors give an
    # exact 0 (the cross product vanishes bit-exactly) and small angles do not
    # lose precision to the flat top of the cosine
    dot = np.sum(p * t, axis=-1)
    cross = np.linalg.norm(np.cross(p, t), axis=-1)
    ang = np.degrees(np.arctan2(cross, dot))
    return float(ang.mean())


def accuracy(predicted_cells, truth_cells) -> float:
    """Fraction of exact grid-cell matches."""
    pred = list(predicted_cells)
    truth = list(truth_cells)
    if len(pred) != len(truth):
        raise ValidationError("prediction/truth length mismatch")
    if not pred:
        raise ValidationError("empty prediction list")
    return sum(tuple(a) == tuple(b) for a, b in zip(pred, truth)) / len(pred)
