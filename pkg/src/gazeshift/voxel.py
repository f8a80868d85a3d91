"""Event voxelization: partition H x W x T into cells, keep the top-K by count.

The learned per-voxel feature encoder lives in tokenizer.py; this module is
pure numpy and produces the tensors it consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .events import EventStream


@dataclass(frozen=True)
class VoxelGridSpec:
    """Cell extents (pixels / microseconds) and the number of voxels kept."""

    w_cell: int
    h_cell: int
    t_cell: int
    k: int
    max_events_per_voxel: int = 32  # cap for batched point-set encoding

    def __post_init__(self):
        if self.w_cell <= 0 or self.h_cell <= 0 or self.t_cell <= 0:
            raise ConfigError("voxel cell extents must be positive")
        if self.k < 1:
            raise ConfigError("K must be >= 1")


@dataclass(frozen=True)
class EventVoxel:
    """A retained voxel: normalized centre coords, event count, member events."""

    coords: np.ndarray  # (3,) in [0,1]^3: (x, y, t) of the cell centre
    count: int
    offsets: np.ndarray  # (n, 4): within-cell normalized (dx, dy, dt, polarity)
    cell_index: int


def voxelize(events: EventStream, spec: VoxelGridSpec) -> list[EventVoxel]:
    """Return the K most populated voxels, ties broken by (count desc, cell asc).

    Fewer than K non-empty voxels are returned as-is; the tokenizer pads.
    Zero events yield an empty list.
    """
    if len(events) == 0:
        return []
    ev = events.events
    nx = -(-events.width // spec.w_cell)
    ny = -(-events.height // spec.h_cell)
    duration = max(events.duration, 1)
    nt = -(-duration // spec.t_cell)

    cx = ev["x"] // spec.w_cell
    cy = ev["y"] // spec.h_cell
    ct = np.minimum((ev["t"] - events.t_start) // spec.t_cell, nt - 1).astype(np.int64)
    lin = (ct * ny + cy) * nx + cx

    cells, counts = np.unique(lin, return_counts=True)
    # sort by (count desc, linear index asc); cells is already ascending so a
    # stable sort on -count preserves the index tie-break
    order = np.argsort(-counts, kind="stable")[: spec.k]

    voxels = []
    for idx in order:
        cell = int(cells[idx])
        members = np.nonzero(lin == cell)[0]
        vt, rem = divmod(cell, ny * nx)
        vy, vx = divmod(rem, nx)
        # ceil-division grids can push the last cell centre past 1; clip
        coords = np.minimum(
            np.array(
                [
                    (vx + 0.5) * spec.w_cell / events.width,
                    (vy + 0.5) * spec.h_cell / events.height,
                    (vt + 0.5) * spec.t_cell / duration,
                ]
            ),
            1.0,
        )
        m = ev[members]
        offsets = np.stack(
            [
                (m["x"].astype(np.float64) - vx * spec.w_cell) / spec.w_cell,
                (m["y"].astype(np.float64) - vy * spec.h_cell) / spec.h_cell,
                ((m["t"] - events.t_start).astype(np.float64) - vt * spec.t_cell)
                / spec.t_cell,
                m["polarity"].astype(np.float64),
            ],
            axis=-1,
        )
        voxels.append(
            EventVoxel(coords=coords, count=int(counts[idx]), offsets=offsets, cell_index=cell)
        )
    return voxels


def voxels_to_arrays(voxels: list[EventVoxel], spec: VoxelGridSpec):
    """Pad voxels into fixed-size arrays for batching.

    Returns (coords (K,3), offsets (K,M,4), event_mask (K,M), voxel_mask (K,))
    where M = spec.max_events_per_voxel. Voxels with more than M events keep
    their first M (time order).
    """
    k, m = spec.k, spec.max_events_per_voxel
    coords = np.zeros((k, 3), dtype=np.float32)
    offsets = np.zeros((k, m, 4), dtype=np.float32)
    event_mask = np.zeros((k, m), dtype=bool)
    voxel_mask = np.zeros(k, dtype=bool)
    for j, v in enumerate(voxels[:k]):
        n = min(v.count, m)
        coords[j] = v.coords
        offsets[j, :n] = v.offsets[:n]
        event_mask[j, :n] = True
        voxel_mask[j] = True
    return coords, offsets, event_mask, voxel_mask
