"""Grid partitioning, anchor registration, and the anchor-selection gate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corrnet import OptimSettings, cosine_lr, expert_loss
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .manifest import GazeSample
from .tokenizer import StateTensors, StateTokenizer, TokenizerConfig

# block tilings (rows x cols, plus an optional central square) per region count
_LAYOUTS = {
    1: (1, 1, False),
    2: (1, 2, False),
    3: (1, 3, False),
    4: (2, 2, False),
    5: (2, 2, True),
    6: (2, 3, False),
    7: (2, 3, True),
    8: (2, 4, False),
    9: (3, 3, False),
}


@dataclass(frozen=True)
class Region:
    cells: frozenset[tuple[int, int]]
    anchor_cell: tuple[int, int]


@dataclass(frozen=True)
class RegionPartition:
    grid: int
    regions: tuple[Region, ...]

    @property
    def n(self) -> int:
        return len(self.regions)

    def primary_region(self, cell: tuple[int, int]) -> int:
        """Region whose anchor cell is nearest (Euclidean); ties to lower index."""
        r, c = cell
        best, best_d = 0, math.inf
        for i, reg in enumerate(self.regions):
            ar, ac = reg.anchor_cell
            d = (r - ar) ** 2 + (c - ac) ** 2
            if d < best_d:
                best, best_d = i, d
        return best

    def region_cells_sorted(self, region: int) -> list[tuple[int, int]]:
        return sorted(self.regions[region].cells)

    def local_label(self, region: int, cell: tuple[int, int]) -> int:
        cells = self.region_cells_sorted(region)
        try:
            return cells.index(tuple(cell))
        except ValueError:
            raise ValidationError(f"cell {cell} not in region {region}") from None


def _splits(g: int, parts: int) -> list[tuple[int, int]]:
    """Inclusive index ranges; adjacent parts share their boundary cell."""
    return [
        (math.floor(k * (g - 1) / parts), math.floor((k + 1) * (g - 1) / parts))
        for k in range(parts)
    ]


def partition_grid(grid: int, n: int = 5) -> RegionPartition:
    """Overlapping block partition; for N=5 on G=11 this is the four 6x6
    corner quadrants plus a central 5x5 region."""
    if grid < 3:
        raise ConfigError("grid must be >= 3")
    if n not in _LAYOUTS:
        raise ConfigError(f"unsupported region count {n}; supported: 1..9")
    rows, cols, with_center = _LAYOUTS[n]
    regions = []
    for rlo, rhi in _splits(grid, rows):
        for clo, chi in _splits(grid, cols):
            cells = frozenset(
                (r, c) for r in range(rlo, rhi + 1) for c in range(clo, chi + 1)
            )
            regions.append(Region(cells, ((rlo + rhi) // 2, (clo + chi) // 2)))
    if with_center:
        side = grid // 2 if (grid // 2) % 2 == 1 else grid // 2 + 1
        side = min(side, grid)
        lo = (grid - side) // 2
        cells = frozenset(
            (r, c) for r in range(lo, lo + side) for c in range(lo, lo + side)
        )
        regions.append(Region(cells, (grid // 2, grid // 2)))
    return RegionPartition(grid, tuple(regions))


@dataclass
class AnchorRegistry:
    """One registered anchor sample (and its tensors) per region."""

    partition: RegionPartition
    tok_cfg: TokenizerConfig
    anchors: dict[int, StateTensors] = field(default_factory=dict)
    anchor_cells: dict[int, tuple[int, int]] = field(default_factory=dict)

    def register(self, region: int, sample: GazeSample) -> None:
        expected = self.partition.regions[region].anchor_cell
        if tuple(sample.label.cell) != expected:
            raise ValidationError(
                f"anchor sample cell {sample.label.cell} does not match the "
                f"region {region} anchor cell {expected}"
            )
        from .tokenizer import prepare_state

        self.anchors[region] = prepare_state(sample, self.tok_cfg)
        self.anchor_cells[region] = expected

    def register_tensors(self, region: int, state: StateTensors) -> None:
        self.anchors[region] = state
        self.anchor_cells[region] = self.partition.regions[region].anchor_cell

    def get(self, region: int) -> StateTensors:
        if region not in self.anchors:
            raise ValidationError(f"no anchor registered for region {region}")
        return self.anchors[region]

    @property
    def complete(self) -> bool:
        return len(self.anchors) == self.partition.n


def save_registry(registry: AnchorRegistry, path) -> None:
    """Region layout as JSON plus anchor tensors as an .npz blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layout = {
        "grid": registry.partition.grid,
        "n": registry.partition.n,
        "anchor_cells": {str(k): list(v) for k, v in registry.anchor_cells.items()},
    }
    (path / "registry.json").write_text(json.dumps(layout, indent=1))
    arrays = {}
    for region, state in registry.anchors.items():
        for name, tensor in zip(StateTensors._fields, state):
            arrays[f"{region}:{name}"] = tensor.numpy()
    np.savez(path / "anchors.npz", **arrays)


def load_registry(path, partition: RegionPartition, tok_cfg: TokenizerConfig) -> AnchorRegistry:
    path = Path(path)
    layout = json.loads((path / "registry.json").read_text())
    if layout["grid"] != partition.grid or layout["n"] != partition.n:
        raise ValidationError("registry layout does not match the partition")
    registry = AnchorRegistry(partition, tok_cfg)
    blob = np.load(path / "anchors.npz")
    for key in layout["anchor_cells"]:
        region = int(key)
        state = StateTensors(
            *(torch.from_numpy(blob[f"{region}:{name}"]) for name in StateTensors._fields)
        )
        registry.register_tensors(region, state)
    return registry


class AnchorSelector(nn.Module):
    """Gating network: tokenize the current state, flatten the token run,
    2-layer MLP. (Mean pooling was tried first and plateaus well below a
    usable routing accuracy: the region depends on where the pupil sits, and
    pooling averages that spatial signal away.)"""

    def __init__(self, tok_cfg: TokenizerConfig, n_regions: int, hidden: int = 128):
        super().__init__()
        self.tokenizer = StateTokenizer(tok_cfg)
        n_tokens = tok_cfg.n_patches + tok_cfg.voxel.k
        self.mlp = nn.Sequential(
            nn.Linear(n_tokens * tok_cfg.dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, n_regions),
        )

    def forward(self, state: StateTensors) -> torch.Tensor:
        tokens, valid = self.tokenizer(state)
        flat = (tokens * valid[..., None]).flatten(start_dim=1)
        return self.mlp(flat)


def select_anchor(logits) -> int:
    """Deterministic argmax over region logits; exact ties go to the lower index."""
    arr = np.asarray(
        logits.detach().numpy() if isinstance(logits, torch.Tensor) else logits,
        dtype=np.float64,
    ).reshape(-1)
    return int(np.argmax(arr))  # np.argmax returns the first maximal index


def train_selector(
    tok_cfg: TokenizerConfig,
    n_regions: int,
    states: StateTensors,
    region_labels: torch.Tensor,
    settings: OptimSettings,
    val: tuple[StateTensors, torch.Tensor] | None = None,
) -> tuple[AnchorSelector, list[dict]]:
    """Cross-entropy training of the gate on primary-region labels."""
    torch.manual_seed(settings.seed)
    model = AnchorSelector(tok_cfg, n_regions)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=settings.lr,
        betas=(settings.beta1, 0.999),
        weight_decay=settings.weight_decay,
    )
    gen = torch.Generator().manual_seed(settings.seed)
    log = []
    n = len(region_labels)
    for epoch in range(settings.epochs):
        lr = cosine_lr(epoch, settings.epochs, settings.lr, settings.lr_floor_factor)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for s in range(0, n, settings.batch_size):
            idx = perm[s : s + settings.batch_size]
            loss = expert_loss(model(states.select(idx)), region_labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "selector loss diverged", {"epoch": epoch, "loss": loss.detach().item()}
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.detach().item() * len(idx)
        entry = {"epoch": epoch, "loss": total / n, "lr": lr}
        if val is not None:
            model.eval()
            with torch.no_grad():
                pred = model(val[0]).argmax(dim=-1)
            entry["val_acc"] = float((pred == val[1]).float().mean())
        log.append(entry)
    model.eval()
    return model, log
