"""End-to-end orchestration: dataset loading, the two training stages,
evaluation, and the denoising-free inference path.

The flow mirrors the deployment story: register one anchor observation per
region, train the local experts against their anchors, fit the latent
denoiser on whitened expert latents, distill everything into one student,
then serve predictions by gating each incoming state to an anchor and
running a single student forward pass.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .anchors import (
    AnchorRegistry,
    AnchorSelector,
    RegionPartition,
    select_anchor,
    train_selector,
)
from .corrnet import (
    GazeCorrNet,
    OptimSettings,
    TransformerConfig,
    classification_accuracy,
    train_stage1,
)
from .diffusion import Denoiser, LatentWhitener, NoiseSchedule, train_denoiser
from .distill import DistillConfig, TeacherBank, train_stage2
from .errors import MissingArtifactError, ValidationError
from .frames import Frame
from .events import EventStream
from .geometry import ScreenGeometry, mae, screen_to_gaze_vector
from .manifest import DatasetManifest, GazeLabel, GazeSample
from .tokenizer import StateTensors, TokenizerConfig, prepare_state, stack_states


@dataclass
class LoadedSplit:
    """One dataset split lifted into batched model-ready tensors."""

    states: StateTensors
    cells: list[tuple[int, int]]
    labels: torch.Tensor  # flattened grid index, row * G + col
    coords: torch.Tensor  # normalized [0,1]^2 screen coordinates
    directions: np.ndarray  # unit gaze vectors, (n, 3)


def load_split(manifest: DatasetManifest, tag: str, tok_cfg: TokenizerConfig) -> LoadedSplit:
    entries = manifest.split(tag)
    if not entries:
        raise MissingArtifactError(f"manifest has no samples in split {tag!r}")
    states, cells, labels, coords, dirs = [], [], [], [], []
    for entry in entries:
        sample = manifest.load_sample(entry)
        states.append(prepare_state(sample, tok_cfg))
        cells.append((entry.row, entry.col))
        labels.append(entry.row * manifest.grid + entry.col)
        coords.append(
            (
                entry.screen_x / manifest.screen.width_px,
                entry.screen_y / manifest.screen.height_px,
            )
        )
        dirs.append(sample.label.direction)
    return LoadedSplit(
        stack_states(states),
        cells,
        torch.tensor(labels),
        torch.tensor(coords, dtype=torch.float32),
        np.stack(dirs),
    )


def build_registry(
    manifest: DatasetManifest, partition: RegionPartition, tok_cfg: TokenizerConfig
) -> AnchorRegistry:
    """Register the first training sample observed at each region's anchor cell."""
    registry = AnchorRegistry(partition, tok_cfg)
    train = manifest.split("train")
    for region_idx, region in enumerate(partition.regions):
        for entry in train:
            if (entry.row, entry.col) == region.anchor_cell:
                registry.register(region_idx, manifest.load_sample(entry))
                break
        else:
            raise MissingArtifactError(
                f"no training sample at anchor cell {region.anchor_cell} "
                f"for region {region_idx}"
            )
    return registry


def _region_subset(split: LoadedSplit, partition: RegionPartition, region: int):
    cells = partition.regions[region].cells
    idx = [j for j, cell in enumerate(split.cells) if cell in cells]
    if not idx:
        raise MissingArtifactError(f"split has no samples inside region {region}")
    labels = torch.tensor(
        [partition.local_label(region, split.cells[j]) for j in idx]
    )
    return split.states.select(idx), labels


def train_experts(
    train: LoadedSplit,
    val: LoadedSplit | None,
    registry: AnchorRegistry,
    partition: RegionPartition,
    tok_cfg: TokenizerConfig,
    net_cfg: TransformerConfig,
    settings: OptimSettings,
) -> tuple[list[GazeCorrNet], list[list[dict]]]:
    """Stage 1: one expert per region, trained on in-region samples only."""
    experts, logs = [], []
    for region in range(partition.n):
        states, labels = _region_subset(train, partition, region)
        cfg = replace(net_cfg, n_classes=len(partition.region_cells_sorted(region)))
        val_pair = None
        if val is not None:
            val_pair = _region_subset(val, partition, region)
        expert, log = train_stage1(
            tok_cfg,
            cfg,
            registry.get(region),
            states,
            labels,
            replace(settings, seed=settings.seed + region),
            val=val_pair,
        )
        experts.append(expert)
        logs.append(log)
    return experts, logs


def fit_selector(
    train: LoadedSplit,
    val: LoadedSplit | None,
    partition: RegionPartition,
    tok_cfg: TokenizerConfig,
    settings: OptimSettings,
) -> tuple[AnchorSelector, list[dict]]:
    labels = torch.tensor([partition.primary_region(c) for c in train.cells])
    val_pair = None
    if val is not None:
        val_pair = (
            val.states,
            torch.tensor([partition.primary_region(c) for c in val.cells]),
        )
    return train_selector(tok_cfg, partition.n, train.states, labels, settings, val=val_pair)


@torch.no_grad()
def collect_latents(
    experts: list[GazeCorrNet],
    registry: AnchorRegistry,
    partition: RegionPartition,
    split: LoadedSplit,
    batch_size: int = 64,
) -> np.ndarray:
    """Routed teacher latents for the train split, (n, seq_len, dim)."""
    out = []
    regions = [partition.primary_region(c) for c in split.cells]
    for j in range(len(split.cells)):
        expert = experts[regions[j]]
        expert.eval()
        _, latent, _ = expert(registry.get(regions[j]), split.states.select([j]))
        out.append(latent[0].numpy())
    return np.stack(out)


def fit_diffusion(
    latents: np.ndarray,
    schedule: NoiseSchedule,
    settings: OptimSettings,
    width: int = 256,
    blocks: int = 4,
) -> tuple[Denoiser, LatentWhitener, list[dict]]:
    """Whiten stage-1 latents, then fit the noise predictor on them."""
    whitener = LatentWhitener.fit(latents)
    white = whitener.whiten(latents).reshape(latents.shape[0], -1)
    denoiser, log = train_denoiser(
        torch.from_numpy(white).float(), schedule, settings, width=width, blocks=blocks
    )
    return denoiser, whitener, log


def distill_student(
    teachers: TeacherBank,
    train: LoadedSplit,
    val: LoadedSplit | None,
    partition: RegionPartition,
    tok_cfg: TokenizerConfig,
    net_cfg: TransformerConfig,
    cfg: DistillConfig,
):
    """Stage 2 wrapper operating on a loaded split."""
    grid_classes = partition.grid * partition.grid
    student_cfg = replace(net_cfg, n_classes=grid_classes)
    val_pair = (val.states, val.labels) if val is not None else None
    return train_stage2(
        teachers, tok_cfg, student_cfg, partition, train.states, train.cells, cfg, val=val_pair
    )


def train_monolithic(
    train: LoadedSplit,
    val: LoadedSplit | None,
    registry: AnchorRegistry,
    partition: RegionPartition,
    tok_cfg: TokenizerConfig,
    net_cfg: TransformerConfig,
    settings: OptimSettings,
) -> tuple[GazeCorrNet, list[dict]]:
    """Single-anchor full-grid baseline of the same capacity as the student.

    `partition` must be a 1-region layout; its lone anchor serves every cell.
    """
    if partition.n != 1:
        raise ValidationError("monolithic baseline expects a 1-region partition")
    cfg = replace(net_cfg, n_classes=partition.grid * partition.grid)
    val_pair = (val.states, val.labels) if val is not None else None
    return train_stage1(
        tok_cfg, cfg, registry.get(0), train.states, train.labels, settings, val=val_pair
    )


def cell_direction(cell: tuple[int, int], grid: int, screen: ScreenGeometry) -> np.ndarray:
    """Gaze vector of a grid cell's screen-space center."""
    px = (
        (cell[1] + 0.5) / grid * screen.width_px,
        (cell[0] + 0.5) / grid * screen.height_px,
    )
    return screen_to_gaze_vector(px, screen)


@torch.no_grad()
def _selector_regions(selector: AnchorSelector, states: StateTensors, batch_size: int = 64):
    selector.eval()
    regions = []
    n = states.frame.shape[0]
    for s in range(0, n, batch_size):
        logits = selector(states.select(slice(s, min(s + batch_size, n))))
        regions.extend(select_anchor(row) for row in logits)
    return regions


@torch.no_grad()
def evaluate_model(
    model: GazeCorrNet,
    registry: AnchorRegistry,
    partition: RegionPartition,
    split: LoadedSplit,
    screen: ScreenGeometry,
    selector: AnchorSelector | None = None,
    batch_size: int = 64,
) -> dict:
    """Full evaluation report: exact-cell accuracy, angular MAE in degrees,
    and a per-true-region breakdown. Anchors come from the gating network
    when one is given, otherwise from ground-truth primary regions."""
    model.eval()
    grid = partition.grid
    n = len(split.cells)
    if selector is not None:
        regions = _selector_regions(selector, split.states, batch_size)
    else:
        regions = [partition.primary_region(c) for c in split.cells]
    preds = []
    for s in range(0, n, batch_size):
        idx = list(range(s, min(s + batch_size, n)))
        anchors = stack_states([registry.get(regions[j]) for j in idx])
        logits, _, _ = model(anchors, split.states.select(idx))
        preds.extend(int(p) for p in logits.argmax(dim=-1))
    pred_cells = [(p // grid, p % grid) for p in preds]
    pred_dirs = np.stack([cell_direction(c, grid, screen) for c in pred_cells])
    report = {
        "n_samples": n,
        "accuracy": float(np.mean([pc == tc for pc, tc in zip(pred_cells, split.cells)])),
        "mae_deg": mae(pred_dirs, split.directions),
        "per_region": {},
    }
    true_regions = [partition.primary_region(c) for c in split.cells]
    for region in range(partition.n):
        idx = [j for j, r in enumerate(true_regions) if r == region]
        if not idx:
            continue
        report["per_region"][str(region)] = {
            "n_samples": len(idx),
            "accuracy": float(
                np.mean([pred_cells[j] == split.cells[j] for j in idx])
            ),
            "mae_deg": mae(pred_dirs[idx], split.directions[idx]),
            "selector_agreement": float(
                np.mean([regions[j] == region for j in idx])
            ),
        }
    return report


@torch.no_grad()
def infer_sample(
    model: GazeCorrNet,
    selector: AnchorSelector,
    registry: AnchorRegistry,
    partition: RegionPartition,
    tok_cfg: TokenizerConfig,
    frame: Frame,
    events: EventStream,
    screen: ScreenGeometry | None = None,
    continuous_head=None,
) -> dict:
    """Single-observation inference: gate to an anchor, one student forward.

    Never touches the denoiser; reconstruction happens only in training.
    Returns the predicted cell plus wall-clock latency, and screen
    coordinates when a continuous head is supplied.
    """
    placeholder = GazeLabel((0, 0), (0.0, 0.0), np.array([0.0, 0.0, 1.0]))
    sample = GazeSample(frame, events, placeholder)
    t0 = time.perf_counter()
    state = prepare_state(sample, tok_cfg)
    batch = stack_states([state])
    model.eval()
    selector.eval()
    region = select_anchor(selector(batch)[0])
    anchor = registry.get(region)
    logits, latent, _ = model(anchor, batch)
    pred = int(logits.argmax(dim=-1)[0])
    grid = partition.grid
    result = {
        "cell": [pred // grid, pred % grid],
        "region": region,
        "latency_ms": (time.perf_counter() - t0) * 1e3,
    }
    if continuous_head is not None:
        xy = continuous_head(latent)[0]
        result["coords_norm"] = [float(xy[0]), float(xy[1])]
        if screen is not None:
            result["coords_px"] = [
                float(xy[0]) * screen.width_px,
                float(xy[1]) * screen.height_px,
            ]
    return result


@torch.no_grad()
def dump_attention_heatmap(
    model: GazeCorrNet, anchor: StateTensors, state: StateTensors, path
) -> np.ndarray:
    """Write the attention mass received by each current-state frame token,
    reshaped onto the patch grid and upsampled to frame resolution, as an
    8-bit grayscale image. Returns the uint8 array."""
    from .frames import save_pgm

    model.eval()
    _, _, attns = model(anchor, state)
    soft = model.soft_attention_map(attns)[0]  # (L, L), row-stochastic
    p = model.tok_cfg.n_patches
    k = model.tok_cfg.voxel.k
    mass = soft.mean(dim=0)[p + k : p + k + p]  # column mass on current frame tokens
    side = model.tok_cfg.frame_size // model.tok_cfg.patch_size
    grid = mass.reshape(side, side).numpy()
    peak = grid.max()
    if peak <= 0:
        grid = np.zeros_like(grid)
        peak = 1.0
    img = np.kron(grid / peak, np.ones((model.tok_cfg.patch_size,) * 2))
    img8 = np.round(img * 255.0).astype(np.uint8)
    save_pgm(Frame(img8.astype(np.float64) / 255.0, t=0), path)
    return img8


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))
