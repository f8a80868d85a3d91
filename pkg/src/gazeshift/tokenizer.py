"""Learned tokenization: frame patches, event-voxel point-set features, and
fusion of an anchor state with the current state into one token sequence.

Layout of a fused sequence (length 2*(P+K)):
    [anchor frame tokens | anchor event tokens | current frame | current event]
Each token carries additive modality (frame/event) and state-role
(anchor/current) embeddings; empty voxel slots hold a learned null token and
are marked invalid in the key-padding mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError
from .manifest import GazeSample
from .voxel import VoxelGridSpec, voxelize, voxels_to_arrays


@dataclass(frozen=True)
class TokenizerConfig:
    frame_size: int = 48
    patch_size: int = 8
    voxel: VoxelGridSpec = VoxelGridSpec(w_cell=8, h_cell=8, t_cell=10_000, k=24)
    dim: int = 64

    def __post_init__(self):
        if self.frame_size % self.patch_size != 0:
            raise ConfigError("frame size must be divisible by patch size")

    @property
    def n_patches(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return 2 * (self.n_patches + self.voxel.k)


class StateTensors(NamedTuple):
    """Raw per-state tensors ready for the learned tokenizer (batch-first)."""

    frame: torch.Tensor  # (B, H, W)
    coords: torch.Tensor  # (B, K, 3)
    offsets: torch.Tensor  # (B, K, M, 4)
    event_mask: torch.Tensor  # (B, K, M) bool
    voxel_mask: torch.Tensor  # (B, K) bool

    def to(self, *args, **kwargs) -> "StateTensors":
        return StateTensors(*(t.to(*args, **kwargs) for t in self))

    def select(self, idx) -> "StateTensors":
        return StateTensors(*(t[idx] for t in self))


def prepare_state(sample: GazeSample, cfg: TokenizerConfig) -> StateTensors:
    """Voxelize and pack one sample into unbatched StateTensors (B=1)."""
    voxels = voxelize(sample.events, cfg.voxel)
    coords, offsets, event_mask, voxel_mask = voxels_to_arrays(voxels, cfg.voxel)
    return StateTensors(
        frame=torch.from_numpy(sample.frame.intensity.astype(np.float32))[None],
        coords=torch.from_numpy(coords)[None],
        offsets=torch.from_numpy(offsets)[None],
        event_mask=torch.from_numpy(event_mask)[None],
        voxel_mask=torch.from_numpy(voxel_mask)[None],
    )


def stack_states(states: list[StateTensors]) -> StateTensors:
    return StateTensors(*(torch.cat(ts, dim=0) for ts in zip(*states)))


class PatchEmbed(nn.Module):
    """Linear patch projection plus a learned positional table.

    The projection is bias-free so the map is exactly linear in the frame up
    to the additive positional term.
    """

    def __init__(self, frame_size: int, patch_size: int, dim: int):
        super().__init__()
        if frame_size % patch_size != 0:
            raise ConfigError("frame size must be divisible by patch size")
        self.patch_size = patch_size
        self.n_side = frame_size // patch_size
        self.proj = nn.Linear(patch_size * patch_size, dim, bias=False)
        self.pos = nn.Parameter(torch.randn(self.n_side**2, dim) * 0.02)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        b, h, w = frame.shape
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"frame {h}x{w} not divisible by patch size {p}")
        patches = (
            frame.reshape(b, h // p, p, w // p, p)
            .permute(0, 1, 3, 2, 4)
            .reshape(b, (h // p) * (w // p), p * p)
        )
        return self.proj(patches) + self.pos


class PointSetEncoder(nn.Module):
    """Shared per-event MLP followed by masked coordinate-wise max pooling.

    Max pooling makes the feature exactly permutation-invariant (bit-equal
    under reordering, since max is order-free).
    """

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(4, hidden), nn.ReLU(), nn.Linear(hidden, dim)
        )

    def forward(self, offsets: torch.Tensor, event_mask: torch.Tensor) -> torch.Tensor:
        # offsets: (..., M, 4), event_mask: (..., M)
        emb = self.mlp(offsets)
        neg = torch.finfo(emb.dtype).min
        emb = torch.where(event_mask[..., None], emb, neg)
        pooled = emb.amax(dim=-2)
        # voxels with no events pool to -inf sentinels; zero them (they are
        # replaced by the null token downstream anyway)
        return torch.where(event_mask.any(dim=-1, keepdim=True), pooled, torch.zeros_like(pooled))


class StateTokenizer(nn.Module):
    """Maps StateTensors to (tokens (B, P+K, d), valid mask (B, P+K))."""

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.frame_size, cfg.patch_size, cfg.dim)
        self.point_encoder = PointSetEncoder(cfg.dim)
        self.coord_proj = nn.Linear(3, cfg.dim)
        self.null_token = nn.Parameter(torch.randn(cfg.dim) * 0.02)
        self.event_pos = nn.Parameter(torch.randn(cfg.voxel.k, cfg.dim) * 0.02)

    def forward(self, state: StateTensors):
        frame_tokens = self.patch_embed(state.frame)
        feats = self.point_encoder(state.offsets, state.event_mask)
        event_tokens = feats + self.coord_proj(state.coords) + self.event_pos
        event_tokens = torch.where(
            state.voxel_mask[..., None], event_tokens, self.null_token.expand_as(event_tokens)
        )
        tokens = torch.cat([frame_tokens, event_tokens], dim=1)
        valid = torch.cat(
            [
                torch.ones(frame_tokens.shape[:2], dtype=torch.bool, device=tokens.device),
                state.voxel_mask,
            ],
            dim=1,
        )
        return tokens, valid


class StateFusion(nn.Module):
    """Concatenates anchor and current token runs with modality/role tags."""

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.n_patches = cfg.n_patches
        self.k = cfg.voxel.k
        self.modality_emb = nn.Parameter(torch.randn(2, cfg.dim) * 0.02)  # frame/event
        self.role_emb = nn.Parameter(torch.randn(2, cfg.dim) * 0.02)  # anchor/current

    def forward(self, anchor_tokens, anchor_valid, current_tokens, current_valid):
        if anchor_tokens.shape != current_tokens.shape:
            raise ConfigError("anchor/current token shapes differ")
        p, k = self.n_patches, self.k
        mod = torch.cat(
            [self.modality_emb[0].expand(p, -1), self.modality_emb[1].expand(k, -1)], dim=0
        )
        fused = torch.cat(
            [anchor_tokens + mod + self.role_emb[0], current_tokens + mod + self.role_emb[1]],
            dim=1,
        )
        valid = torch.cat([anchor_valid, current_valid], dim=1)
        return fused, valid
