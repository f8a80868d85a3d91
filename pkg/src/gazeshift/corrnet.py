"""Correlation transformer shared by local experts and the student.

Multi-head self-attention over the fused anchor+current sequence; outputs
class logits, the per-token latent used for distillation, and the attention
maps (per layer, plus the head-averaged last-layer map consumed by the soft
loss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, TrainingDivergedError, ValidationError
from .tokenizer import StateFusion, StateTensors, StateTokenizer, TokenizerConfig


@dataclass(frozen=True)
class TransformerConfig:
    depth: int = 2
    heads: int = 4
    dim: int = 64
    ff_dim: int = 128
    n_classes: int = 121
    dropout: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.dim % self.heads != 0:
            raise ConfigError("dim must be divisible by heads")


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    seed: int = 0
    lr_floor_factor: float = 0.1


def cosine_lr(epoch: int, total_epochs: int, lr0: float, floor_factor: float = 0.1) -> float:
    """Cosine annealing from lr0 down to floor_factor * lr0 at the last epoch."""
    if total_epochs <= 1:
        return lr0
    lo = floor_factor * lr0
    return lo + 0.5 * (lr0 - lo) * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


class MSA(nn.Module):
    """Multi-head self-attention that also returns its attention tensor."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None):
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.reshape(b, n, h, d // h).transpose(1, 2) for t in (q, k, v))
        scores = (q @ k.transpose(-1, -2)) * self.scale
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (self.dropout(attn) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = MSA(cfg.dim, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ff = nn.Sequential(
            nn.Linear(cfg.dim, cfg.ff_dim),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.ff_dim, cfg.dim),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, valid):
        a, attn = self.attn(self.norm1(x), valid)
        x = x + self.drop(a)
        x = x + self.drop(self.ff(self.norm2(x)))
        return x, attn


class GazeCorrNet(nn.Module):
    """Tokenizer + fusion + transformer + convolutional classification head.

    The head reshapes the current-state frame-token latents onto their
    spatial grid, applies a 3x3 convolution, flattens, and maps linearly to
    the class logits. (A pooled variant was tried and would not train: the
    spatial bottleneck collapses to uniform logits under minibatch SGD.)
    """

    def __init__(self, tok_cfg: TokenizerConfig, net_cfg: TransformerConfig):
        super().__init__()
        if tok_cfg.dim != net_cfg.dim:
            raise ConfigError("tokenizer and transformer dims must match")
        self.tok_cfg = tok_cfg
        self.net_cfg = net_cfg
        self.tokenizer = StateTokenizer(tok_cfg)
        self.fusion = StateFusion(tok_cfg)
        self.blocks = nn.ModuleList(Block(net_cfg) for _ in range(net_cfg.depth))
        self.norm = nn.LayerNorm(net_cfg.dim)
        self.head_conv = nn.Conv2d(net_cfg.dim, net_cfg.dim, kernel_size=3, padding=1)
        self.head_fc = nn.Linear(net_cfg.dim * tok_cfg.n_patches, net_cfg.n_classes)

    def encode(self, tokens: torch.Tensor, valid: torch.Tensor | None):
        """Run the transformer trunk on a pre-fused token sequence."""
        attns = []
        x = tokens
        for li, block in enumerate(self.blocks):
            x, attn = block(x, valid)
            if not torch.all(torch.isfinite(x)):
                raise NumericError(f"non-finite activations after transformer block {li}")
            attns.append(attn)
        latent = self.norm(x)
        return latent, attns

    def head(self, latent: torch.Tensor) -> torch.Tensor:
        p = self.tok_cfg.n_patches
        k = self.tok_cfg.voxel.k
        side = self.tok_cfg.frame_size // self.tok_cfg.patch_size
        cur_frame = latent[:, p + k : p + k + p, :]  # current-state frame tokens
        grid = cur_frame.transpose(1, 2).reshape(-1, self.net_cfg.dim, side, side)
        feat = F.gelu(self.head_conv(grid)).flatten(start_dim=1)
        return self.head_fc(feat)

    def forward(self, anchor: StateTensors, current: StateTensors):
        """Returns (logits, latent, attention maps).

        attention maps: list of per-layer (B, heads, L, L) tensors; the
        head-averaged last-layer map is `attns[-1].mean(dim=1)`.
        """
        a_tok, a_valid = self.tokenizer(anchor)
        c_tok, c_valid = self.tokenizer(current)
        if a_tok.shape[0] == 1 and c_tok.shape[0] > 1:
            a_tok = a_tok.expand_as(c_tok)
            a_valid = a_valid.expand_as(c_valid)
        tokens, valid = self.fusion(a_tok, a_valid, c_tok, c_valid)
        latent, attns = self.encode(tokens, valid)
        logits = self.head(latent)
        if not torch.all(torch.isfinite(logits)):
            raise NumericError("non-finite logits in classification head")
        return logits, latent, attns

    def soft_attention_map(self, attns: list[torch.Tensor]) -> torch.Tensor:
        """Head-averaged last-layer attention (B, L, L), row-stochastic."""
        return attns[-1].mean(dim=1)


def expert_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of softmax(logits) against integer class labels."""
    if labels.dim() == 0:
        labels = labels[None]
        logits = logits if logits.dim() == 2 else logits[None]
    if int(labels.max()) >= logits.shape[-1] or int(labels.min()) < 0:
        raise ValidationError(
            f"label out of range for {logits.shape[-1]} classes: {labels.tolist()}"
        )
    return F.cross_entropy(logits, labels)


def _iterate_batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for s in range(0, n, batch_size):
        yield perm[s : s + batch_size]


@torch.no_grad()
def classification_accuracy(model, anchor, states, labels, batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    for s in range(0, len(labels), batch_size):
        idx = slice(s, s + batch_size)
        logits, _, _ = model(anchor, states.select(idx))
        correct += int((logits.argmax(dim=-1) == labels[idx]).sum())
    return correct / len(labels)


def train_stage1(
    tok_cfg: TokenizerConfig,
    net_cfg: TransformerConfig,
    anchor: StateTensors,
    states: StateTensors,
    labels: torch.Tensor,
    settings: OptimSettings,
    val: tuple[StateTensors, torch.Tensor] | None = None,
) -> tuple[GazeCorrNet, list[dict]]:
    """Train one local expert (or the monolithic baseline) with cross-entropy.

    The model is constructed in here under the settings seed so identical
    settings reproduce identical parameters and losses.
    """
    torch.manual_seed(settings.seed)
    model = GazeCorrNet(tok_cfg, net_cfg)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=settings.lr,
        betas=(settings.beta1, 0.999),
        weight_decay=settings.weight_decay,
    )
    gen = torch.Generator().manual_seed(settings.seed)
    log = []
    for epoch in range(settings.epochs):
        lr = cosine_lr(epoch, settings.epochs, settings.lr, settings.lr_floor_factor)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        total, count = 0.0, 0
        for idx in _iterate_batches(len(labels), settings.batch_size, gen):
            logits, _, _ = model(anchor, states.select(idx))
            loss = expert_loss(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "stage-1 loss diverged", {"epoch": epoch, "loss": loss.detach().item()}
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.detach().item() * len(idx)
            count += len(idx)
        entry = {"epoch": epoch, "loss": total / count, "lr": lr}
        if val is not None:
            entry["val_acc"] = classification_accuracy(model, anchor, val[0], val[1])
            model.train()
        log.append(entry)
    model.eval()
    return model, log
