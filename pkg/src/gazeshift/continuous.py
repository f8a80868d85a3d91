"""Continuous gaze-coordinate regression head fine-tuned on the student."""

from __future__ import annotations

import torch
import torch.nn as nn

from .corrnet import GazeCorrNet, OptimSettings, cosine_lr
from .errors import TrainingDivergedError
from .tokenizer import StateTensors


class ContinuousHead(nn.Module):
    """2-layer FC from the mean-pooled student latent to (x, y) in [0,1]^2."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 2))

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return self.net(latent.mean(dim=1))


def coordinate_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE between predicted and true normalized screen coordinates."""
    return ((pred - target) ** 2).sum(dim=-1).mean()


def finetune_continuous(
    student: GazeCorrNet,
    anchors: StateTensors,
    states: StateTensors,
    coords: torch.Tensor,
    settings: OptimSettings,
    unfreeze_trunk: bool = False,
) -> tuple[ContinuousHead, list[dict]]:
    """Train the regression head on normalized [0,1]^2 screen coordinates.

    The student trunk is frozen by default; `unfreeze_trunk` fine-tunes it
    jointly with the head.
    """
    torch.manual_seed(settings.seed)
    head = ContinuousHead(student.net_cfg.dim)
    params = list(head.parameters())
    for p in student.parameters():
        p.requires_grad_(unfreeze_trunk)
    if unfreeze_trunk:
        params += list(student.parameters())
        student.train()
    else:
        student.eval()
    opt = torch.optim.AdamW(params, lr=settings.lr, weight_decay=settings.weight_decay)
    gen = torch.Generator().manual_seed(settings.seed)
    n = coords.shape[0]
    log = []
    for epoch in range(settings.epochs):
        lr = cosine_lr(epoch, settings.epochs, settings.lr, settings.lr_floor_factor)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for s in range(0, n, settings.batch_size):
            idx = perm[s : s + settings.batch_size].tolist()
            if unfreeze_trunk:
                _, latent, _ = student(anchors.select(idx), states.select(idx))
            else:
                with torch.no_grad():
                    _, latent, _ = student(anchors.select(idx), states.select(idx))
            loss = coordinate_loss(head(latent), coords[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError("continuous loss diverged", {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.detach().item() * len(idx)
        log.append({"epoch": epoch, "loss": total / n, "lr": lr})
    head.eval()
    for p in student.parameters():
        p.requires_grad_(True)
    student.eval()
    return head, log
