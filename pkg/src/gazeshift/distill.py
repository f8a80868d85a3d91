"""Stage-2 distillation: hard cross-entropy, attention soft loss, and the
denoised multi-sample feature loss, combined as alpha*L_e + beta*L_s + lambda*L_d.

Teachers (experts, anchor registry, denoiser, whitening stats) are frozen;
each training sample is routed to the teacher of its ground-truth primary
region, and the student consumes the same input (with that region's anchor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .anchors import AnchorRegistry, RegionPartition
from .corrnet import (
    GazeCorrNet,
    OptimSettings,
    TransformerConfig,
    classification_accuracy,
    cosine_lr,
    expert_loss,
)
from .diffusion import Denoiser, LatentWhitener, NoiseSchedule, reverse_sample
from .errors import TrainingDivergedError, ValidationError
from .tokenizer import StateTensors, TokenizerConfig

KL_FLOOR = 1e-8


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 500.0
    n_recon: int = 16  # S, reconstruction samples per item
    optim: OptimSettings = OptimSettings(lr=1e-5, epochs=60, batch_size=4)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.n_recon < 1:
            raise ValidationError("S must be >= 1")


@dataclass
class TeacherBank:
    experts: list[GazeCorrNet]
    registry: AnchorRegistry
    denoiser: Denoiser | None
    whitener: LatentWhitener | None
    schedule: NoiseSchedule | None

    def __post_init__(self):
        for expert in self.experts:
            expert.eval()
            for p in expert.parameters():
                p.requires_grad_(False)
        if self.denoiser is not None:
            self.denoiser.eval()
            for p in self.denoiser.parameters():
                p.requires_grad_(False)


def distill_feature_loss(
    student_latent: torch.Tensor, reconstructions: torch.Tensor, alpha_bar_i: float
) -> torch.Tensor:
    """Mean over the S reconstructions of the per-element MSE between the
    student latent and each reconstruction scaled by 1/sqrt(alpha_bar_i)."""
    target = reconstructions / math.sqrt(alpha_bar_i)
    if student_latent.shape != target.shape[1:]:
        raise ValidationError(
            f"latent shape {tuple(student_latent.shape)} does not match "
            f"reconstruction shape {tuple(target.shape[1:])}"
        )
    return ((student_latent[None] - target) ** 2).mean()


def soft_attention_loss(t_student: torch.Tensor, t_expert: torch.Tensor) -> torch.Tensor:
    """Mean over rows of KL(expert row || student row), with 1e-8 flooring."""
    if t_student.shape != t_expert.shape:
        raise ValidationError("attention map shapes differ")
    for name, m in (("student", t_student), ("expert", t_expert)):
        rowsum = m.sum(dim=-1)
        if not torch.all((rowsum - 1.0).abs() < 1e-4) or m.min() < -1e-9:
            raise ValidationError(f"{name} attention map is not row-stochastic")
    p = t_expert.clamp_min(KL_FLOOR)
    q = t_student.clamp_min(KL_FLOOR)
    return (t_expert * (p.log() - q.log())).sum(dim=-1).mean()


def total_loss(l_e, l_s, l_d, cfg: DistillConfig):
    return cfg.alpha * l_e + cfg.beta * l_s + cfg.lam * l_d


def train_stage2(
    teachers: TeacherBank,
    tok_cfg: TokenizerConfig,
    student_cfg: TransformerConfig,
    partition: RegionPartition,
    states: StateTensors,
    cells: list[tuple[int, int]],
    cfg: DistillConfig,
    val: tuple[StateTensors, torch.Tensor] | None = None,
) -> tuple[GazeCorrNet, list[dict]]:
    """Distill the frozen experts into a full-grid student.

    `cells` are ground-truth grid cells; routing uses the primary-region map.
    Per step: teacher forward (frozen), whiten the teacher latent, draw S
    bridge reconstructions, and combine L_e + L_s + L_d on the student.
    """
    grid = partition.grid
    labels = torch.tensor([r * grid + c for r, c in cells])
    regions = [partition.primary_region(cell) for cell in cells]
    if (cfg.lam > 0 or cfg.beta > 0) and len(teachers.experts) != partition.n:
        raise ValidationError("teacher bank size does not match the partition")
    if cfg.lam > 0 and (
        teachers.denoiser is None or teachers.whitener is None or teachers.schedule is None
    ):
        raise ValidationError("feature distillation requires a denoiser + whitener")

    torch.manual_seed(cfg.optim.seed)
    student = GazeCorrNet(tok_cfg, student_cfg)
    opt = torch.optim.AdamW(
        student.parameters(),
        lr=cfg.optim.lr,
        betas=(cfg.optim.beta1, 0.999),
        weight_decay=cfg.optim.weight_decay,
    )
    gen = torch.Generator().manual_seed(cfg.optim.seed)
    recon_gen = torch.Generator().manual_seed(cfg.optim.seed + 1)

    teacher_sig = (
        [_param_signature(e) for e in teachers.experts] if teachers.experts else []
    )
    n = len(cells)
    log = []
    i_lo, i_hi = (teachers.schedule.i_range if teachers.schedule else (0, 0))
    for epoch in range(cfg.optim.epochs):
        lr = cosine_lr(epoch, cfg.optim.epochs, cfg.optim.lr, cfg.optim.lr_floor_factor)
        for group in opt.param_groups:
            group["lr"] = lr
        student.train()
        sums = {"l_e": 0.0, "l_s": 0.0, "l_d": 0.0, "total": 0.0}
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, cfg.optim.batch_size):
            idx = perm[s : s + cfg.optim.batch_size].tolist()
            batch_states = states.select(idx)
            batch_regions = [regions[j] for j in idx]
            anchors = [teachers.registry.get(r) for r in batch_regions]
            from .tokenizer import stack_states

            anchor_batch = stack_states(anchors)

            logits, latent, attns = student(anchor_batch, batch_states)
            l_e = expert_loss(logits, labels[idx])
            l_s = torch.zeros(())
            l_d = torch.zeros(())
            if cfg.beta > 0 or cfg.lam > 0:
                student_attn = student.soft_attention_map(attns)
                with torch.no_grad():
                    teacher_latents, teacher_attns = [], []
                    for j, region in enumerate(batch_regions):
                        _, t_lat, t_att = teachers.experts[region](
                            anchors[j], batch_states.select([j])
                        )
                        teacher_latents.append(t_lat[0])
                        teacher_attns.append(teachers.experts[region].soft_attention_map(t_att)[0])
                if cfg.beta > 0:
                    l_s = soft_attention_loss(student_attn, torch.stack(teacher_attns))
                if cfg.lam > 0:
                    sched = teachers.schedule
                    l_d_terms = []
                    for j in range(len(idx)):
                        i_step = int(
                            torch.randint(i_lo, i_hi + 1, (1,), generator=recon_gen)[0]
                        )
                        with torch.no_grad():
                            white = teachers.whitener.whiten(teacher_latents[j])
                            recon = reverse_sample(
                                white,
                                i_step,
                                sched,
                                teachers.denoiser,
                                recon_gen,
                                cfg.n_recon,
                            )
                        student_white = teachers.whitener.whiten(latent[j])
                        l_d_terms.append(
                            distill_feature_loss(
                                student_white, recon, sched.gamma_prime(i_step)
                            )
                        )
                    l_d = torch.stack(l_d_terms).mean()
            loss = total_loss(l_e, l_s, l_d, cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "stage-2 loss diverged",
                    {"epoch": epoch, "l_e": l_e.detach().item(), "l_s": l_s.detach().item(), "l_d": l_d.detach().item()},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            for key, value in (
                ("l_e", l_e),
                ("l_s", l_s),
                ("l_d", l_d),
                ("total", loss),
            ):
                sums[key] += value.detach().item() * len(idx)
        entry = {"epoch": epoch, "lr": lr, **{k: v / n for k, v in sums.items()}}
        if val is not None:
            entry["val_acc"] = _routed_accuracy(student, teachers.registry, partition, *val)
        log.append(entry)
    student.eval()
    for expert, sig in zip(teachers.experts, teacher_sig):
        if _param_signature(expert) != sig:
            raise ValidationError("teacher parameters changed during stage 2")
    return student, log


def _param_signature(model: torch.nn.Module) -> bytes:
    return b"".join(p.detach().numpy().tobytes() for p in model.parameters())


@torch.no_grad()
def _routed_accuracy(student, registry, partition, states, labels, batch_size: int = 64):
    from .tokenizer import stack_states

    student.eval()
    grid = partition.grid
    cells = [(int(l) // grid, int(l) % grid) for l in labels]
    correct = 0
    for s in range(0, len(cells), batch_size):
        idx = list(range(s, min(s + batch_size, len(cells))))
        anchors = stack_states(
            [registry.get(partition.primary_region(cells[j])) for j in idx]
        )
        logits, _, _ = student(anchors, states.select(idx))
        correct += int((logits.argmax(dim=-1) == labels[idx[0] : idx[-1] + 1]).sum())
    student.train()
    return correct / len(cells)
