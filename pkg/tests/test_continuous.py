import numpy as np
import pytest
import torch

from gazeshift import ContinuousHead, OptimSettings, coordinate_loss, finetune_continuous
from gazeshift.corrnet import GazeCorrNet, TransformerConfig
from gazeshift.tokenizer import StateTensors, TokenizerConfig
from gazeshift.voxel import VoxelGridSpec

TOK = TokenizerConfig(frame_size=8, patch_size=4,
                      voxel=VoxelGridSpec(4, 4, 1000, 2, max_events_per_voxel=4), dim=8)
NET = TransformerConfig(depth=1, heads=2, dim=8, ff_dim=16, n_classes=3, dropout=0.0)


def states(batch, seed=0):
    g = torch.Generator().manual_seed(seed)
    return StateTensors(
        frame=torch.rand(batch, 8, 8, generator=g),
        coords=torch.rand(batch, 2, 3, generator=g),
        offsets=torch.rand(batch, 2, 4, 4, generator=g),
        event_mask=torch.ones(batch, 2, 4, dtype=torch.bool),
        voxel_mask=torch.ones(batch, 2, dtype=torch.bool),
    )


class TestCoordinateLoss:
    def test_exact_prediction_zero(self):
        p = torch.tensor([[0.3, 0.7]])
        assert coordinate_loss(p, p).item() == 0.0

    def test_hand_value(self):
        pred = torch.tensor([[0.5, 0.5]])
        target = torch.tensor([[0.5, 0.9]])
        assert coordinate_loss(pred, target).item() == pytest.approx(0.16, rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        head = ContinuousHead(8).double()
        latent = torch.randn(2, 5, 8, dtype=torch.float64)
        target = torch.rand(2, 2, dtype=torch.float64)
        loss = coordinate_loss(head(latent), target)
        loss.backward()
        rng = np.random.default_rng(1)
        for p in head.parameters():
            flat = p.detach().reshape(-1)
            for idx in rng.choice(p.numel(), size=min(3, p.numel()), replace=False):
                h = 1e-6
                orig = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = orig + h
                    up = coordinate_loss(head(latent), target).item()
                    flat[idx] = orig - h
                    down = coordinate_loss(head(latent), target).item()
                    flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = p.grad.reshape(-1)[idx].item()
                if abs(fd) > 1e-8 or abs(an) > 1e-8:
                    assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6)


class TestFinetune:
    def test_frozen_trunk_unchanged(self):
        torch.manual_seed(0)
        student = GazeCorrNet(TOK, NET)
        before = [p.detach().clone() for p in student.parameters()]
        head, log = finetune_continuous(
            student, states(6), states(6, seed=1), torch.rand(6, 2),
            OptimSettings(lr=1e-2, epochs=2, batch_size=3, seed=0),
        )
        for p, b in zip(student.parameters(), before):
            assert torch.equal(p.detach(), b)
        assert all(p.requires_grad for p in student.parameters())
        assert len(log) == 2

    def test_unfrozen_trunk_moves(self):
        torch.manual_seed(0)
        student = GazeCorrNet(TOK, NET)
        before = [p.detach().clone() for p in student.parameters()]
        finetune_continuous(
            student, states(6), states(6, seed=1), torch.rand(6, 2),
            OptimSettings(lr=1e-2, epochs=2, batch_size=3, seed=0),
            unfreeze_trunk=True,
        )
        moved = sum(
            not torch.equal(p.detach(), b) for p, b in zip(student.parameters(), before)
        )
        assert moved > 0

    def test_head_reduces_loss(self):
        torch.manual_seed(1)
        student = GazeCorrNet(TOK, NET)
        _, log = finetune_continuous(
            student, states(16), states(16, seed=2), torch.rand(16, 2),
            OptimSettings(lr=1e-2, epochs=10, batch_size=8, seed=0),
        )
        assert log[-1]["loss"] < log[0]["loss"]
