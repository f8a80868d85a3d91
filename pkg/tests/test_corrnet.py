import math

import numpy as np
import pytest
import torch

from gazeshift import (
    GazeCorrNet,
    NumericError,
    OptimSettings,
    TokenizerConfig,
    TransformerConfig,
    ValidationError,
    VoxelGridSpec,
    expert_loss,
    train_stage1,
)
from gazeshift.corrnet import MSA, cosine_lr
from gazeshift.tokenizer import StateTensors

TINY_TOK = TokenizerConfig(
    frame_size=8, patch_size=4, voxel=VoxelGridSpec(4, 4, 1000, 2, max_events_per_voxel=4), dim=8
)
TINY_NET = TransformerConfig(depth=1, heads=2, dim=8, ff_dim=16, n_classes=3, dropout=0.0)


def tiny_state(batch, seed=0):
    g = torch.Generator().manual_seed(seed)
    return StateTensors(
        frame=torch.rand(batch, 8, 8, generator=g),
        coords=torch.rand(batch, 2, 3, generator=g),
        offsets=torch.rand(batch, 2, 4, 4, generator=g),
        event_mask=torch.rand(batch, 2, 4, generator=g) > 0.3,
        voxel_mask=torch.ones(batch, 2, dtype=torch.bool),
    )


class TestCosineLr:
    def test_endpoints(self):
        assert cosine_lr(0, 30, 1e-3) == pytest.approx(1e-3)
        assert cosine_lr(29, 30, 1e-3) == pytest.approx(1e-4)

    def test_monotone_decay(self):
        vals = [cosine_lr(e, 20, 1.0) for e in range(20)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_single_epoch(self):
        assert cosine_lr(0, 1, 5e-4) == 5e-4


class TestMSA:
    def test_attention_matches_hand_computation(self):
        torch.manual_seed(0)
        msa = MSA(dim=4, heads=1, dropout=0.0).eval()
        x = torch.randn(1, 3, 4)
        with torch.no_grad():
            _, attn = msa(x, None)
            qkv = x @ msa.qkv.weight.T + msa.qkv.bias
        q, k = qkv[..., :4], qkv[..., 4:8]
        scores = (q @ k.transpose(-1, -2)).numpy() / math.sqrt(4)
        expect = np.exp(scores) / np.exp(scores).sum(-1, keepdims=True)
        assert np.allclose(attn[0, 0].numpy(), expect[0], atol=1e-6)

    def test_rows_stochastic(self):
        torch.manual_seed(1)
        msa = MSA(8, 2, 0.0).eval()
        _, attn = msa(torch.randn(2, 5, 8), None)
        assert torch.allclose(attn.sum(-1), torch.ones(2, 2, 5), atol=1e-6)

    def test_masked_keys_get_zero_attention(self):
        torch.manual_seed(2)
        msa = MSA(8, 2, 0.0).eval()
        valid = torch.tensor([[True, True, False, True]])
        _, attn = msa(torch.randn(1, 4, 8), valid)
        assert torch.all(attn[..., 2] == 0.0)
        assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)))


class TestExpertLoss:
    def test_uniform_logits_give_log_n(self):
        logits = torch.zeros(4, 5)
        labels = torch.tensor([0, 1, 2, 3])
        assert expert_loss(logits, labels).item() == pytest.approx(math.log(5), rel=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            expert_loss(torch.zeros(1, 3), torch.tensor([3]))

    def test_perfect_logits_near_zero(self):
        logits = torch.full((2, 3), -50.0)
        logits[0, 1] = 50.0
        logits[1, 0] = 50.0
        assert expert_loss(logits, torch.tensor([1, 0])).item() < 1e-6


class TestGazeCorrNet:
    def test_forward_shapes(self):
        torch.manual_seed(0)
        model = GazeCorrNet(TINY_TOK, TINY_NET).eval()
        logits, latent, attns = model(tiny_state(1), tiny_state(2, seed=1))
        assert logits.shape == (2, 3)
        assert latent.shape == (2, 12, 8)  # 2 * (4 patches + 2 voxels)
        assert len(attns) == 1 and attns[0].shape == (2, 2, 12, 12)

    def test_anchor_broadcast_matches_repeat(self):
        torch.manual_seed(0)
        model = GazeCorrNet(TINY_TOK, TINY_NET).eval()
        anchor = tiny_state(1)
        current = tiny_state(3, seed=2)
        l1, _, _ = model(anchor, current)
        repeated = StateTensors(*(t.repeat(3, *([1] * (t.dim() - 1))) for t in anchor))
        l2, _, _ = model(repeated, current)
        assert torch.allclose(l1, l2, atol=1e-6)

    def test_soft_attention_map_row_stochastic(self):
        torch.manual_seed(3)
        model = GazeCorrNet(TINY_TOK, TINY_NET).eval()
        _, _, attns = model(tiny_state(1), tiny_state(1, seed=4))
        soft = model.soft_attention_map(attns)
        assert soft.shape == (1, 12, 12)
        assert torch.allclose(soft.sum(-1), torch.ones(1, 12), atol=1e-6)

    def test_non_finite_input_raises_with_block_index(self):
        torch.manual_seed(4)
        model = GazeCorrNet(TINY_TOK, TINY_NET).eval()
        bad = torch.full((1, 12, 8), float("nan"))
        with pytest.raises(NumericError, match="block 0"):
            model.encode(bad, None)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(Exception):
            GazeCorrNet(TINY_TOK, TransformerConfig(dim=16, heads=2, n_classes=3))

    def test_gradient_matches_finite_differences(self):
        """Cross-entropy gradient through the full tiny network in float64."""
        torch.manual_seed(5)
        model = GazeCorrNet(TINY_TOK, TINY_NET).double()

        def to_double(s):
            return StateTensors(
                s.frame.double(), s.coords.double(), s.offsets.double(),
                s.event_mask, s.voxel_mask,
            )

        anchor = to_double(tiny_state(1))
        current = to_double(tiny_state(2, seed=6))
        labels = torch.tensor([0, 2])

        def loss_fn():
            logits, _, _ = model(anchor, current)
            return expert_loss(logits, labels)

        loss = loss_fn()
        loss.backward()
        rng = np.random.default_rng(0)
        checked = 0
        for p in model.parameters():
            if p.grad is None or p.numel() == 0:
                continue
            flat = p.detach().reshape(-1)
            for idx in rng.choice(p.numel(), size=min(3, p.numel()), replace=False):
                h = 1e-6
                orig = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = orig + h
                    up = loss_fn().item()
                    flat[idx] = orig - h
                    down = loss_fn().item()
                    flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = p.grad.reshape(-1)[idx].item()
                if abs(fd) > 1e-8 or abs(an) > 1e-8:
                    assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6)
                checked += 1
        assert checked > 20


class TestTrainStage1:
    def test_reproducible_losses(self):
        states = tiny_state(12, seed=7)
        labels = torch.arange(12) % 3
        settings = OptimSettings(lr=1e-3, epochs=2, batch_size=4, seed=0)
        _, log1 = train_stage1(TINY_TOK, TINY_NET, tiny_state(1), states, labels, settings)
        _, log2 = train_stage1(TINY_TOK, TINY_NET, tiny_state(1), states, labels, settings)
        assert [e["loss"] for e in log1] == [e["loss"] for e in log2]

    def test_logs_lr_schedule(self):
        states = tiny_state(6, seed=8)
        labels = torch.arange(6) % 3
        settings = OptimSettings(lr=1e-3, epochs=3, batch_size=6, seed=1)
        _, log = train_stage1(TINY_TOK, TINY_NET, tiny_state(1), states, labels, settings)
        assert log[0]["lr"] == pytest.approx(1e-3)
        assert log[-1]["lr"] == pytest.approx(1e-4)
