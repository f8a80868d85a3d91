"""End-to-end acceptance gate.

Each test states one externally checkable claim about the package. The
benchmark-backed claims share one session fixture that trains the full
two-stage pipeline on three seeds of the synthetic grid task; expect the
whole module to run for roughly an hour on a laptop CPU. Everything else
(statistical oracles, gradient checks, metric units) runs in seconds.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

import gazeshift as gs
from gazeshift.cli import main as cli_main
from gazeshift.corrnet import OptimSettings, TransformerConfig, expert_loss
from gazeshift.diffusion import (
    Denoiser,
    delta_moment_loss,
    denoiser_loss,
    initialize_reverse,
)
from gazeshift.distill import DistillConfig, TeacherBank, distill_feature_loss, soft_attention_loss
from gazeshift.continuous import ContinuousHead, coordinate_loss

SEEDS = (0, 1, 2)


# --------------------------------------------------------------------------
# Statistical oracles for the measurement-anchored reverse process
# --------------------------------------------------------------------------


ORACLE_SCHEDULE = gs.build_schedule(40, 1e-3, 0.05, t_reverse=15, i_range=(3, 8))


class TestPosteriorOracle:
    def test_bridge_posterior_matches_monte_carlo(self):
        """Analytic reverse-transition mean/std vs simulation, 2e5 draws per
        (i, t) grid point; mean within 1% relative, std within 3 MC s.e."""
        start = time.monotonic()
        sched = ORACLE_SCHEDULE
        ab = sched.alpha_bars
        rng = np.random.default_rng(0)
        n = 200_000
        for i in (3, 5, 8):
            for t in sorted({i + 2, i + 5, sched.t_reverse}):
                x_i = rng.standard_normal(n)
                ratio = ab[t - 1] / ab[i]
                x_prev = np.sqrt(ratio) * x_i + np.sqrt(1 - ratio) * rng.standard_normal(n)
                x_t = (np.sqrt(sched.alphas[t]) * x_prev
                       + np.sqrt(sched.betas[t]) * rng.standard_normal(n))
                mean, std = gs.posterior_params(
                    torch.from_numpy(x_t), torch.from_numpy(x_i), t, i, sched
                )
                resid = x_prev - mean.numpy()
                # unbiased mean, relative to the scale of the posterior mean
                scale = float(np.sqrt(np.mean(mean.numpy() ** 2)))
                assert abs(resid.mean()) <= max(0.01 * scale,
                                                3 * resid.std() / np.sqrt(n)), (i, t)
                # empirical spread matches the analytic std
                se_std = float(std) / np.sqrt(2 * n)
                assert abs(resid.std() - float(std)) <= 3 * se_std + 1e-12, (i, t)
        assert time.monotonic() - start < 60.0

    def test_degenerate_variance_exactly_zero(self):
        """One step above the measurement index the transition is pinned."""
        for i in (3, 5, 8):
            _, std = gs.posterior_params(torch.zeros(1), torch.zeros(1),
                                         i + 1, i, ORACLE_SCHEDULE)
            assert float(std) == 0.0

    def test_initialization_marginal_variance(self):
        start = time.monotonic()
        sched = ORACLE_SCHEDULE
        ab = sched.alpha_bars
        rng = np.random.default_rng(1)
        n = 100_000
        i = 5
        x_i = torch.from_numpy(rng.standard_normal(n))
        eps = torch.from_numpy(rng.standard_normal(n))
        x_start = initialize_reverse(x_i, i, sched, eps)
        r = ab[sched.t_reverse] / ab[i]
        want = r * float(x_i.var(unbiased=False)) + (1 - r)
        got = float(x_start.var(unbiased=False))
        assert abs(got - want) <= 3 * want * math.sqrt(2.0 / n)
        assert time.monotonic() - start < 10.0


# --------------------------------------------------------------------------
# Loss correctness: closed forms and finite-difference gradients
# --------------------------------------------------------------------------


def _fd_check(loss_fn, params, rng, rel=1e-3, n_coords=3, h=1e-6):
    loss = loss_fn()
    loss.backward()
    for p in params:
        flat = p.detach().reshape(-1)
        grad = p.grad.reshape(-1)
        for idx in rng.choice(p.numel(), size=min(n_coords, p.numel()), replace=False):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss_fn().item()
                flat[idx] = orig - h
                down = loss_fn().item()
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = grad[idx].item()
            if abs(fd) > 1e-8 or abs(an) > 1e-8:
                assert abs(fd - an) <= rel * max(abs(fd), abs(an), 1e-6)


class TestLossCorrectness:
    def test_zero_delta_gives_two(self):
        # exact in real arithmetic; float64 rounds (sqrt 2)^2 by one ulp
        val = delta_moment_loss(torch.zeros(16, dtype=torch.float64)).item()
        assert math.isclose(val, 2.0, rel_tol=1e-15)

    def test_matched_moments_give_exactly_zero(self):
        delta = torch.tensor([math.sqrt(2.0), -math.sqrt(2.0)] * 8)
        assert delta.mean().item() == 0.0
        assert delta_moment_loss(delta).item() == 0.0

    def test_denoiser_loss_gradient(self):
        torch.manual_seed(0)
        model = Denoiser(6, width=8, blocks=1).double()
        x = torch.randn(4, 6, dtype=torch.float64)
        gen_state = torch.Generator().manual_seed(7).get_state()

        def loss_fn():
            gen = torch.Generator()
            gen.set_state(gen_state)  # same noise draw every evaluation
            return denoiser_loss(x, ORACLE_SCHEDULE, model, gen)

        _fd_check(loss_fn, list(model.parameters()), np.random.default_rng(0))

    def test_classification_loss_gradient(self):
        torch.manual_seed(1)
        net = torch.nn.Linear(5, 3).double()
        x = torch.randn(6, 5, dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 0, 1, 2])
        _fd_check(lambda: expert_loss(net(x), y), list(net.parameters()),
                  np.random.default_rng(1))

    def test_attention_loss_gradient(self):
        torch.manual_seed(2)
        net = torch.nn.Linear(4, 4).double()
        x = torch.randn(2, 3, 4, dtype=torch.float64)
        expert = torch.softmax(torch.randn(2, 3, 4, dtype=torch.float64), dim=-1)
        _fd_check(lambda: soft_attention_loss(torch.softmax(net(x), dim=-1), expert),
                  list(net.parameters()), np.random.default_rng(2))

    def test_feature_loss_gradient(self):
        torch.manual_seed(3)
        net = torch.nn.Linear(4, 6).double()
        x = torch.randn(3, 4, dtype=torch.float64)
        recon = torch.randn(5, 3, 6, dtype=torch.float64)
        _fd_check(lambda: distill_feature_loss(net(x), recon, 0.8),
                  list(net.parameters()), np.random.default_rng(3))

    def test_coordinate_loss_gradient(self):
        torch.manual_seed(4)
        head = ContinuousHead(8).double()
        latent = torch.randn(2, 5, 8, dtype=torch.float64)
        target = torch.rand(2, 2, dtype=torch.float64)
        _fd_check(lambda: coordinate_loss(head(latent), target),
                  list(head.parameters()), np.random.default_rng(4))


# --------------------------------------------------------------------------
# Tokenizer oracles
# --------------------------------------------------------------------------


class TestTokenizerOracles:
    def test_topk_voxelization_matches_full_sort_oracle(self):
        spec = gs.VoxelGridSpec(w_cell=8, h_cell=8, t_cell=10_000, k=6,
                                max_events_per_voxel=32)
        rng = np.random.default_rng(42)
        for trial in range(100):
            n = 10_000
            ev = np.zeros(n, dtype=np.dtype([("x", "<u2"), ("y", "<u2"),
                                             ("t", "<u8"), ("polarity", "i1"),
                                             ("pad", "i1")]))
            ev["x"] = rng.integers(0, 64, n)
            ev["y"] = rng.integers(0, 64, n)
            ev["t"] = np.sort(rng.integers(0, 100_000, n))
            ev["polarity"] = rng.choice([-1, 1], n)
            stream = gs.EventStream(ev, width=64, height=64,
                                    t_start=0, t_end=100_000)
            got = gs.voxelize(stream, spec)

            # oracle: histogram every cell, full sort by (-count, linear index)
            nx = -(-64 // spec.w_cell)
            ny = -(-64 // spec.h_cell)
            nt = -(-100_000 // spec.t_cell)
            ix = ev["x"] // spec.w_cell
            iy = ev["y"] // spec.h_cell
            it = np.minimum(ev["t"] // spec.t_cell, nt - 1).astype(np.int64)
            lin = (it * ny + iy) * nx + ix
            counts = np.bincount(lin, minlength=nx * ny * nt)
            order = sorted(np.nonzero(counts)[0], key=lambda c: (-counts[c], c))
            want = order[: spec.k]
            assert [v.cell_index for v in got] == [int(c) for c in want], trial
            assert [v.count for v in got] == [int(counts[c]) for c in want], trial

    def test_point_set_features_permutation_invariant_bit_exact(self):
        tok_cfg = gs.TokenizerConfig(frame_size=16, patch_size=4,
                                     voxel=gs.VoxelGridSpec(4, 4, 1000, 3,
                                                            max_events_per_voxel=8),
                                     dim=16)
        from gazeshift.tokenizer import PointSetEncoder
        torch.manual_seed(0)
        enc = PointSetEncoder(tok_cfg.dim)
        offsets = torch.rand(1, 3, 8, 4)
        mask = torch.ones(1, 3, 8, dtype=torch.bool)
        base = enc(offsets, mask)
        for seed in range(5):
            perm = torch.randperm(8, generator=torch.Generator().manual_seed(seed))
            out = enc(offsets[:, :, perm], mask[:, :, perm])
            assert torch.equal(out, base)


# --------------------------------------------------------------------------
# Angular-error metric units
# --------------------------------------------------------------------------


class TestMetricUnits:
    def test_identical_vectors_zero(self):
        v = np.array([[0.1, 0.2, 0.97], [0.0, 0.0, 1.0]])
        assert gs.mae(v, v) == 0.0

    def test_orthogonal_vectors_ninety(self):
        a = np.array([[1.0, 0.0, 0.0]])
        b = np.array([[0.0, 0.0, 1.0]])
        assert gs.mae(a, b) == pytest.approx(90.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((10, 3))
        b = rng.standard_normal((10, 3))
        assert gs.mae(a, b) == pytest.approx(gs.mae(3.7 * a, 0.2 * b), abs=1e-9)

    def test_constructed_mean_twenty_degrees(self):
        truths = np.array([[0.0, 0.0, 1.0]] * 3)
        angles = np.radians([10.0, 20.0, 30.0])
        preds = np.stack([np.sin(angles), np.zeros(3), np.cos(angles)], axis=-1)
        assert gs.mae(preds, truths) == pytest.approx(20.0, abs=1e-6)


# --------------------------------------------------------------------------
# Desk-scale benchmark: three seeds, full two-stage pipeline
# --------------------------------------------------------------------------


def _run_benchmark(seed: int, tmp_root) -> dict:
    scene = gs.SyntheticSceneConfig(seed=seed)
    tok = gs.TokenizerConfig()
    net = TransformerConfig(depth=2, heads=4, dim=64, ff_dim=128, dropout=0.1)
    grid = 11
    man = gs.generate_synthetic(
        scene, grid, 5, tmp_root / f"seed{seed}" / "data",
        split_of_repeat=lambda k: "train" if k < 4 else "val",
    )
    part = gs.partition_grid(grid, 5)
    train = gs.load_split(man, "train", tok)
    val = gs.load_split(man, "val", tok)
    reg = gs.build_registry(man, part, tok)

    experts, elogs = gs.train_experts(
        train, val, reg, part, tok, net,
        OptimSettings(lr=1e-3, epochs=30, batch_size=32, seed=seed),
    )
    sel, slog = gs.fit_selector(
        train, val, part, tok,
        OptimSettings(lr=1e-3, epochs=20, batch_size=32, seed=seed),
    )
    sched = gs.build_schedule(200, 1e-4, 0.02, t_reverse=40, i_range=(27, 32))
    latents = gs.collect_latents(experts, reg, part, train)
    den, whit, _ = gs.fit_diffusion(
        latents, sched, OptimSettings(lr=1e-3, epochs=150, batch_size=64, seed=seed)
    )
    teachers = gs.TeacherBank(experts, reg, den, whit, sched)
    optim = OptimSettings(lr=5e-4, epochs=25, batch_size=8, seed=seed)

    anchor_cells = {r.anchor_cell for r in part.regions}
    anchor_idx = [j for j, c in enumerate(val.cells) if tuple(c) in anchor_cells]
    with torch.no_grad():
        routed = sel(val.states.select(anchor_idx)).argmax(dim=-1)
    want = torch.tensor([part.primary_region(tuple(val.cells[j])) for j in anchor_idx])
    out = {
        "experts": [log[-1]["val_acc"] for log in elogs],
        "selector": slog[-1]["val_acc"],
        "anchor_routing": float((routed == want).float().mean()),
    }
    variants = {
        "student": DistillConfig(alpha=1.0, beta=1.0, lam=500.0, n_recon=16, optim=optim),
        "student_lam0": DistillConfig(alpha=1.0, beta=1.0, lam=0.0, n_recon=16, optim=optim),
        "student_s4": DistillConfig(alpha=1.0, beta=1.0, lam=500.0, n_recon=4, optim=optim),
    }
    for name, dcfg in variants.items():
        bank = teachers if dcfg.lam > 0 else gs.TeacherBank(experts, reg, None, None, None)
        model, _ = gs.distill_student(bank, train, val, part, tok, net, dcfg)
        rep = gs.evaluate_model(model, reg, part, val, man.screen, selector=sel)
        out[name] = {"acc": rep["accuracy"], "mae": rep["mae_deg"]}

    mono_part = gs.partition_grid(grid, 1)
    mono_reg = gs.build_registry(man, mono_part, tok)
    mono, _ = gs.train_monolithic(
        train, val, mono_reg, mono_part, tok, net,
        OptimSettings(lr=1e-3, epochs=30, batch_size=32, seed=seed),
    )
    rep = gs.evaluate_model(mono, mono_reg, mono_part, val, man.screen)
    out["monolithic"] = {"acc": rep["accuracy"], "mae": rep["mae_deg"]}
    return out


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    start = time.monotonic()
    results = {seed: _run_benchmark(seed, root) for seed in SEEDS}
    results["elapsed_s"] = time.monotonic() - start
    return results


class TestBenchmark:
    def test_experts_reach_ninety_percent_in_region(self, benchmark):
        for seed in SEEDS:
            for region, acc in enumerate(benchmark[seed]["experts"]):
                assert acc >= 0.90, (seed, region, acc)

    def test_selector_region_accuracy_bound(self, benchmark):
        for seed in SEEDS:
            assert benchmark[seed]["selector"] >= 0.90, seed

    def test_anchor_cell_samples_route_to_their_region(self, benchmark):
        for seed in SEEDS:
            assert benchmark[seed]["anchor_routing"] >= 0.95, seed

    def test_student_beats_monolithic_in_majority_of_seeds(self, benchmark):
        wins = sum(
            benchmark[s]["student"]["acc"] > benchmark[s]["monolithic"]["acc"]
            for s in SEEDS
        )
        assert wins >= 2, {s: (benchmark[s]["student"]["acc"],
                               benchmark[s]["monolithic"]["acc"]) for s in SEEDS}

    def test_denoised_distillation_not_worse_than_ablation(self, benchmark):
        wins = sum(
            benchmark[s]["student"]["acc"] >= benchmark[s]["student_lam0"]["acc"]
            for s in SEEDS
        )
        assert wins >= 2, {s: (benchmark[s]["student"]["acc"],
                               benchmark[s]["student_lam0"]["acc"]) for s in SEEDS}

    def test_more_reconstruction_samples_not_worse(self, benchmark):
        wins = sum(
            benchmark[s]["student"]["acc"] >= benchmark[s]["student_s4"]["acc"]
            for s in SEEDS
        )
        assert wins >= 2, {s: (benchmark[s]["student"]["acc"],
                               benchmark[s]["student_s4"]["acc"]) for s in SEEDS}

    def test_five_anchors_no_more_angular_error_than_one(self, benchmark):
        wins = sum(
            benchmark[s]["student"]["mae"] <= benchmark[s]["monolithic"]["mae"]
            for s in SEEDS
        )
        assert wins >= 2, {s: (benchmark[s]["student"]["mae"],
                               benchmark[s]["monolithic"]["mae"]) for s in SEEDS}

    def test_total_runtime_within_budget(self, benchmark):
        assert benchmark["elapsed_s"] <= 2 * 3600


# --------------------------------------------------------------------------
# Inference contract: no denoiser artifact needed, bit-identical outputs
# --------------------------------------------------------------------------


class TestInferenceContract:
    def test_infer_without_denoiser_and_deterministic(self, tmp_path, capsys):
        import yaml

        out = tmp_path / "run"
        cfg = {
            "schema_version": 1, "seed": 0, "out_dir": str(out),
            "data": {"grid": 5, "n_repeats": 2, "val_repeats": 1},
            "scene": {"width": 48, "height": 48},
            "tokenizer": {"frame_size": 48, "patch_size": 8, "dim": 64},
            "transformer": {"depth": 2, "heads": 4, "dim": 64, "ff_dim": 128,
                            "n_classes": 25, "dropout": 0.1},
            "n_anchors": 5,
            "schedule": {"t_total": 60, "beta_start": 1.0e-4, "beta_end": 0.02,
                         "t_reverse": 20, "i_range": [8, 12]},
            "distill": {"alpha": 1.0, "beta": 1.0, "lam": 0.0, "n_recon": 4,
                        "optim": {"lr": 1.0e-4, "epochs": 2, "batch_size": 4}},
            "expert_optim": {"lr": 1.0e-3, "epochs": 3, "batch_size": 16},
            "selector_optim": {"lr": 1.0e-3, "epochs": 3, "batch_size": 16},
            "denoiser_optim": {"lr": 1.0e-3, "epochs": 2, "batch_size": 16},
            "continuous_optim": {"lr": 1.0e-3, "epochs": 2, "batch_size": 16},
        }
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        for cmd in ("generate-data", "train-expert", "train-selector", "distill"):
            assert cli_main([cmd, "--config", str(cfg_path)]) == 0, cmd
        assert not (out / "denoiser.ckpt").exists()

        manifest = json.loads((out / "data" / "manifest.json").read_text())
        sample = manifest["samples"][0]
        args = ["infer", "--config", str(cfg_path),
                "--frame", str(out / "data" / sample["frame"]),
                "--events", str(out / "data" / sample["events"])]
        assert cli_main(args) == 0
        first = json.loads(capsys.readouterr().out)
        assert cli_main(args) == 0
        second = json.loads(capsys.readouterr().out)
        first.pop("latency_ms")
        second.pop("latency_ms")
        assert first == second
