"""Train the full two-stage pipeline on a tiny grid and evaluate it.

Stage 1 trains one expert classifier per screen region, each predicting the
gaze target relative to its region's registered anchor state. A gating network
learns to pick the right region from the current state alone. Stage 2 distills
all experts into a single full-grid student; the experts' latents are passed
through a measurement-initialized denoising bridge so the student learns from
cleaned-up teacher features. Inference never touches the denoiser.

This uses a deliberately tiny configuration (5x5 grid, 48x48 frames, a few
epochs) so it finishes in about a minute on a laptop CPU. The `desk` profile
in gazeshift.config is the properly sized version of the same recipe.

Run:  python demos/03_end_to_end_pipeline.py
"""

import tempfile
from pathlib import Path

import gazeshift as gs
from gazeshift.corrnet import OptimSettings, TransformerConfig
from gazeshift.distill import DistillConfig, TeacherBank

scene = gs.SyntheticSceneConfig(width=48, height=48, seed=0)
tok = gs.TokenizerConfig(frame_size=48, patch_size=8, dim=64)
net = TransformerConfig(depth=2, heads=4, dim=64, ff_dim=128, dropout=0.1)
grid, n_regions = 5, 5

with tempfile.TemporaryDirectory() as tmp:
    data_dir = Path(tmp) / "data"
    manifest = gs.generate_synthetic(
        scene, grid, 2, data_dir,
        split_of_repeat=lambda k: "train" if k == 0 else "val",
    )
    print(f"dataset: {len(manifest.samples)} samples "
          f"({len(manifest.split('train'))} train / {len(manifest.split('val'))} val)")

    partition = gs.partition_grid(grid, n_regions)
    print("regions and anchor cells:")
    for r, region in enumerate(partition.regions):
        print(f"  region {r}: {len(region.cells)} cells, anchor {region.anchor_cell}")

    train = gs.load_split(manifest, "train", tok)
    val = gs.load_split(manifest, "val", tok)
    registry = gs.build_registry(manifest, partition, tok)

    # Stage 1: per-region experts, anchored to their registered state.
    experts, logs = gs.train_experts(
        train, val, registry, partition, tok, net,
        OptimSettings(lr=1e-3, epochs=8, batch_size=16, seed=0),
    )
    print("expert val accuracy: "
          + "  ".join(f"r{r}={log[-1]['val_acc']:.2f}" for r, log in enumerate(logs)))

    # Gating network: route a state to its primary region.
    selector, slog = gs.fit_selector(
        train, val, partition, tok,
        OptimSettings(lr=1e-3, epochs=25, batch_size=16, seed=0),
    )
    print(f"selector val accuracy: {slog[-1]['val_acc']:.2f}")

    # Latent denoiser over the frozen experts' feature tokens.
    schedule = gs.build_schedule(60, 1e-4, 0.02, t_reverse=20, i_range=(8, 12))
    latents = gs.collect_latents(experts, registry, partition, train)
    denoiser, whitener, dlog = gs.fit_diffusion(
        latents, schedule, OptimSettings(lr=1e-3, epochs=10, batch_size=16, seed=0)
    )
    print(f"denoiser final loss: {dlog[-1]['loss']:.4f}")

    # Stage 2: distill everything into one full-grid student.
    teachers = TeacherBank(experts, registry, denoiser, whitener, schedule)
    student, stlog = gs.distill_student(
        teachers, train, val, partition, tok, net,
        DistillConfig(alpha=1.0, beta=1.0, lam=500.0, n_recon=4,
                      optim=OptimSettings(lr=5e-4, epochs=25, batch_size=4, seed=0)),
    )
    report = gs.evaluate_model(student, registry, partition, val,
                               manifest.screen, selector=selector)
    print(f"\nstudent (selector-routed): accuracy {report['accuracy']:.2f}, "
          f"mean angular error {report['mae_deg']:.2f} deg "
          f"on {report['n_samples']} held-out samples")
    for r, stats in sorted(report["per_region"].items()):
        print(f"  region {r}: acc {stats['accuracy']:.2f}, "
              f"selector agreement {stats['selector_agreement']:.2f}")
