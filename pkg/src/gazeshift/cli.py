"""Command-line orchestration.

Subcommands cover the full workflow: generate-data, train-expert,
train-selector, train-denoiser, distill, finetune-continuous, evaluate,
infer, plus two diagnostics (diffusion-verify, dump-attention). Every
command reads one YAML run config (a named profile by default), writes its
artifacts under the config's output directory, and drops a machine-readable
JSON summary next to them.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric
failure. A lock file serializes commands per output directory.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .anchors import AnchorSelector, load_registry, partition_grid, save_registry
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import RunConfig, load_run_config, profile_config
from .continuous import ContinuousHead, finetune_continuous
from .corrnet import GazeCorrNet, TransformerConfig
from .diffusion import (
    Denoiser,
    LatentWhitener,
    NoiseSchedule,
    initialize_reverse,
    perturb,
    posterior_params,
)
from .distill import DistillConfig, TeacherBank
from .errors import (
    ConfigError,
    DataIntegrityError,
    GazeshiftError,
    MissingArtifactError,
    NumericError,
    TrainingDivergedError,
)
from .events import EVENT_DTYPE, load_events
from .frames import load_pgm
from .manifest import load_manifest
from .synth import generate_synthetic
from .tokenizer import TokenizerConfig
from .voxel import VoxelGridSpec

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------- plumbing


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """One command at a time per output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is locked by another command "
            f"(remove {lock} if that command crashed)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_run_config(args.config)
    else:
        cfg = profile_config(args.profile)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def _tok_meta(cfg: TokenizerConfig) -> dict:
    return asdict(cfg)


def _tok_from_meta(meta: dict) -> TokenizerConfig:
    meta = dict(meta)
    meta["voxel"] = VoxelGridSpec(**meta["voxel"])
    return TokenizerConfig(**meta)


def save_model(model, path, kind: str, **extra) -> None:
    meta = {"kind": kind, **extra}
    save_checkpoint(model, path, metadata=meta)


def load_corrnet(path) -> tuple[GazeCorrNet, dict]:
    _, meta = load_checkpoint(path)
    tok_cfg = _tok_from_meta(meta["tokenizer"])
    net_cfg = TransformerConfig(**meta["transformer"])
    model = GazeCorrNet(tok_cfg, net_cfg)
    load_into(model, path)
    model.eval()
    return model, meta


def load_selector(path) -> tuple[AnchorSelector, dict]:
    _, meta = load_checkpoint(path)
    model = AnchorSelector(_tok_from_meta(meta["tokenizer"]), meta["n_regions"])
    load_into(model, path)
    model.eval()
    return model, meta


def load_denoiser(path) -> tuple[Denoiser, LatentWhitener, NoiseSchedule, dict]:
    _, meta = load_checkpoint(path)
    model = Denoiser(meta["latent_dim"], width=meta["width"], blocks=meta["blocks"])
    load_into(model, path)
    model.eval()
    sched = meta["schedule"]
    schedule = NoiseSchedule(
        sched["t_total"],
        sched["beta_start"],
        sched["beta_end"],
        sched["t_reverse"],
        tuple(sched["i_range"]),
    )
    whitener = LatentWhitener(
        np.asarray(meta["whitener_mean"]), np.asarray(meta["whitener_std"])
    )
    return model, whitener, schedule, meta


def _schedule_meta(s: NoiseSchedule) -> dict:
    return {
        "t_total": s.t_total,
        "beta_start": s.beta_start,
        "beta_end": s.beta_end,
        "t_reverse": s.t_reverse,
        "i_range": list(s.i_range),
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"{what} not found at {path}; run the producing command first"
        )
    return path


def _write_summary(out_dir: Path, name: str, payload: dict) -> None:
    pipeline.write_report(payload, out_dir / f"{name}_summary.json")


def _load_benchmark(cfg: RunConfig, out_dir: Path):
    manifest = load_manifest(_require(out_dir / "data" / "manifest.json", "dataset manifest"))
    partition = partition_grid(manifest.grid, cfg.n_anchors)
    train = pipeline.load_split(manifest, "train", cfg.tokenizer)
    try:
        val = pipeline.load_split(manifest, "val", cfg.tokenizer)
    except MissingArtifactError:
        val = None
    return manifest, partition, train, val


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    n_train = cfg.data.n_repeats - cfg.data.val_repeats
    if n_train < 1:
        raise ConfigError("need at least one training repeat per cell")
    manifest = generate_synthetic(
        replace(cfg.scene, seed=cfg.seed),
        cfg.data.grid,
        cfg.data.n_repeats,
        out_dir / "data",
        split_of_repeat=lambda k: "train" if k < n_train else "val",
    )
    _write_summary(
        out_dir,
        "generate-data",
        {
            "n_samples": len(manifest.samples),
            "grid": manifest.grid,
            "n_train": len(manifest.split("train")),
            "n_val": len(manifest.split("val")),
            "out": str(out_dir / "data"),
        },
    )
    return 0


def cmd_train_expert(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest, partition, train, val = _load_benchmark(cfg, out_dir)
    registry = pipeline.build_registry(manifest, partition, cfg.tokenizer)
    save_registry(registry, out_dir / "registry")
    settings = replace(cfg.expert_optim, seed=cfg.seed)
    experts, logs = pipeline.train_experts(
        train, val, registry, partition, cfg.tokenizer, cfg.transformer, settings
    )
    (out_dir / "experts").mkdir(exist_ok=True)
    summary = {"regions": {}}
    for region, (expert, log) in enumerate(zip(experts, logs)):
        save_model(
            expert,
            out_dir / "experts" / f"expert_{region}.ckpt",
            "expert",
            region=region,
            tokenizer=_tok_meta(cfg.tokenizer),
            transformer=asdict(expert.net_cfg),
        )
        summary["regions"][str(region)] = {
            "final_loss": log[-1]["loss"],
            "val_acc": log[-1].get("val_acc"),
            "n_classes": expert.net_cfg.n_classes,
        }
    _write_summary(out_dir, "train-expert", summary)
    return 0


def cmd_train_selector(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    _, partition, train, val = _load_benchmark(cfg, out_dir)
    settings = replace(cfg.selector_optim, seed=cfg.seed)
    selector, log = pipeline.fit_selector(train, val, partition, cfg.tokenizer, settings)
    save_model(
        selector,
        out_dir / "selector.ckpt",
        "selector",
        tokenizer=_tok_meta(cfg.tokenizer),
        n_regions=partition.n,
    )
    _write_summary(
        out_dir,
        "train-selector",
        {"final_loss": log[-1]["loss"], "val_acc": log[-1].get("val_acc")},
    )
    return 0


def _load_experts(out_dir: Path, n: int) -> list[GazeCorrNet]:
    experts = []
    for region in range(n):
        path = _require(
            out_dir / "experts" / f"expert_{region}.ckpt", f"expert checkpoint {region}"
        )
        model, _ = load_corrnet(path)
        experts.append(model)
    return experts


def cmd_train_denoiser(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest, partition, train, _ = _load_benchmark(cfg, out_dir)
    registry = load_registry(
        _require(out_dir / "registry", "anchor registry"), partition, cfg.tokenizer
    )
    experts = _load_experts(out_dir, partition.n)
    latents = pipeline.collect_latents(experts, registry, partition, train)
    settings = replace(cfg.denoiser_optim, seed=cfg.seed)
    denoiser, whitener, log = pipeline.fit_diffusion(latents, cfg.schedule, settings)
    save_model(
        denoiser,
        out_dir / "denoiser.ckpt",
        "denoiser",
        latent_dim=int(np.prod(latents.shape[1:])),
        width=256,
        blocks=4,
        schedule=_schedule_meta(cfg.schedule),
        whitener_mean=whitener.mean.tolist(),
        whitener_std=whitener.std.tolist(),
    )
    _write_summary(
        out_dir, "train-denoiser", {"final_loss": log[-1]["loss"], "n_latents": len(latents)}
    )
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest, partition, train, val = _load_benchmark(cfg, out_dir)
    registry = load_registry(
        _require(out_dir / "registry", "anchor registry"), partition, cfg.tokenizer
    )
    experts = _load_experts(out_dir, partition.n)
    dcfg = cfg.distill
    if args.lam is not None:
        dcfg = replace(dcfg, lam=args.lam)
    if args.n_recon is not None:
        dcfg = replace(dcfg, n_recon=args.n_recon)
    dcfg = replace(dcfg, optim=replace(dcfg.optim, seed=cfg.seed))
    if dcfg.lam > 0:
        denoiser, whitener, schedule, _ = load_denoiser(
            _require(out_dir / "denoiser.ckpt", "denoiser checkpoint")
        )
    else:
        denoiser, whitener, schedule = None, None, None
    teachers = TeacherBank(experts, registry, denoiser, whitener, schedule)
    student, log = pipeline.distill_student(
        teachers, train, val, partition, cfg.tokenizer, cfg.transformer, dcfg
    )
    save_model(
        student,
        out_dir / "student.ckpt",
        "student",
        tokenizer=_tok_meta(cfg.tokenizer),
        transformer=asdict(student.net_cfg),
        distill={"alpha": dcfg.alpha, "beta": dcfg.beta, "lam": dcfg.lam, "n_recon": dcfg.n_recon},
    )
    _write_summary(
        out_dir,
        "distill",
        {
            "final": {k: log[-1][k] for k in ("l_e", "l_s", "l_d", "total")},
            "val_acc": log[-1].get("val_acc"),
            "lam": dcfg.lam,
            "n_recon": dcfg.n_recon,
        },
    )
    return 0


def cmd_finetune_continuous(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest, partition, train, _ = _load_benchmark(cfg, out_dir)
    registry = load_registry(
        _require(out_dir / "registry", "anchor registry"), partition, cfg.tokenizer
    )
    student, _ = load_corrnet(_require(out_dir / "student.ckpt", "student checkpoint"))
    from .tokenizer import stack_states

    anchors = stack_states(
        [registry.get(partition.primary_region(c)) for c in train.cells]
    )
    settings = replace(cfg.continuous_optim, seed=cfg.seed)
    head, log = finetune_continuous(
        student, anchors, train.states, train.coords, settings,
        unfreeze_trunk=args.unfreeze_trunk,
    )
    save_model(
        head, out_dir / "continuous.ckpt", "continuous", dim=student.net_cfg.dim
    )
    if args.unfreeze_trunk:
        save_model(
            student,
            out_dir / "student.ckpt",
            "student",
            tokenizer=_tok_meta(cfg.tokenizer),
            transformer=asdict(student.net_cfg),
        )
    _write_summary(out_dir, "finetune-continuous", {"final_loss": log[-1]["loss"]})
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest, partition, _, val = _load_benchmark(cfg, out_dir)
    if val is None:
        raise MissingArtifactError("dataset has no validation split to evaluate on")
    student, _ = load_corrnet(_require(out_dir / "student.ckpt", "student checkpoint"))
    registry = load_registry(
        _require(out_dir / "registry", "anchor registry"), partition, cfg.tokenizer
    )
    selector = None
    if (out_dir / "selector.ckpt").exists():
        selector, _ = load_selector(out_dir / "selector.ckpt")
    report = pipeline.evaluate_model(
        student, registry, partition, val, manifest.screen, selector=selector
    )
    pipeline.write_report(report, out_dir / "evaluation.json")
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest = load_manifest(_require(out_dir / "data" / "manifest.json", "dataset manifest"))
    partition = partition_grid(manifest.grid, cfg.n_anchors)
    student, _ = load_corrnet(_require(out_dir / "student.ckpt", "student checkpoint"))
    selector, _ = load_selector(_require(out_dir / "selector.ckpt", "selector checkpoint"))
    registry = load_registry(
        _require(out_dir / "registry", "anchor registry"), partition, cfg.tokenizer
    )
    frame = load_pgm(_require(Path(args.frame), "input frame"))
    raw = np.fromfile(_require(Path(args.events), "input events"), dtype=EVENT_DTYPE)
    t_end = int(raw["t"].max()) + 1 if len(raw) else 1
    events = load_events(
        Path(args.events), manifest.sensor_width, manifest.sensor_height, 0, t_end
    )
    head = None
    if (out_dir / "continuous.ckpt").exists():
        _, meta = load_checkpoint(out_dir / "continuous.ckpt")
        head = ContinuousHead(meta["dim"])
        load_into(head, out_dir / "continuous.ckpt")
        head.eval()
    result = pipeline.infer_sample(
        student, selector, registry, partition, cfg.tokenizer,
        frame, events, screen=manifest.screen, continuous_head=head,
    )
    print(json.dumps(result, indent=1, sort_keys=True))
    pipeline.write_report(result, out_dir / "infer_summary.json")
    return 0


def cmd_diffusion_verify(args) -> int:
    """Monte-Carlo verification of the bridge posterior, the degenerate
    variance case, and the reverse-initialization marginal; emits JSON."""
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    schedule = NoiseSchedule(40, 1e-3, 0.05, 15, (3, 8))
    rng = np.random.default_rng(cfg.seed)
    n = args.mc_samples
    report = {"posterior": [], "degenerate_std_zero": None, "init_marginal": None}
    ab = schedule.alpha_bars
    ok = True
    for i in (3, 5, 8):
        for t in sorted({i + 2, i + 5, schedule.t_reverse}):
            x_i = rng.standard_normal(n)
            ratio = ab[t - 1] / ab[i]
            x_prev = np.sqrt(ratio) * x_i + np.sqrt(1 - ratio) * rng.standard_normal(n)
            x_t = np.sqrt(schedule.alphas[t]) * x_prev + np.sqrt(
                schedule.betas[t]
            ) * rng.standard_normal(n)
            mean, std = posterior_params(
                torch.from_numpy(x_t), torch.from_numpy(x_i), t, i, schedule
            )
            resid = x_prev - mean.numpy()
            bias = float(np.abs(resid.mean()))
            emp_std = float(resid.std())
            se = emp_std / np.sqrt(n)
            entry = {
                "i": i,
                "t": t,
                "mean_bias": bias,
                "mean_bias_limit": 3 * se,
                "empirical_std": emp_std,
                "analytic_std": float(std),
                "std_gap": abs(emp_std - float(std)),
                "std_limit": 3 * float(std) / np.sqrt(2 * n) + 1e-12,
            }
            entry["ok"] = bool(
                bias <= entry["mean_bias_limit"] and entry["std_gap"] <= entry["std_limit"]
            )
            ok &= entry["ok"]
            report["posterior"].append(entry)
    _, std0 = posterior_params(torch.zeros(1), torch.zeros(1), 4, 3, schedule)
    report["degenerate_std_zero"] = {"std": float(std0), "ok": bool(float(std0) == 0.0)}
    ok &= report["degenerate_std_zero"]["ok"]
    i = 5
    x_i = torch.from_numpy(rng.standard_normal(n))
    eps = torch.from_numpy(rng.standard_normal(n))
    x_start = initialize_reverse(x_i, i, schedule, eps)
    want = float(ab[schedule.t_reverse] / ab[i] * x_i.var(unbiased=False)) + float(
        1 - ab[schedule.t_reverse] / ab[i]
    )
    got = float(x_start.var(unbiased=False))
    limit = 3 * want * np.sqrt(2.0 / n)
    report["init_marginal"] = {
        "empirical_var": got,
        "analytic_var": want,
        "gap": abs(got - want),
        "limit": limit,
        "ok": bool(abs(got - want) <= limit),
    }
    ok &= report["init_marginal"]["ok"]
    report["ok"] = bool(ok)
    pipeline.write_report(report, out_dir / "diffusion_verify.json")
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0 if ok else EXIT_NUMERIC


def cmd_dump_attention(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest, partition, _, val = _load_benchmark(cfg, out_dir)
    split = val if val is not None else pipeline.load_split(manifest, "train", cfg.tokenizer)
    student, _ = load_corrnet(_require(out_dir / "student.ckpt", "student checkpoint"))
    registry = load_registry(
        _require(out_dir / "registry", "anchor registry"), partition, cfg.tokenizer
    )
    idx = args.sample
    if not 0 <= idx < len(split.cells):
        raise ConfigError(f"sample index {idx} out of range (0..{len(split.cells) - 1})")
    region = partition.primary_region(split.cells[idx])
    path = Path(args.image) if args.image else out_dir / f"attention_{idx}.pgm"
    pipeline.dump_attention_heatmap(
        student, registry.get(region), split.states.select([idx]), path
    )
    print(str(path))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazeshift",
        description="Anchor-relative event-frame gaze estimation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config (overrides --profile)")
        p.add_argument("--profile", default="desk", help="named config profile")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out-dir", default=None, help="override output directory")

    p = sub.add_parser("generate-data", help="synthesize the grid-dwell dataset")
    common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train-expert", help="stage 1: train the per-region experts")
    common(p)
    p.set_defaults(func=cmd_train_expert)

    p = sub.add_parser("train-selector", help="train the anchor gating network")
    common(p)
    p.set_defaults(func=cmd_train_selector)

    p = sub.add_parser("train-denoiser", help="fit the latent noise predictor")
    common(p)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("distill", help="stage 2: distill experts into the student")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="feature-loss weight (0 disables denoised distillation)")
    p.add_argument("--n-recon", type=int, default=None,
                   help="reconstruction samples per item")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune-continuous", help="train the coordinate head")
    common(p)
    p.add_argument("--unfreeze-trunk", action="store_true")
    p.set_defaults(func=cmd_finetune_continuous)

    p = sub.add_parser("evaluate", help="report accuracy and angular error")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="predict from one frame + event file")
    common(p)
    p.add_argument("--frame", required=True)
    p.add_argument("--events", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("diffusion-verify", help="run the sampler oracle suite")
    common(p)
    p.add_argument("--mc-samples", type=int, default=200_000)
    p.set_defaults(func=cmd_diffusion_verify)

    p = sub.add_parser("dump-attention", help="write an attention heatmap image")
    common(p)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--image", default=None)
    p.set_defaults(func=cmd_dump_attention)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        with output_lock(Path(cfg.out_dir)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, DataIntegrityError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, TrainingDivergedError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GazeshiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
