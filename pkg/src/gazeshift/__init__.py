"""Anchor-relative event-frame gaze estimation with local-expert distillation
through measurement-initialized latent denoising."""

from .anchors import (
    AnchorRegistry,
    AnchorSelector,
    RegionPartition,
    load_registry,
    partition_grid,
    save_registry,
    select_anchor,
    train_selector,
)
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import PROFILES, RunConfig, load_run_config, profile_config, save_run_config
from .corrnet import (
    GazeCorrNet,
    OptimSettings,
    TransformerConfig,
    expert_loss,
    train_stage1,
)
from .continuous import ContinuousHead, coordinate_loss, finetune_continuous
from .diffusion import (
    Denoiser,
    LatentWhitener,
    NoiseSchedule,
    build_schedule,
    denoiser_loss,
    perturb,
    posterior_params,
    reverse_sample,
    train_denoiser,
)
from .distill import (
    DistillConfig,
    TeacherBank,
    distill_feature_loss,
    soft_attention_loss,
    total_loss,
    train_stage2,
)
from .errors import (
    ConfigError,
    DataIntegrityError,
    GazeshiftError,
    MissingArtifactError,
    NumericError,
    TrainingDivergedError,
    ValidationError,
)
from .events import Event, EventStream, aggregate_window, load_events, save_events
from .frames import Frame, load_pgm, save_pgm
from .geometry import ScreenGeometry, accuracy, mae, screen_to_gaze_vector
from .manifest import (
    DatasetManifest,
    GazeLabel,
    GazeSample,
    SampleEntry,
    load_manifest,
    save_manifest,
)
from .pipeline import (
    LoadedSplit,
    build_registry,
    cell_direction,
    collect_latents,
    distill_student,
    dump_attention_heatmap,
    evaluate_model,
    fit_diffusion,
    fit_selector,
    infer_sample,
    load_split,
    train_experts,
    train_monolithic,
)
from .synth import SyntheticSceneConfig, generate_synthetic, synthesize_sample
from .tokenizer import StateTensors, TokenizerConfig, prepare_state, stack_states
from .voxel import EventVoxel, VoxelGridSpec, voxelize

__version__ = "0.1.0"
