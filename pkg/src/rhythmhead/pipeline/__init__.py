"""End-to-end orchestration, synthetic scenes and metrics."""
from .config import ConfigError, PipelineConfig
from .core import (
    GenerationResult,
    Models,
    PipelineError,
    ReferenceSetup,
    frame_inputs,
    generate_video,
    prepare_reference,
    reference_indices,
    train_all,
    train_expression_model,
    train_generator_model,
    train_motion_model,
    training_samples,
    write_training_log,
)
from .metrics import MetricError, compute_lmd, compute_ssim, mean_l1
from .scene import ClipData, SceneError, SyntheticScene, load_clip, save_scene, synth_scene

__all__ = [
    "ClipData",
    "ConfigError",
    "GenerationResult",
    "MetricError",
    "Models",
    "PipelineConfig",
    "PipelineError",
    "ReferenceSetup",
    "SceneError",
    "SyntheticScene",
    "compute_lmd",
    "compute_ssim",
    "frame_inputs",
    "generate_video",
    "load_clip",
    "mean_l1",
    "prepare_reference",
    "reference_indices",
    "save_scene",
    "synth_scene",
    "train_all",
    "train_expression_model",
    "train_generator_model",
    "train_motion_model",
    "training_samples",
    "write_training_log",
]
