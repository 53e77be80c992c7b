"""Frame synthesis: landmark sketches, warping, the hybrid-embedding generator, discriminators and losses."""
from .discriminator import DiscriminatorModel, PatchDiscriminator, discriminate
from .generator import (
    EmbeddingOutput,
    GeneratorConfig,
    GeneratorModel,
    SynthesisError,
    activation_maps,
    compose_frame,
    embed_references,
    fuse,
    generator_forward,
    matting_compose,
)
from .landmark_image import CONNECTIVITY, draw_segments, render_landmark_image
from .losses import ConvFeatureExtractor, LossWeights, discriminator_loss, pyramid_features, total_loss, warp_loss
from .training import GeneratorSample, TrainConfig, TrainingError, train_discriminator_only, train_generator
from .warping import warp

__all__ = [
    "CONNECTIVITY",
    "ConvFeatureExtractor",
    "DiscriminatorModel",
    "EmbeddingOutput",
    "GeneratorConfig",
    "GeneratorModel",
    "GeneratorSample",
    "LossWeights",
    "PatchDiscriminator",
    "SynthesisError",
    "TrainConfig",
    "TrainingError",
    "activation_maps",
    "compose_frame",
    "discriminate",
    "discriminator_loss",
    "draw_segments",
    "embed_references",
    "fuse",
    "generator_forward",
    "matting_compose",
    "pyramid_features",
    "render_landmark_image",
    "total_loss",
    "train_discriminator_only",
    "train_generator",
    "warp",
    "warp_loss",
]
