"""Alternating generator / discriminator training with checkpointing."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import numeric as nm
from ..numeric import checkpoint
from ..numeric import tensor as T
from .discriminator import DiscriminatorModel
from .generator import GeneratorModel, generator_forward
from .losses import LossWeights, discriminator_loss, total_loss


class TrainingError(RuntimeError):
    pass


@dataclass
class GeneratorSample:
    """One training target with its conditioning inputs; images are CHW in [−1, 1]."""

    references: np.ndarray  # (K, 3, H, W)
    reference_lmks: np.ndarray  # (K, 1, H, W)
    query_lmk: np.ndarray  # (1, H, W)
    warped_projected: np.ndarray  # (3, H, W)
    projected_attention: np.ndarray  # (H, W)
    warped_matched: np.ndarray  # (3, H, W)
    matched_attention: np.ndarray  # (H, W)
    target: np.ndarray  # (3, H, W)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 1
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    weights: LossWeights = LossWeights()
    save_every: int = 0
    checkpoint_dir: str | None = None
    gan_mode: str = "lsgan"
    decay_from: float = 1.0  # fraction of steps after which lr falls linearly to 0; 1.0 keeps it constant


def learning_rate(config: TrainConfig, step: int) -> float:
    start = int(config.decay_from * config.steps)
    if step < start:
        return config.lr
    return config.lr * (config.steps - step) / max(config.steps - start, 1)


def batch_inputs(samples, idx):
    dtype = nm.get_default_dtype()

    def stack(name):
        return np.stack([getattr(samples[i], name) for i in idx]).astype(dtype)

    proj = stack("warped_projected") * stack("projected_attention")[:, None]
    match = stack("warped_matched") * stack("matched_attention")[:, None]
    return {
        "references": stack("references"),
        "reference_lmks": stack("reference_lmks"),
        "query_lmk": stack("query_lmk"),
        "warped_projected": proj,
        "warped_matched": match,
        "projected_attention": stack("projected_attention"),
        "matched_attention": stack("matched_attention"),
        "target": stack("target"),
    }


def run_generator(gen: GeneratorModel, b: dict):
    """Warped inputs enter the decoder multiplied by their attention maps."""
    out, _ = generator_forward(gen, b["references"], b["reference_lmks"], b["query_lmk"], b["warped_projected"], b["warped_matched"])
    return out


def save_models(directory, gen: GeneratorModel, disc: DiscriminatorModel, step: int) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    return {
        "generator": checkpoint.save_module(d / "generator.hmkt", gen),
        "discriminator": checkpoint.save_module(d / "discriminator.hmkt", disc),
        "step": step,
    }


def train_generator(gen: GeneratorModel, disc: DiscriminatorModel, samples, config: TrainConfig, rng: np.random.Generator, log=None) -> list[dict]:
    """Per step: one generator Adam step on the full objective, then one LSGAN discriminator step.

    Returns one record per step with every loss term.  On a non-finite value
    training stops with TrainingError; checkpoints already written are kept.
    """
    samples = list(samples)
    if not samples:
        raise TrainingError("empty generator dataset")
    g_opt = nm.Adam(gen.parameters(), lr=config.lr, betas=config.betas)
    d_opt = nm.Adam(disc.parameters(), lr=config.lr, betas=config.betas)
    history = []
    last_good = None
    for step in range(config.steps):
        idx = rng.choice(len(samples), size=min(config.batch_size, len(samples)), replace=False)
        b = batch_inputs(samples, idx)
        g_opt.lr = d_opt.lr = learning_rate(config, step)
        try:
            gen.zero_grad()
            disc.zero_grad()
            fake = run_generator(gen, b)
            warped = [b["warped_projected"], b["warped_matched"]]
            masks = [b["projected_attention"][:, None], b["matched_attention"][:, None]]
            loss, parts = total_loss(fake, b["target"], disc, b["query_lmk"], warped, masks, config.weights, gan_mode=config.gan_mode)
            T.backward(loss)
            g_opt.step()

            disc.zero_grad()
            d_loss = discriminator_loss(disc, b["target"], fake.data, b["query_lmk"], config.gan_mode)
            T.backward(d_loss)
            d_opt.step()
        except T.NonFiniteError as exc:
            where = f"; last good checkpoint at step {last_good}" if last_good is not None else ""
            raise TrainingError(f"non-finite generator loss at step {step}{where}: {exc}") from exc
        record = {"step": step, "gan": parts["gan"], "fm": parts["fm"], "pct": parts["pct"], "w": parts["w"], "total": parts["total"], "d_loss": d_loss.item(), "l1": float(np.abs(fake.data - b["target"]).mean())}
        history.append(record)
        if log is not None:
            log(record)
        if config.checkpoint_dir and config.save_every and (step + 1) % config.save_every == 0:
            save_models(config.checkpoint_dir, gen, disc, step + 1)
            last_good = step + 1
    gen.zero_grad()
    disc.zero_grad()
    return history


def train_discriminator_only(gen: GeneratorModel, disc: DiscriminatorModel, samples, steps: int, rng, lr: float = 2e-4) -> list[tuple[float, float]]:
    """D steps against a frozen generator; returns (mean real score, mean fake score) per step."""
    opt = nm.Adam(disc.parameters(), lr=lr, betas=(0.5, 0.999))
    from .discriminator import discriminate

    out = []
    for _ in range(steps):
        b = batch_inputs(samples, rng.choice(len(samples), size=1))
        with T.no_grad():
            fake = run_generator(gen, b)
        disc.zero_grad()
        loss = discriminator_loss(disc, b["target"], fake.data, b["query_lmk"])
        T.backward(loss)
        opt.step()
        with T.no_grad():
            rs, _ = discriminate(disc, b["target"], b["query_lmk"])
            fs, _ = discriminate(disc, fake.data, b["query_lmk"])
        out.append((float(np.mean([s.data.mean() for s in rs])), float(np.mean([s.data.mean() for s in fs]))))
    return out
