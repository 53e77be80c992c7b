"""Generator objective: least-squares GAN, feature matching, perceptual substitute, warp loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numeric import checkpoint
from ..numeric import functional as F
from ..numeric import tensor as T
from .discriminator import DiscriminatorModel, discriminate


@dataclass(frozen=True)
class LossWeights:
    fm: float = 10.0
    pct: float = 10.0
    w: float = 10.0


GAN_MODES = ("lsgan", "hinge")


def _check_mode(mode: str) -> None:
    if mode not in GAN_MODES:
        raise ValueError(f"gan_mode must be one of {GAN_MODES}, got {mode!r}")


def generator_gan_term(score: T.Tensor, mode: str = "lsgan") -> T.Tensor:
    return T.mean(T.square(score - 1.0)) if mode == "lsgan" else -T.mean(score)


def pyramid_features(x: T.Tensor, levels: int = 3) -> list:
    """Image pyramid used in place of a pretrained perceptual network."""
    feats = [x]
    for _ in range(levels - 1):
        feats.append(F.avg_pool2d(feats[-1], 2))
    return feats


class ConvFeatureExtractor:
    """Frozen conv stack loaded from a checkpoint with keys conv{i}.weight / conv{i}.bias.

    Lets a real pretrained extractor replace the pyramid substitute.
    """

    def __init__(self, weights: list, biases: list):
        self.weights = [T.Tensor(w) for w in weights]
        self.biases = [T.Tensor(b) for b in biases]

    @classmethod
    def from_checkpoint(cls, path) -> "ConvFeatureExtractor":
        state = checkpoint.load(path)
        n = 0
        while f"conv{n}.weight" in state:
            n += 1
        if n == 0:
            raise ValueError(f"{path}: no conv0.weight tensor")
        return cls([state[f"conv{i}.weight"] for i in range(n)], [state[f"conv{i}.bias"] for i in range(n)])

    def __call__(self, x: T.Tensor) -> list:
        feats = []
        for w, b in zip(self.weights, self.biases):
            x = T.leaky_relu(F.conv2d(x, w, b, padding=w.shape[-1] // 2))
            feats.append(x)
        return feats


def _l1(a, b) -> T.Tensor:
    return T.mean(T.absolute(a - b))


def warp_loss(target, warped_images, masks) -> T.Tensor:
    """Mean L1 between each warped input and the target over its visible pixels."""
    y = T.as_tensor(target).data
    total = 0.0
    for img, m in zip(warped_images, masks):
        img = T.as_tensor(img).data
        m = np.broadcast_to(np.asarray(m, dtype=np.float64), img.shape)
        denom = m.sum()
        if denom > 0:
            total += float((np.abs(img - y) * m).sum() / denom)
    return T.Tensor(np.asarray(total))


def total_loss(gen_out, target, disc: DiscriminatorModel, condition, warped_images=(), masks=(), weights: LossWeights | None = None, extractor=None, gan_mode: str = "lsgan"):
    """L = Σ_k L_GAN + λ_FM·Σ_k L_FM + λ_PCT·L_PCT + λ_W·L_W.

    Returns (scalar Tensor, breakdown).  The breakdown holds the raw terms and
    the weighted contributions; the contributions, added left to right in
    float32, equal the returned scalar bit for bit.
    """
    _check_mode(gan_mode)
    weights = weights or LossWeights()
    extractor = extractor or pyramid_features
    fake_scores, fake_feats = discriminate(disc, gen_out, condition)
    with T.no_grad():
        _, real_feats = discriminate(disc, target, condition)
    gan = None
    fm = None
    for s, ff, rf in zip(fake_scores, fake_feats, real_feats):
        g = generator_gan_term(s, gan_mode)
        gan = g if gan is None else gan + g
        m = None
        for a, b in zip(ff, rf):
            term = _l1(a, b.data)
            m = term if m is None else m + term
        m = m * (1.0 / len(ff))
        fm = m if fm is None else fm + m
    tgt = T.as_tensor(target)
    pct = None
    for a, b in zip(extractor(gen_out), extractor(tgt)):
        term = _l1(a, b.data)
        pct = term if pct is None else pct + term
    lw = warp_loss(target, warped_images, masks)
    parts = {"gan": gan, "fm": fm * weights.fm, "pct": pct * weights.pct, "w": lw * weights.w}
    total = ((parts["gan"] + parts["fm"]) + parts["pct"]) + parts["w"]
    breakdown = {
        "gan": gan.item(),
        "fm": fm.item(),
        "pct": pct.item(),
        "w": lw.item(),
        "weighted": {k: v.data.reshape(()).copy() for k, v in parts.items()},
        "total": total.item(),
    }
    return total, breakdown


def discriminator_loss(disc: DiscriminatorModel, real, fake, condition, gan_mode: str = "lsgan") -> T.Tensor:
    """Least-squares (real → 1, fake → 0) or hinge, summed over scales."""
    _check_mode(gan_mode)
    real_scores, _ = discriminate(disc, real, condition)
    fake_scores, _ = discriminate(disc, T.as_tensor(fake).detach(), condition)
    loss = None
    for r, f in zip(real_scores, fake_scores):
        if gan_mode == "lsgan":
            term = T.mean(T.square(r - 1.0)) + T.mean(T.square(f))
        else:
            term = T.mean(T.relu(1.0 - r)) + T.mean(T.relu(f + 1.0))
        loss = term if loss is None else loss + term
    return loss
