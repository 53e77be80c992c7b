"""Two-scale patch discriminators conditioned on the landmark image."""
from __future__ import annotations

import numpy as np

from .. import numeric as nm
from ..numeric import functional as F
from ..numeric import layers as L
from ..numeric import tensor as T
from .generator import SynthesisError, _single_images


class PatchDiscriminator(L.Module):
    def __init__(self, rng, in_channels: int = 4, channels: int = 16, depth: int = 3):
        self.depth = depth
        chans = [in_channels] + [channels * min(2**i, 4) for i in range(depth)]
        self.layers = [L.conv2d(rng, chans[i], chans[i + 1], 3, stride=2) for i in range(depth)]
        self.score = L.conv2d(rng, chans[-1], 1, 3)

    def __call__(self, x):
        feats = []
        for layer in self.layers:
            x = T.leaky_relu(layer(x))
            feats.append(x)
        return self.score(x), feats


class DiscriminatorModel(L.Module):
    """D_1 on the full-resolution (image, landmark image) pair, D_2 on its 2× average-pooled copy."""

    def __init__(self, rng: np.random.Generator | None = None, channels: int = 16, depth: int = 3):
        rng = rng if rng is not None else nm.get_rng()
        self.depth = depth
        self.scales = [PatchDiscriminator(rng, 4, channels, depth), PatchDiscriminator(rng, 4, channels, depth)]


def discriminate(model: DiscriminatorModel, image, condition):
    """Returns ([score D_1, score D_2], [features D_1, features D_2])."""
    img = _single_images(image, 3, "image")
    cond = _single_images(condition, 1, "condition")
    if img.shape[0] != cond.shape[0] or img.shape[2:] != cond.shape[2:]:
        raise SynthesisError(f"image {img.shape} and condition {cond.shape} differ in size")
    x = T.concat([img, cond], axis=1)
    scores, feats = [], []
    for k, d in enumerate(model.scales):
        s, f = d(x if k == 0 else F.avg_pool2d(x, 2**k))
        scores.append(s)
        feats.append(f)
    return scores, feats
