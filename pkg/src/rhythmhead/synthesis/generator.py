"""Hybrid-embedding generator with a parallel-SPADE composition decoder."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .. import numeric as nm
from ..numeric import functional as F
from ..numeric import layers as L
from ..numeric import tensor as T


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    K: int = 8
    n_layers: int = 3
    channels: int = 16  # embedding feature width
    embed_dim: int = 64  # length of e_y and e_l
    fuse_dim: int = 32  # width of the E_F gating product
    lmk_channels: int = 8  # φ_l width
    decoder_channels: tuple = (32, 32, 16)
    pyramid_channels: int = 8
    gate_mode: str = "stack"  # "stack": K stacked on channels; "mean": duplication-invariant average

    def __post_init__(self):
        if self.gate_mode not in ("stack", "mean"):
            raise SynthesisError(f"gate_mode must be 'stack' or 'mean', got {self.gate_mode!r}")
        if len(self.decoder_channels) != self.n_layers:
            raise SynthesisError("decoder_channels needs one entry per decoder layer")
        if self.image_size % (2 ** (self.n_layers - 1)) or self.image_size % 8:
            raise SynthesisError(f"image_size {self.image_size} must be divisible by 8 and 2^(n_layers-1)")
        if self.K < 1:
            raise SynthesisError("K must be at least 1")

    @property
    def coarse_size(self) -> int:
        # upsampling sits between blocks, so the last block runs at full resolution
        return self.image_size // 2 ** (self.n_layers - 1)

    @property
    def embed_size(self) -> int:
        return self.image_size // 4

    def layer_size(self, i: int) -> int:
        return self.coarse_size * 2**i


@dataclass
class EmbeddingOutput:
    e_y: T.Tensor
    e_l: T.Tensor
    alphas: T.Tensor
    theta: list


class GeneratorModel(L.Module):
    def __init__(self, config: GeneratorConfig | None = None, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else nm.get_rng()
        self.config = cfg = config or GeneratorConfig()
        C, D, Cl, Cp = cfg.channels, cfg.embed_dim, cfg.lmk_channels, cfg.pyramid_channels
        # E_A is applied to reference and query landmark images alike
        self.activation_encoder = [L.conv2d(rng, 1, C, 3, stride=2), L.conv2d(rng, C, C, 3, stride=2)]
        self.image_features = [L.conv2d(rng, 3, C, 3, stride=2), L.conv2d(rng, C, C, 3, stride=2)]
        self.landmark_features = [L.conv2d(rng, 1, C, 3, stride=2), L.conv2d(rng, C, C, 3, stride=2)]
        self.exchange = [L.conv2d(rng, 2 * C, C, 1), L.conv2d(rng, C, C, 1)]
        self.exchange_image = L.conv2d(rng, 2 * C, C, 1)
        self.exchange_landmark = L.conv2d(rng, 2 * C, C, 1)
        gate_in = C * (cfg.K if cfg.gate_mode == "stack" else 1)
        self.gate_image = [L.conv2d(rng, gate_in, C, 1), L.conv2d(rng, C, C, 1)]
        self.gate_landmark = [L.conv2d(rng, gate_in, C, 1), L.conv2d(rng, C, C, 1)]
        flat = C * (cfg.embed_size // 2) ** 2
        self.reduce_image = [L.conv2d(rng, C, C, 3, stride=2), L.linear(rng, flat, D)]
        self.reduce_landmark = [L.conv2d(rng, C, C, 3, stride=2), L.linear(rng, flat, D)]

        # fusion E_F = (E_F_I, E_F_L, E_F_P)
        self.fuse_image = L.linear(rng, D, cfg.fuse_dim)
        self.fuse_landmark = L.linear(rng, D, cfg.fuse_dim)
        self.theta_shapes = []
        for c in cfg.decoder_channels:
            self.theta_shapes.append({"S": (Cl, 1, 3, 3), "gamma": (c, Cl, 3, 3), "beta": (c, Cl, 3, 3)})
        n_theta = sum(int(np.prod(s)) for layer in self.theta_shapes for s in layer.values())
        self.fuse_project = L.linear(rng, cfg.fuse_dim, n_theta)
        # small data-dependent part on top of He-initialized base kernels held in the bias
        self.fuse_project.weight.data *= 0.1
        base = []
        for layer in self.theta_shapes:
            for s in layer.values():
                fan_in = s[1] * s[2] * s[3]
                base.append(rng.uniform(-1, 1, int(np.prod(s))) * np.sqrt(6.0 / fan_in))
        self.fuse_project.bias.data[:] = np.concatenate(base)

        # decoder
        chans = cfg.decoder_channels
        self.decoder_input = L.linear(rng, D, chans[0] * cfg.coarse_size**2)
        self.pyramid_projected = [L.conv2d(rng, 3, Cp, 3) for _ in chans]
        self.pyramid_matched = [L.conv2d(rng, 3, Cp, 3) for _ in chans]
        self.spade_projected = [[_small_conv(rng, Cp, c), _small_conv(rng, Cp, c)] for c in chans]
        self.spade_matched = [[_small_conv(rng, Cp, c), _small_conv(rng, Cp, c)] for c in chans]
        self.upsample = [L.conv_transpose2d(rng, ci, co) for ci, co in zip(chans[:-1], chans[1:])]
        self.to_rgb = L.conv2d(rng, chans[-1], 3, 3)

    def generator_parameters(self):
        return self.parameters()


def _small_conv(rng, c_in: int, c_out: int) -> L.LayerParams:
    # γ, β heads start near the identity denormalization but keep gradients alive
    layer = L.conv2d(rng, c_in, c_out, 3)
    layer.weight.data *= 0.1
    return layer


def _leaky(x):
    return T.leaky_relu(x)


def _stack_images(x, channels: int, name: str, K: int | None = None) -> T.Tensor:
    """Accept (B, K, C, H, W), (K, C, H, W) or (K, H, W) for single-channel inputs."""
    t = T.as_tensor(x)
    if t.ndim == 3 and channels == 1:
        t = t.reshape(1, t.shape[0], 1, t.shape[1], t.shape[2])
    elif t.ndim == 4:
        t = t.reshape(1, *t.shape)
    if t.ndim != 5 or t.shape[2] != channels:
        raise SynthesisError(f"{name} must be (B, K, {channels}, H, W), got {T.as_tensor(x).shape}")
    if K is not None and t.shape[1] != K:
        raise SynthesisError(f"{name} has K={t.shape[1]}, expected {K}")
    return t


def _single_images(x, channels: int, name: str) -> T.Tensor:
    t = T.as_tensor(x)
    if t.ndim == 2 and channels == 1:
        t = t.reshape(1, 1, *t.shape)
    elif t.ndim == 3:
        t = t.reshape(1, *t.shape)
    if t.ndim != 4 or t.shape[1] != channels:
        raise SynthesisError(f"{name} must be (B, {channels}, H, W), got {T.as_tensor(x).shape}")
    return t


def _encode_activation(model: GeneratorModel, x: T.Tensor) -> T.Tensor:
    for layer in model.activation_encoder:
        x = _leaky(layer(x))
    return x


def activation_maps(model: GeneratorModel, reference_lmk_images, query_lmk_image) -> T.Tensor:
    """α (B, K, h, w): softmax over K of the channel-summed product E_A(l_k) ⊙ E_A(l_t)."""
    refs = _stack_images(reference_lmk_images, 1, "reference landmark images")
    query = _single_images(query_lmk_image, 1, "query landmark image")
    B, K = refs.shape[:2]
    if query.shape[0] != B or query.shape[2:] != refs.shape[3:]:
        raise SynthesisError(f"query {query.shape} does not match references {refs.shape}")
    er = _encode_activation(model, refs.reshape(B * K, *refs.shape[2:]))
    eq = _encode_activation(model, query)
    c, h, w = er.shape[1:]
    energy = (er.reshape(B, K, c, h, w) * eq.reshape(B, 1, c, h, w)).sum(axis=2)
    return T.softmax(energy, axis=1)


def _two_conv(layers, x):
    for layer in layers:
        x = _leaky(layer(x))
    return x


def _gate(model: GeneratorModel, layers, q: T.Tensor, B: int, K: int) -> T.Tensor:
    C, h, w = q.shape[1:]
    if model.config.gate_mode == "stack":
        if K != model.config.K:
            raise SynthesisError(f"stacking ConvGate was built for K={model.config.K}, got K={K}")
        x = q.reshape(B, K * C, h, w)
    else:
        x = q.reshape(B, K, C, h, w).mean(axis=1)
    return layers[1](_leaky(layers[0](x)))


def embed_references(model: GeneratorModel, reference_frames, reference_lmk_images, alphas):
    """(e_y, e_l) from K reference frames and their landmark images, weighted by α."""
    frames = _stack_images(reference_frames, 3, "reference frames")
    lmks = _stack_images(reference_lmk_images, 1, "reference landmark images")
    a = T.as_tensor(alphas)
    if a.ndim == 3:
        a = a.reshape(1, *a.shape)
    B, K = frames.shape[:2]
    if lmks.shape[:2] != (B, K) or a.shape[:2] != (B, K):
        raise SynthesisError(f"K mismatch: frames {frames.shape[:2]}, landmark images {lmks.shape[:2]}, alphas {a.shape[:2]}")
    qy = _two_conv(model.image_features, frames.reshape(B * K, *frames.shape[2:]))
    ql = _two_conv(model.landmark_features, lmks.reshape(B * K, *lmks.shape[2:]))
    C, h, w = qy.shape[1:]
    if a.shape[2:] != (h, w):
        raise SynthesisError(f"alphas are {a.shape[2:]}, features are {(h, w)}")
    # information exchange across modalities
    ex = _two_conv(model.exchange, T.concat([qy, ql], axis=1))
    qy_x = model.exchange_image(T.concat([qy, ex], axis=1))
    ql_x = model.exchange_landmark(T.concat([ql, ex], axis=1))
    a5 = a.reshape(B, K, 1, h, w)
    sy = (a5 * qy_x.reshape(B, K, C, h, w)).sum(axis=1) + _gate(model, model.gate_image, qy, B, K)
    sl = (a5 * ql_x.reshape(B, K, C, h, w)).sum(axis=1) + _gate(model, model.gate_landmark, ql, B, K)

    def reduce(layers, x):
        x = _leaky(layers[0](x))
        return layers[1](x.reshape(B, -1))

    return reduce(model.reduce_image, sy), reduce(model.reduce_landmark, sl)


def fuse(model: GeneratorModel, e_l, e_y) -> list:
    """θ = E_F_P(softmax(E_F_L(e_l)) ⊙ E_F_I(e_y)), split into per-layer {S, gamma, beta} kernels."""
    e_l, e_y = T.as_tensor(e_l), T.as_tensor(e_y)
    gate = T.softmax(model.fuse_landmark(e_l), axis=1)
    flat = model.fuse_project(gate * model.fuse_image(e_y))
    B = flat.shape[0]
    theta, off = [], 0
    for shapes in model.theta_shapes:
        layer = {}
        for key, s in shapes.items():
            n = int(np.prod(s))
            layer[key] = flat[:, off : off + n].reshape(B, *s)
            off += n
        theta.append(layer)
    return theta


def _pool_to(x: T.Tensor, size: int) -> T.Tensor:
    k = x.shape[2] // size
    return x if k == 1 else F.avg_pool2d(x, k)


def compose_frame(model: GeneratorModel, theta, e_y, query_lmk_image, warped_projected, warped_matched, force_identity: bool = False) -> T.Tensor:
    """ŷ_t (B, 3, H, W) in [−1, 1].

    Each decoder layer denormalizes the stream with three parallel SPADE
    branches (landmark path with hyper-predicted kernels, matched-reference
    path, projected path) and sums them; every block but the last then
    upsamples, so the final one modulates the full-resolution grid.  ``force_identity`` sets
    every scale to 1 and shift to 0.
    """
    cfg = model.config
    lmk = _single_images(query_lmk_image, 1, "query landmark image")
    proj = _single_images(warped_projected, 3, "warped projected image")
    match = _single_images(warped_matched, 3, "warped matched image")
    e_y = T.as_tensor(e_y)
    B = e_y.shape[0]
    for name, img in (("query landmark image", lmk), ("warped projected image", proj), ("warped matched image", match)):
        if img.shape[0] != B or img.shape[2:] != (cfg.image_size, cfg.image_size):
            raise SynthesisError(f"{name} is {img.shape}, expected batch {B} at {cfg.image_size}×{cfg.image_size}")
    if len(theta) != cfg.n_layers:
        raise SynthesisError(f"theta has {len(theta)} layers, decoder has {cfg.n_layers}")

    chans = cfg.decoder_channels
    x = model.decoder_input(e_y).reshape(B, chans[0], cfg.coarse_size, cfg.coarse_size)
    for i in range(cfg.n_layers):
        r = cfg.layer_size(i)
        if x.shape[2:] != (r, r) or x.shape[1] != chans[i]:
            raise SynthesisError(f"decoder layer {i}: stream is {x.shape[1:]}, expected {(chans[i], r, r)}")
        th = theta[i]
        if th["gamma"].shape[1] != chans[i]:
            raise SynthesisError(f"decoder layer {i}: theta kernels are for {th['gamma'].shape[1]} channels, stream has {chans[i]}")
        n = F.instance_norm(x)
        phi_l = _leaky(F.conv2d(_pool_to(lmk, r), th["S"], padding=1))
        phi_p = _leaky(model.pyramid_projected[i](_pool_to(proj, r)))
        phi_m = _leaky(model.pyramid_matched[i](_pool_to(match, r)))
        if force_identity:
            s = n * 3.0
        else:
            s = None
            pairs = (
                (F.conv2d(phi_l, th["gamma"], padding=1), F.conv2d(phi_l, th["beta"], padding=1)),
                (model.spade_matched[i][0](phi_m), model.spade_matched[i][1](phi_m)),
                (model.spade_projected[i][0](phi_p), model.spade_projected[i][1](phi_p)),
            )
            for gamma, beta in pairs:
                branch = n * (gamma + 1.0) + beta
                s = branch if s is None else s + branch
        x = _leaky(s)
        if i < cfg.n_layers - 1:
            x = model.upsample[i](x)
    return T.tanh(model.to_rgb(x))


def generator_forward(model: GeneratorModel, reference_frames, reference_lmk_images, query_lmk_image, warped_projected, warped_matched) -> tuple[T.Tensor, EmbeddingOutput]:
    alphas = activation_maps(model, reference_lmk_images, query_lmk_image)
    e_y, e_l = embed_references(model, reference_frames, reference_lmk_images, alphas)
    theta = fuse(model, e_l, e_y)
    out = compose_frame(model, theta, e_y, query_lmk_image, warped_projected, warped_matched)
    return out, EmbeddingOutput(e_y, e_l, alphas, theta)


def matting_compose(color_mask, attention, reference):
    """Î = (1 − A)·C + A·I_r elementwise; A outside [0, 1] is clamped with a warning."""
    tensors = any(isinstance(v, T.Tensor) for v in (color_mask, attention, reference))
    A = attention.data if isinstance(attention, T.Tensor) else np.asarray(attention)
    C = color_mask.data if isinstance(color_mask, T.Tensor) else np.asarray(color_mask)
    R = reference.data if isinstance(reference, T.Tensor) else np.asarray(reference)
    if C.shape != R.shape:
        raise SynthesisError(f"color mask {C.shape} and reference {R.shape} differ")
    if np.broadcast_shapes(A.shape, C.shape) != C.shape:
        raise SynthesisError(f"attention {A.shape} does not broadcast to {C.shape}")
    if A.min() < 0.0 or A.max() > 1.0:
        warnings.warn("matting_compose: attention outside [0, 1] clamped", RuntimeWarning, stacklevel=2)
        attention = T.clamp(attention, 0.0, 1.0) if isinstance(attention, T.Tensor) else np.clip(A, 0.0, 1.0)
    if tensors:
        a = T.as_tensor(attention)
        return (1.0 - a) * color_mask + a * reference
    A = np.asarray(attention)
    return (1.0 - A) * C + A * R
