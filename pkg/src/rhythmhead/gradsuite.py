"""Finite-difference sweep over every differentiable component, as run by ``rhythmhead gradcheck``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import functional as F
from .numeric import layers as L
from .numeric import tensor as T

LAYER_TOL = 1e-4
PATH_TOL = 1e-3  # rasterizer and the full compose path

OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (1, 4)]),
    "div": (lambda a, b: T.div(a, T.exp(b)), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "exp": (lambda a: T.exp(a), [(5,)]),
    "log": (lambda a: T.log(T.exp(a) + 1.0), [(5,)]),
    "tanh": (lambda a: T.tanh(a), [(5,)]),
    "sigmoid": (lambda a: T.sigmoid(a), [(5,)]),
    "leaky_relu": (lambda a: T.leaky_relu(a), [(5,)]),
    "sqrt": (lambda a: T.sqrt(T.square(a) + 1.0), [(5,)]),
    "power": (lambda a: T.power(T.exp(a), 1.5), [(5,)]),
    "softmax": (lambda a: T.softmax(a, axis=1), [(3, 4)]),
    "sum": (lambda a: T.tsum(a, axis=1), [(3, 4)]),
    "mean": (lambda a: T.mean(a, axis=0, keepdims=True), [(3, 4)]),
    "reshape_transpose": (lambda a: T.transpose(T.reshape(a, (4, 3)), (1, 0)), [(3, 4)]),
    "index": (lambda a: a[np.array([0, 2, 2]), 1:], [(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "sort": (lambda a: T.sort(a, axis=0), [(5, 3)]),
    "conv1d": (lambda a, w: F.conv1d(a, w, None, 2, 1), [(1, 2, 9), (3, 2, 3)]),
    "conv2d": (lambda a, w: F.conv2d(a, w, None, 2, 1), [(1, 2, 6, 6), (3, 2, 3, 3)]),
    "conv2d_per_sample": (lambda a, w: F.conv2d(a, w, None, 1, 1), [(2, 2, 4, 4), (2, 3, 2, 3, 3)]),
    "conv_transpose2d": (lambda a, w: F.conv_transpose2d(a, w, None, 2, 1), [(1, 2, 3, 3), (2, 3, 4, 4)]),
    "avg_pool2d": (lambda a: F.avg_pool2d(a, 2), [(1, 2, 4, 4)]),
    "instance_norm": (lambda a: F.instance_norm(a), [(2, 3, 4, 4)]),
    "layer_norm": (lambda a, w: F.layer_norm(a, w, None), [(3, 5), (5,)]),
    "upsample": (lambda a: F.upsample_nearest(a, 2), [(1, 2, 3, 3)]),
}


@dataclass
class CheckResult:
    module: str
    check: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _errors(fn, tensors, rng, max_coords=30, epsilon=1e-6) -> float:
    return max(nm.gradient_errors(fn, tensors, epsilon=epsilon, max_coords=max_coords, rng=rng))


def _randomize_biases(module, rng, scale=0.1):
    # keeps zero-initialized biases (and zero-padded inputs) off the leaky-ReLU kink
    if isinstance(module, L.LayerParams):
        biases = [module.bias] if module.bias is not None else []
    else:
        biases = [p for name, p in module.named_parameters() if name.endswith("bias")]
    for p in biases:
        p.data[:] = rng.normal(scale=scale, size=p.shape)


def _op_checks(rng):
    for name, (fn, shapes) in OPS.items():
        args = [nm.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
        w = rng.normal(size=fn(*args).shape)
        yield "numeric-core", f"op:{name}", lambda fn=fn, args=args, w=w: _errors(lambda: (fn(*args) * w).sum(), args, rng), LAYER_TOL


def _layer_checks(rng):
    x2 = nm.Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    x1 = nm.Tensor(rng.normal(size=(2, 3, 10)), requires_grad=True)
    cases = {
        "linear": (L.linear(rng, 5, 4), nm.Tensor(rng.normal(size=(3, 5)), requires_grad=True)),
        "conv2d": (L.conv2d(rng, 3, 4, 3, stride=2), x2),
        "conv1d": (L.conv1d(rng, 3, 4, 4, stride=2, padding=1), x1),
        "conv_transpose2d": (L.conv_transpose2d(rng, 3, 2), x2),
    }
    for name, (layer, x) in cases.items():
        _randomize_biases(layer, rng)
        w = rng.normal(size=nm.forward(layer, x).shape)
        tensors = [x, *layer.parameters()]
        yield "numeric-core", f"layer:{name}", lambda layer=layer, x=x, w=w, tensors=tensors: _errors(lambda: (nm.forward(layer, x) * w).sum(), tensors, rng), LAYER_TOL


def _render_checks(rng):
    from .render import Camera, RasterSettings, soft_rasterize_tensors

    def run():
        cam = Camera(16, 16, sx=4.0, sy=-4.0)
        V = nm.Tensor(rng.uniform(-1.2, 1.2, size=(9, 3)), requires_grad=True)
        C = nm.Tensor(rng.uniform(size=(9, 3)), requires_grad=True)
        faces = np.arange(9).reshape(3, 3)
        settings = RasterSettings(sigma=0.5, gamma=0.05)
        wi, ws = rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16))

        def fn():
            img, sil = soft_rasterize_tensors(V, C, faces, cam, settings)
            return T.mean(img * wi) + T.mean(sil * ws)

        return _errors(fn, [V, C], rng, max_coords=None)

    yield "render", "soft_rasterize", run, PATH_TOL


def _motion_checks(rng):
    from . import motion as M

    def run():
        cfg = M.MotionConfig(tau=8, sample_rate=1000, conv1=(2, 5), conv2=(2, 2), hidden=8, feature_dim=16)
        m = M.PhiModel(cfg, rng)
        m.reference_encoder[3].weight.data[:] = rng.normal(scale=0.1, size=m.reference_encoder[3].weight.shape)
        _randomize_biases(m, rng)
        n = 12
        clip = M.MotionClip(rng.normal(scale=0.1, size=(n, 6)), rng.uniform(-0.5, 0.5, n * cfg.samples_per_frame))
        a_ref, h_ref, a_tgt, h_tgt = (np.asarray(a, np.float64) for a in M.prepare_batch([clip], cfg))

        def fn():
            pred = M.extrapolate_tensor(m, M.encode_reference(m, h_ref, a_ref), a_tgt)
            return T.mean(T.square(pred - h_tgt)) + 0.01 * T.mean(T.square(M.discriminator_tensor(m, pred) - 1.0))

        return _errors(fn, m.generator_parameters(), rng)

    yield "motion", "hypernetwork_path", run, LAYER_TOL


def _expression_checks(rng):
    from .expression import N_COEFFS, PsiModel

    def run():
        m = PsiModel(160, rng)
        _randomize_biases(m, rng)
        m.decoder[1].weight.data[:] = rng.normal(scale=0.1, size=m.decoder[1].weight.shape)
        x = rng.normal(size=(2, 160))
        ref = rng.normal(size=(2, N_COEFFS))
        tgt = rng.normal(size=(2, N_COEFFS))
        return _errors(lambda: T.mean(T.square(m(x, ref) - tgt)), m.parameters(), rng)

    yield "expression", "psi", run, LAYER_TOL


def _synthesis_checks(rng):
    from . import synthesis as S

    cfg = S.GeneratorConfig(image_size=16, K=2, channels=4, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2)
    m = S.GeneratorModel(cfg, rng)
    _randomize_biases(m, rng)
    refs = rng.uniform(-1, 1, (1, 2, 3, 16, 16))
    ref_l = rng.uniform(size=(1, 2, 1, 16, 16))
    query = rng.uniform(size=(1, 1, 16, 16))
    proj = rng.uniform(-1, 1, (1, 3, 16, 16))
    match = rng.uniform(-1, 1, (1, 3, 16, 16))

    def embedding():
        fr = nm.Tensor(refs, requires_grad=True)
        w = rng.normal(size=(1, cfg.embed_dim))

        def fn():
            a = S.activation_maps(m, ref_l, query)
            e_y, e_l = S.embed_references(m, fr, ref_l, a)
            return (e_y * w).sum() + (e_l * w).sum()

        params = [m.activation_encoder[0].weight, m.image_features[1].weight, m.exchange[0].weight, m.gate_image[0].weight, m.reduce_landmark[1].weight]
        return _errors(fn, [fr, *params], rng)

    def fusion():
        e_l = nm.Tensor(rng.normal(size=(1, 8)), requires_grad=True)
        e_y = nm.Tensor(rng.normal(size=(1, 8)), requires_grad=True)
        w = [rng.normal(size=v.shape) for layer in S.fuse(m, e_l, e_y) for v in layer.values()]

        def fn():
            flat = [v for layer in S.fuse(m, e_l, e_y) for v in layer.values()]
            return sum((v * wi).sum() for v, wi in zip(flat, w))

        return _errors(fn, [e_l, e_y, m.fuse_landmark.weight, m.fuse_project.weight], rng)

    def spade_block():
        # one scalarized SPADE layer: IN(x)·(1 + γ) + β with γ, β from a conv on φ
        x = nm.Tensor(rng.normal(size=(1, 4, 8, 8)), requires_grad=True)
        phi = nm.Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
        kg = nm.Tensor(rng.normal(scale=0.3, size=(4, 2, 3, 3)), requires_grad=True)
        kb = nm.Tensor(rng.normal(scale=0.3, size=(4, 2, 3, 3)), requires_grad=True)
        w = rng.normal(size=(1, 4, 8, 8))

        def fn():
            n = F.instance_norm(x)
            return ((n * (F.conv2d(phi, kg, padding=1) + 1.0) + F.conv2d(phi, kb, padding=1)) * w).sum()

        return _errors(fn, [x, phi, kg, kb], rng)

    def compose():
        e_y = nm.Tensor(rng.normal(size=(1, 8)), requires_grad=True)
        p = nm.Tensor(proj, requires_grad=True)
        theta = [{k: nm.Tensor(v.data, requires_grad=True) for k, v in layer.items()} for layer in S.fuse(m, rng.normal(size=(1, 8)), rng.normal(size=(1, 8)))]
        w = rng.normal(size=(1, 3, 16, 16))

        def fn():
            return (S.compose_frame(m, theta, e_y, query, p, match) * w).sum()

        tensors = [e_y, p, theta[0]["S"], theta[1]["gamma"], theta[2]["beta"], m.spade_projected[0][1].weight, m.upsample[1].weight]
        return _errors(fn, tensors, rng)

    def discriminator():
        d = S.DiscriminatorModel(rng, channels=4, depth=2)
        _randomize_biases(d, rng)
        img = nm.Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)), requires_grad=True)

        def fn():
            scores, feats = S.discriminate(d, img, query)
            return sum(T.mean(s) for s in scores) + sum(T.mean(f[-1]) for f in feats)

        return _errors(fn, [img, *d.parameters()[:4]], rng)

    def objective():
        d = S.DiscriminatorModel(rng, channels=4, depth=2)
        _randomize_biases(d, rng)
        fake = nm.Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)), requires_grad=True)
        target = rng.uniform(-1, 1, (1, 3, 16, 16))
        return _errors(lambda: S.total_loss(fake, target, d, query)[0], [fake], rng)

    yield "synthesis", "embedding", embedding, LAYER_TOL
    yield "synthesis", "fusion", fusion, LAYER_TOL
    yield "synthesis", "spade_block", spade_block, LAYER_TOL
    yield "synthesis", "compose_path", compose, PATH_TOL
    yield "synthesis", "discriminator", discriminator, LAYER_TOL
    yield "synthesis", "objective", objective, LAYER_TOL


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Every check runs in float64 with central differences at ε = 1e-6."""
    rng = np.random.default_rng(seed)
    results = []
    with nm.precision(np.float64):
        for group in (_op_checks, _layer_checks, _render_checks, _motion_checks, _expression_checks, _synthesis_checks):
            for module, name, fn, tol in group(rng):
                t0 = time.perf_counter()
                err = float(fn())
                results.append(CheckResult(module, name, err, tol, time.perf_counter() - t0))
    return results


def format_table(results) -> str:
    lines = [f"{'module':<14}{'check':<28}{'max rel err':>14}{'tol':>10}  status"]
    for r in results:
        lines.append(f"{r.module:<14}{r.check:<28}{r.error:>14.3e}{r.tolerance:>10.0e}  {'pass' if r.passed else 'FAIL'}")
    by_module = {}
    for r in results:
        by_module.setdefault(r.module, []).append(r)
    lines.append("")
    for module, rs in by_module.items():
        worst = max(rs, key=lambda r: r.error / r.tolerance)
        lines.append(f"{module:<14}worst {worst.check:<22}{worst.error:>14.3e}  {'pass' if all(r.passed for r in rs) else 'FAIL'}")
    return "\n".join(lines)
