"""Model bundle, shared per-frame conditioning, training drivers and video generation."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import expression as ex
from .. import geometry, render
from ..audio import AudioTrack
from ..motion import MotionClip, PhiModel, encode_reference, extrapolate, train_motion_learner
from ..numeric import checkpoint
from ..numeric import tensor as T
from ..synthesis import (
    DiscriminatorModel,
    GeneratorConfig,
    GeneratorModel,
    GeneratorSample,
    LossWeights,
    TrainConfig,
    render_landmark_image,
    train_generator,
    warp,
)
from ..synthesis.training import batch_inputs, run_generator
from .config import PipelineConfig
from .scene import motion_config, save_frames

STAGES = ("disentangle", "select_reference", "unproject", "motion", "expression", "frames", "write")


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` and ``frame`` say where."""

    def __init__(self, stage: str, frame, cause: BaseException):
        where = f" at frame {frame}" if frame is not None else ""
        super().__init__(f"stage '{stage}' failed{where}: {cause}")
        self.stage = stage
        self.frame = frame


def stage_rng(config: PipelineConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng([config.seed, STAGES.index(stage) if stage in STAGES else sum(map(ord, stage))])


# ---------------------------------------------------------------------------
# model bundle


class BasisModule:
    """Adapter so a PCA basis saves and hashes like any other module."""

    def __init__(self, basis: ex.ExpressionBasis | None = None):
        self.basis = basis

    def state_dict(self) -> dict:
        return self.basis.to_state()

    def load_state_dict(self, state) -> None:
        self.basis = ex.ExpressionBasis.from_state(state)


def float32_basis(basis: ex.ExpressionBasis) -> ex.ExpressionBasis:
    """The basis exactly as a checkpoint would return it."""
    return ex.ExpressionBasis.from_state({k: np.asarray(v, dtype=np.float32) for k, v in basis.to_state().items()})


def generator_config(config: PipelineConfig) -> GeneratorConfig:
    return GeneratorConfig(image_size=config.image_size, K=config.K, gate_mode=config.gate_mode)


@dataclass
class Models:
    phi: PhiModel
    psi: ex.PsiModel
    basis: ex.ExpressionBasis | None
    generator: GeneratorModel
    discriminator: DiscriminatorModel | None = None

    FILES = {"phi": "phi.hmkt", "psi": "psi.hmkt", "basis": "basis.hmkt", "generator": "generator.hmkt", "discriminator": "discriminator.hmkt"}

    @classmethod
    def build(cls, config: PipelineConfig) -> "Models":
        return cls(
            PhiModel(motion_config(config), stage_rng(config, "init_phi")),
            ex.PsiModel(ex.window_length(config.sample_rate, config.fps), stage_rng(config, "init_psi")),
            None,
            GeneratorModel(generator_config(config), stage_rng(config, "init_generator")),
            DiscriminatorModel(stage_rng(config, "init_discriminator")),
        )

    def _modules(self) -> dict:
        mods = {"phi": self.phi, "psi": self.psi, "generator": self.generator}
        if self.basis is not None:
            mods["basis"] = BasisModule(self.basis)
        if self.discriminator is not None:
            mods["discriminator"] = self.discriminator
        return mods

    def hashes(self) -> dict:
        return {name: hashlib.sha256(checkpoint.dumps(m.state_dict())).hexdigest() for name, m in self._modules().items()}

    def save(self, directory, config: PipelineConfig, only=None) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(config.to_json())
        return {name: checkpoint.save_module(d / self.FILES[name], m) for name, m in self._modules().items() if only is None or name in only}

    @classmethod
    def load(cls, directory, config: PipelineConfig | None = None, require=("phi", "psi", "basis", "generator")) -> tuple["Models", PipelineConfig]:
        d = Path(directory)
        if config is None:
            if not (d / "config.json").exists():
                raise PipelineError("load_models", None, FileNotFoundError(f"{d / 'config.json'} not found"))
            config = PipelineConfig.load(d / "config.json")
        models = cls.build(config)
        basis = BasisModule()
        targets = {"phi": models.phi, "psi": models.psi, "basis": basis, "generator": models.generator, "discriminator": models.discriminator}
        for name, module in targets.items():
            path = d / cls.FILES[name]
            if path.exists():
                checkpoint.load_module(path, module)
            elif name in require:
                raise PipelineError("load_models", None, FileNotFoundError(f"missing checkpoint {path}"))
        models.basis = basis.basis
        return models, config


# ---------------------------------------------------------------------------
# reference analysis and per-frame conditioning


def reference_indices(tau: int, K: int) -> np.ndarray:
    """K evenly spaced, distinct frame indices inside the reference span."""
    if K > tau:
        raise geometry.GeometryError(f"K={K} references need at least K frames, got {tau}")
    return np.unique(np.linspace(0, tau - 1, K).round().astype(int))


def chw(image) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1))


@dataclass
class ReferenceSetup:
    frames: np.ndarray  # (τ, H, W, 3)
    landmarks: np.ndarray  # (τ, 68, 3)
    motion: geometry.MotionSequence
    aligned: np.ndarray  # (τ, 68, 3)
    t_M: int
    mesh: render.TexturedMesh
    ref_index: np.ndarray  # (K,)
    ref_images: np.ndarray  # (K, 3, H, W)
    ref_lmk_images: np.ndarray  # (K, 1, H, W)
    camera: render.Camera
    timing: dict = field(default_factory=dict)

    @property
    def ref_motion(self) -> np.ndarray:
        h = self.motion.to_array()
        return h[self.ref_index]


def _stage(name, timing, fn, frame=None):
    t0 = time.perf_counter()
    try:
        out = fn()
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, frame, exc) from exc
    timing[name] = timing.get(name, 0.0) + time.perf_counter() - t0
    return out


def prepare_reference(config: PipelineConfig, frames, landmarks) -> ReferenceSetup:
    """Disentangle the reference span, pick the most frontal frame and lift it to a textured mesh."""
    frames = np.asarray(frames, dtype=np.float64)[: config.tau]
    landmarks = np.asarray(landmarks, dtype=np.float64)[: config.tau]
    if len(frames) < config.tau or len(landmarks) < config.tau:
        raise PipelineError("disentangle", None, ValueError(f"need {config.tau} reference frames, got {min(len(frames), len(landmarks))}"))
    if frames.shape[1:3] != (config.image_size, config.image_size):
        raise PipelineError("disentangle", None, ValueError(f"frames are {frames.shape[1:3]}, config expects {config.image_size}"))
    timing: dict = {}
    motion, aligned = _stage("disentangle", timing, lambda: geometry.disentangle(landmarks))
    t_M = _stage("select_reference", timing, lambda: geometry.select_reference_frame(motion))
    camera = render.Camera.for_size(config.image_size)
    mesh = _stage("unproject", timing, lambda: render.unproject(frames[t_M], landmarks[t_M], camera=camera), frame=t_M)
    idx = reference_indices(config.tau, config.K)
    ref_images = np.stack([chw(frames[i]) for i in idx])
    ref_lmks = np.stack([render_landmark_image(landmarks[i], camera=camera)[None] for i in idx])
    return ReferenceSetup(frames, landmarks, motion, np.asarray(aligned), t_M, mesh, idx, ref_images, ref_lmks, camera, timing)


def frame_inputs(setup: ReferenceSetup, pose: geometry.RigidTransform, aligned_landmarks, target=None, exclude_frame: int | None = None) -> tuple[GeneratorSample, int]:
    """Conditioning for one output frame; identical for training and generation.

    Returns the sample and the reference frame chosen by the motion matcher.
    ``exclude_frame`` keeps a training target from matching itself.
    """
    cam = setup.camera
    pose_M = setup.motion.poses[setup.t_M]
    query = render_landmark_image(aligned_landmarks, pose=pose, camera=cam)

    image, sil = render.soft_rasterize(render.pose_mesh(setup.mesh, pose_M, pose), cam)
    projected, proj_att = warp(image.data, np.zeros(image.shape[:2] + (2,)), sil.data)

    candidates = [k for k, i in enumerate(setup.ref_index) if i != exclude_frame] or list(range(len(setup.ref_index)))
    k, _ = geometry.match_motion(pose, setup.ref_motion[candidates])
    m = int(setup.ref_index[candidates[k]])
    pose_m = setup.motion.poses[m]
    flow = geometry.rigid_flow(render.pose_mesh(setup.mesh, pose_M, pose_m), pose_m, pose, cam)
    matched, match_att = warp(setup.frames[m], flow.flow, flow.visibility)

    H, W = cam.height, cam.width
    sample = GeneratorSample(
        references=setup.ref_images,
        reference_lmks=setup.ref_lmk_images,
        query_lmk=query[None],
        warped_projected=chw(projected),
        projected_attention=proj_att,
        warped_matched=chw(matched),
        matched_attention=match_att,
        target=np.zeros((3, H, W)) if target is None else chw(target),
    )
    return sample, m


def training_samples(config: PipelineConfig, frames, landmarks, setup: ReferenceSetup | None = None) -> list[GeneratorSample]:
    """Teacher-forced samples for every frame of a clip, using its own disentangled poses and expressions."""
    setup = setup or prepare_reference(config, frames, landmarks)
    motion, aligned = geometry.disentangle(landmarks)
    return [frame_inputs(setup, motion.poses[t], aligned[t], target=frames[t], exclude_frame=t)[0] for t in range(len(frames))]


# ---------------------------------------------------------------------------
# training drivers


def train_motion_model(config: PipelineConfig, clips, phi: PhiModel | None = None, epochs: int | None = None, log=None):
    """clips: iterable of (landmarks (T,68,3), AudioTrack); motion comes from disentanglement."""
    phi = phi or PhiModel(motion_config(config), stage_rng(config, "init_phi"))
    data = []
    for lmks, audio in clips:
        motion, _ = geometry.disentangle(lmks)
        spf = phi.config.samples_per_frame
        n = len(lmks)
        samples = np.zeros(n * spf)
        samples[: min(len(audio.samples), n * spf)] = audio.samples[: n * spf]
        data.append(MotionClip(motion.to_array(), samples))
    epochs = config.motion_epochs if epochs is None else epochs
    history = train_motion_learner(phi, data, epochs, stage_rng(config, "motion"), log=log)
    return phi, history


def expression_dataset(config: PipelineConfig, landmarks, audio: AudioTrack, basis: ex.ExpressionBasis):
    setup_motion, aligned = geometry.disentangle(landmarks[: config.tau])
    t_M = geometry.select_reference_frame(setup_motion)
    _, aligned_all = geometry.disentangle(landmarks)
    ref = ex.encode_expression(aligned[t_M], basis)
    n = len(landmarks)
    windows = ex.audio_windows(audio, range(n), config.fps)
    targets = ex.encode_expression(np.asarray(aligned_all), basis)
    return windows, np.tile(ref, (n, 1)), targets


def train_expression_model(config: PipelineConfig, clips, psi: ex.PsiModel | None = None, epochs: int | None = None, log=None):
    """Fit the PCA basis on every aligned frame, then Ψ on (window, reference coefficients) → coefficients."""
    clips = list(clips)
    aligned = [a for lmks, _ in clips for a in geometry.disentangle(lmks)[1]]
    basis = float32_basis(ex.fit_expression_basis(aligned))
    parts = [expression_dataset(config, lmks, audio, basis) for lmks, audio in clips]
    dataset = tuple(np.concatenate([p[i] for p in parts]) for i in range(3))
    psi = psi or ex.PsiModel(ex.window_length(config.sample_rate, config.fps), stage_rng(config, "init_psi"))
    epochs = config.expression_epochs if epochs is None else epochs
    history = ex.train_expression_learner(psi, dataset, epochs, stage_rng(config, "expression"), lr=1e-3, log=log)
    return psi, basis, history


def train_generator_model(config: PipelineConfig, samples, generator=None, discriminator=None, steps: int | None = None, log=None, checkpoint_dir=None):
    generator = generator or GeneratorModel(generator_config(config), stage_rng(config, "init_generator"))
    discriminator = discriminator or DiscriminatorModel(stage_rng(config, "init_discriminator"))
    tc = TrainConfig(
        steps=config.generator_steps if steps is None else steps,
        batch_size=config.generator_batch,
        lr=config.lr,
        weights=LossWeights(config.lambda_fm, config.lambda_pct, config.lambda_w),
        save_every=config.save_every,
        checkpoint_dir=checkpoint_dir,
    )
    history = train_generator(generator, discriminator, samples, tc, stage_rng(config, "generator"), log=log)
    return generator, discriminator, history


def train_all(config: PipelineConfig, frames, landmarks, audio: AudioTrack, log=None) -> tuple[Models, dict]:
    """Train Φ, the basis with Ψ, and the generator on one clip."""
    timing = {}
    t0 = time.perf_counter()
    phi, h_phi = train_motion_model(config, [(landmarks, audio)])
    timing["motion"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    psi, basis, h_psi = train_expression_model(config, [(landmarks, audio)])
    timing["expression"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    samples = training_samples(config, frames, landmarks)
    timing["samples"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    gen, disc, h_gen = train_generator_model(config, samples, log=log)
    timing["generator"] = time.perf_counter() - t0
    return Models(phi, psi, basis, gen, disc), {"motion": h_phi, "expression": h_psi, "generator": h_gen, "timing": timing}


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerationResult:
    frames: np.ndarray  # (n, H, W, 3) in [−1, 1]
    motion: np.ndarray  # (n, 6) driving head motion
    coefficients: np.ndarray  # (n, 20) Ψ output
    aligned: np.ndarray  # (n, 68, 3) pose-free landmarks with identity
    landmarks: np.ndarray  # (n, 68, 3) posed landmarks
    matched: np.ndarray  # (n,) reference frame used for the motion match
    start_frame: int
    manifest: dict


def _full_audio(config: PipelineConfig, reference_audio: AudioTrack, driving_audio: AudioTrack) -> AudioTrack:
    for name, a in (("reference", reference_audio), ("driving", driving_audio)):
        if a.sample_rate != config.sample_rate:
            raise PipelineError("motion", None, ValueError(f"{name} audio is {a.sample_rate} Hz, config expects {config.sample_rate}"))
    n_ref = int(round(config.tau * config.sample_rate / config.fps))
    ref = np.zeros(n_ref)
    ref[: min(n_ref, len(reference_audio.samples))] = reference_audio.samples[:n_ref]
    return AudioTrack(np.concatenate([ref, driving_audio.samples]), config.sample_rate)


def generate_video(config: PipelineConfig, frames, landmarks, reference_audio: AudioTrack, driving_audio: AudioTrack, models: Models, out_dir=None, driving_motion=None, n_frames: int | None = None) -> GenerationResult:
    """Synthesize frames τ+1… from τ reference frames and the driving audio that follows them.

    ``driving_motion`` (n×6 or MotionSequence) replaces Φ's extrapolation,
    which separates head motion from expression for controllability runs.
    """
    if models.basis is None:
        raise PipelineError("expression", None, ValueError("models carry no expression basis"))
    setup = prepare_reference(config, frames, landmarks)
    timing = dict(setup.timing)
    audio = _full_audio(config, reference_audio, driving_audio)
    n = driving_audio.frames(config.fps) if n_frames is None else int(n_frames)
    if n <= 0:
        raise PipelineError("motion", None, ValueError("driving audio shorter than one frame"))

    def predict_motion():
        if driving_motion is not None:
            h = driving_motion.to_array() if isinstance(driving_motion, geometry.MotionSequence) else np.asarray(driving_motion, dtype=np.float64)
            if h.ndim != 2 or h.shape[1] != 6 or len(h) < n:
                raise ValueError(f"driving motion must be at least {n}×6, got {h.shape}")
            return h[:n]
        weights = encode_reference(models.phi, setup.motion, audio)
        return extrapolate(models.phi, weights, audio, n_frames=n, start_frame=config.tau).to_array()

    h_hat = _stage("motion", timing, predict_motion)

    def predict_expression():
        windows = ex.audio_windows(audio, range(config.tau, config.tau + n), config.fps)
        ref = ex.encode_expression(setup.aligned[setup.t_M], models.basis)
        coeffs = ex.predict_expression(models.psi, windows, np.tile(ref, (n, 1))).astype(np.float64)
        return coeffs, ex.add_identity(coeffs, setup.aligned[setup.t_M], models.basis)

    coeffs, aligned = _stage("expression", timing, predict_expression)

    H = config.image_size
    out = np.zeros((n, H, H, 3))
    posed = np.zeros((n, geometry.N_LANDMARKS, 3))
    matched = np.zeros(n, dtype=int)
    for t in range(n):

        def one_frame(t=t):
            pose = geometry.RigidTransform.from_vector(h_hat[t])
            sample, m = frame_inputs(setup, pose, aligned[t])
            with T.no_grad():
                y = run_generator(models.generator, batch_inputs([sample], [0]))
            return y.data[0].transpose(1, 2, 0).astype(np.float64), pose.inverse().apply(aligned[t]), m

        out[t], posed[t], matched[t] = _stage("frames", timing, one_frame, frame=config.tau + t)

    manifest = {
        "config_hash": config.digest(),
        "config": config.to_dict(),
        "checkpoints": models.hashes(),
        "start_frame": config.tau,
        "n_frames": n,
        "reference_frame": setup.t_M,
        "references": [int(i) for i in setup.ref_index],
        "driving_motion": "override" if driving_motion is not None else "phi",
    }
    result = GenerationResult(out, h_hat, coeffs, aligned, posed, matched, config.tau, manifest)
    if out_dir is not None:
        _stage("write", timing, lambda: write_outputs(out_dir, result, config))
    manifest["timing"] = {k: round(v, 6) for k, v in timing.items()}
    if out_dir is not None:
        (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return result


def write_outputs(out_dir, result: GenerationResult, config: PipelineConfig) -> None:
    d = Path(out_dir)
    files = save_frames(d, result.frames)
    geometry.save_motion_csv(d / "motion.csv", geometry.MotionSequence.from_array(result.motion, config.fps))
    geometry.save_landmarks_json(d / "landmarks.json", result.landmarks, config.fps)
    write_coefficients_csv(d / "expression.csv", result.coefficients)
    result.manifest["files"] = files + ["motion.csv", "landmarks.json", "expression.csv"]


def write_coefficients_csv(path, coeffs) -> None:
    c = np.asarray(coeffs, dtype=np.float64)
    lines = [",".join(f"p{i}" for i in range(c.shape[1]))]
    lines += [",".join(repr(float(x)) for x in row) for row in c]
    Path(path).write_text("\n".join(lines) + "\n")


def write_training_log(path, records, key: str = "step") -> None:
    """Long-format CSV: one (step, term, value) row per logged loss term."""
    lines = ["step,term,value"]
    for r in records:
        for term, value in r.items():
            if term != key:
                lines.append(f"{r[key]},{term},{float(value)!r}")
    Path(path).write_text("\n".join(lines) + "\n")
