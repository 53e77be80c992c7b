"""Head-motion learner Φ: hypernetwork encoder, audio extrapolator, moment discriminator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .audio import AudioTrack
from .geometry import MotionSequence
from .numeric import layers as L
from .numeric import tensor as T

FEATURE_DIM = 256
POSE_DIM = 6
WINDOW_FRAMES = 7


class MotionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MotionConfig:
    tau: int = 64
    fps: float = 25.0
    sample_rate: int = 50000
    conv1: tuple = (4, 25)  # (channels, time kernel = stride)
    conv2: tuple = (8, 8)
    hidden: int = 64
    feature_dim: int = FEATURE_DIM

    @property
    def samples_per_frame(self) -> int:
        spf = self.sample_rate / self.fps
        if abs(spf - round(spf)) > 1e-9:
            raise MotionError(f"sample_rate/fps = {spf} must be an integer")
        return int(round(spf))

    @property
    def frame_kernel(self) -> int:
        """Temporal conv1d kernel: positions per frame after the two strided 2D convs."""
        k, rem = divmod(self.samples_per_frame, self.conv1[1] * self.conv2[1])
        if rem or k == 0:
            raise MotionError("samples per frame must be a multiple of the two conv strides")
        return k


@dataclass
class HyperWeights:
    """Per-sample linear head ĥ = W·feature + b produced by the reference encoder."""

    W: T.Tensor  # (B, 6, F)
    b: T.Tensor  # (B, 6)

    def numpy(self):
        return self.W.data, self.b.data


def stack_audio(samples: np.ndarray, samples_per_frame: int, start_frame: int, n_frames: int) -> np.ndarray:
    """7-row matrix; row k holds the audio of frames start+k−3 … start+n+k−4 (zero outside)."""
    samples = np.asarray(samples, dtype=np.float64)
    L_ = n_frames * samples_per_frame
    out = np.zeros((WINDOW_FRAMES, L_))
    for k in range(WINDOW_FRAMES):
        s0 = (start_frame + k - WINDOW_FRAMES // 2) * samples_per_frame
        lo, hi = max(s0, 0), min(s0 + L_, len(samples))
        if hi > lo:
            out[k, lo - s0 : hi - s0] = samples[lo:hi]
    return out


def wrap_axis_angle(r: np.ndarray) -> np.ndarray:
    """Same rotation with angle in [0, π] (axis flipped when needed)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    axis = r / safe
    wrapped = np.mod(theta, 2 * np.pi)
    flip = wrapped > np.pi
    wrapped = np.where(flip, 2 * np.pi - wrapped, wrapped)
    return np.where(theta > 0, np.where(flip, -axis, axis) * wrapped, r)


class PhiModel(L.Module):
    def __init__(self, config: MotionConfig | None = None, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else nm.get_rng()
        self.config = cfg = config or MotionConfig()
        c1, k1 = cfg.conv1
        c2, k2 = cfg.conv2
        kf = cfg.frame_kernel
        F = cfg.feature_dim
        h = cfg.hidden
        self.audio_encoder = [
            L.conv2d(rng, 1, c1, k=(3, k1), stride=(1, k1), padding=0),
            L.conv2d(rng, c1, c2, k=(3, k2), stride=(1, k2), padding=0),
            L.conv1d(rng, 3 * c2, F, k=kf, stride=kf, padding=0),
        ]
        self.reference_encoder = [
            L.conv1d(rng, F + POSE_DIM, h, k=4, stride=2, padding=1),
            L.conv1d(rng, h, h, k=4, stride=2, padding=1),
            L.linear(rng, h, h),
            L.linear(rng, h, POSE_DIM * F + POSE_DIM, zero=True),
        ]
        self.discriminator = [L.linear(rng, 2 * POSE_DIM, 32), L.linear(rng, 32, 1)]

    def generator_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("discriminator")]

    def discriminator_parameters(self):
        return [p for name, p in self.named_parameters() if name.startswith("discriminator")]


def audio_features(model: PhiModel, stacked) -> T.Tensor:
    """(B, 7, n·spf) stacked audio → (B, F, n) per-frame features."""
    x = T.as_tensor(stacked)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    B, rows, Lx = x.shape
    if rows != WINDOW_FRAMES or Lx % model.config.samples_per_frame:
        raise MotionError(f"stacked audio must be (B, 7, n·{model.config.samples_per_frame}), got {x.shape}")
    h = T.leaky_relu(model.audio_encoder[0](x.reshape(B, 1, rows, Lx)))
    h = T.leaky_relu(model.audio_encoder[1](h))
    h = h.reshape(B, h.shape[1] * h.shape[2], h.shape[3])
    return T.leaky_relu(model.audio_encoder[2](h))


def _motion_tensor(motion) -> T.Tensor:
    if isinstance(motion, MotionSequence):
        return T.Tensor(motion.to_array()[None].astype(nm.get_default_dtype()))
    m = T.as_tensor(motion)
    return m.reshape(1, *m.shape) if m.ndim == 2 else m


def _stacked_for(model: PhiModel, audio, n_frames: int, start_frame: int = 0):
    if isinstance(audio, AudioTrack):
        if audio.sample_rate != model.config.sample_rate:
            raise MotionError(f"audio rate {audio.sample_rate} != model rate {model.config.sample_rate}")
        return stack_audio(audio.samples, model.config.samples_per_frame, start_frame, n_frames)[None].astype(nm.get_default_dtype())
    return audio


def encode_reference(model: PhiModel, motion, audio, start_frame: int = 0) -> HyperWeights:
    """Reference clip (h_{1:τ}, x_{1:τ}) → per-sample head weights {W, b}."""
    h = _motion_tensor(motion)
    B, tau, d = h.shape
    if d != POSE_DIM:
        raise MotionError(f"motion must have {POSE_DIM} columns, got {d}")
    feats = audio_features(model, _stacked_for(model, audio, tau, start_frame))
    if feats.shape[0] != B or feats.shape[2] != tau:
        raise MotionError(f"reference audio covers {feats.shape[2]} frames for {tau} motion frames")
    z = T.concat([feats, T.transpose(h, (0, 2, 1))], axis=1)
    z = T.leaky_relu(model.reference_encoder[0](z))
    z = T.leaky_relu(model.reference_encoder[1](z))
    z = T.mean(z, axis=2)
    z = T.leaky_relu(model.reference_encoder[2](z))
    out = model.reference_encoder[3](z)
    F = model.config.feature_dim
    return HyperWeights(out[:, : POSE_DIM * F].reshape(B, POSE_DIM, F), out[:, POSE_DIM * F :])


def extrapolate_tensor(model: PhiModel, weights: HyperWeights, stacked) -> T.Tensor:
    feats = audio_features(model, stacked)  # (B, F, n)
    W, b = weights.W, weights.b
    if W.ndim != 3 or W.shape[1:] != (POSE_DIM, feats.shape[1]) or b.shape != (W.shape[0], POSE_DIM):
        raise MotionError(f"hyper-weights {W.shape}/{b.shape} do not fit features {feats.shape}")
    if W.shape[0] != feats.shape[0]:
        raise MotionError(f"hyper-weight batch {W.shape[0]} vs audio batch {feats.shape[0]}")
    return T.transpose(feats, (0, 2, 1)) @ T.transpose(W, (0, 2, 1)) + b.reshape(b.shape[0], 1, POSE_DIM)


def extrapolate(model: PhiModel, weights: HyperWeights, audio, n_frames: int | None = None, start_frame: int = 0) -> MotionSequence:
    """ĥ_{τ+1:T} for one sample as a MotionSequence.

    ``audio`` is an AudioTrack (frames counted from ``start_frame``) or a
    pre-stacked (7, n·spf) matrix.
    """
    if isinstance(audio, AudioTrack):
        n_frames = audio.frames(model.config.fps) - start_frame if n_frames is None else n_frames
        stacked = _stacked_for(model, audio, n_frames, start_frame)
    else:
        stacked = np.asarray(audio)[None] if np.ndim(audio) == 2 else np.asarray(audio)
    with T.no_grad():
        h = extrapolate_tensor(model, weights, stacked).data[0].astype(np.float64)
    h[:, :3] = wrap_axis_angle(h[:, :3])
    return MotionSequence.from_array(h, model.config.fps)


def moments(motion: T.Tensor, eps: float = 1e-8) -> T.Tensor:
    """(B, n, 6) → (B, 12) per-dimension mean and std, computed from time-sorted values.

    Sorting fixes the summation order, so the result is bit-identical under any
    frame permutation; a constant sequence has std exactly 0.
    """
    x = T.sort(_motion_tensor(motion), axis=1)
    if x.shape[1] < 2:
        raise MotionError("moments need at least 2 frames")
    x0 = x[:, :1, :]
    mean = x0 + T.mean(x - x0, axis=1, keepdims=True)
    var = T.mean(T.square(x - mean), axis=1)
    std = T.sqrt(var + eps) - float(np.sqrt(eps))
    return T.concat([mean.reshape(mean.shape[0], POSE_DIM), std], axis=1)


def discriminator_tensor(model: PhiModel, motion) -> T.Tensor:
    z = T.leaky_relu(model.discriminator[0](moments(motion)))
    return model.discriminator[1](z).reshape(-1)


def discriminator_score(model: PhiModel, motion) -> float | np.ndarray:
    with T.no_grad():
        s = discriminator_tensor(model, motion).data
    return float(s[0]) if s.size == 1 else s


# ---------------------------------------------------------------------------
# training


@dataclass
class MotionClip:
    motion: np.ndarray  # (T, 6)
    audio: np.ndarray  # (T·spf,)
    subject: int = 0
    frequency: float = 0.0
    phase: float = 0.0


def prepare_batch(clips, config: MotionConfig):
    """Stack reference/target audio with full-clip context and split motions at τ."""
    spf, tau = config.samples_per_frame, config.tau
    dtype = nm.get_default_dtype()
    refs, tgts, h_ref, h_tgt = [], [], [], []
    for c in clips:
        n = len(c.motion)
        if n <= tau:
            raise MotionError(f"clip has {n} frames; need more than tau={tau}")
        refs.append(stack_audio(c.audio, spf, 0, tau))
        tgts.append(stack_audio(c.audio, spf, tau, n - tau))
        h_ref.append(c.motion[:tau])
        h_tgt.append(c.motion[tau:])
    return (np.stack(refs).astype(dtype), np.stack(h_ref).astype(dtype), np.stack(tgts).astype(dtype), np.stack(h_tgt).astype(dtype))


def train_motion_learner(
    model: PhiModel,
    clips,
    epochs: int,
    rng: np.random.Generator,
    adv_weight: float = 0.01,
    lr: float = 2e-4,
    batch_size: int = 4,
    jitter_negatives: bool = True,
    log=None,
) -> list[dict]:
    """Alternate generator (MSE + adv_weight·LSGAN) and discriminator (LSGAN) Adam steps.

    With ``jitter_negatives`` the discriminator also sees noise-corrupted real
    motion as fake, so it learns to reject moments outside the data range and
    not only the generator's current outputs.
    """
    clips = list(clips)
    if not clips:
        raise MotionError("empty motion dataset")
    lengths = {len(c.motion) for c in clips}
    if len(lengths) != 1:
        raise MotionError("all clips in a dataset must have the same length")
    a_ref, h_ref, a_tgt, h_tgt = prepare_batch(clips, model.config)
    g_opt = nm.Adam(model.generator_parameters(), lr=lr)
    d_opt = nm.Adam(model.discriminator_parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(clips))
        sums = {"mse": 0.0, "g_adv": 0.0, "d_loss": 0.0}
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            try:
                model.zero_grad()
                w = encode_reference(model, h_ref[idx], a_ref[idx])
                pred = extrapolate_tensor(model, w, a_tgt[idx])
                mse = T.mean(T.square(pred - h_tgt[idx]))
                g_adv = T.mean(T.square(discriminator_tensor(model, pred) - 1.0))
                loss = mse + g_adv * adv_weight if adv_weight else mse
                T.backward(loss)
                g_opt.step()

                model.zero_grad()
                real = h_tgt[idx]
                fake = pred.data
                if jitter_negatives:
                    # real motion plus white noise at log-uniform scale counts as fake
                    scale = np.exp(rng.uniform(np.log(0.02), 0.0, size=(len(idx), 1, 1)))
                    fake = np.concatenate([fake, (real + scale * rng.normal(size=real.shape)).astype(real.dtype)])
                d_loss = T.mean(T.square(discriminator_tensor(model, real) - 1.0)) + T.mean(T.square(discriminator_tensor(model, fake)))
                T.backward(d_loss)
                d_opt.step()
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite motion loss at epoch {epoch}, batch {s // batch_size}: {exc}") from exc
            for key, val in (("mse", mse), ("g_adv", g_adv), ("d_loss", d_loss)):
                sums[key] += float(val.item()) * len(idx)
        record = {"epoch": epoch, **{k: v / len(clips) for k, v in sums.items()}}
        history.append(record)
        if log is not None:
            log(record)
    model.zero_grad()
    return history


def predict_clip(model: PhiModel, clip: MotionClip) -> np.ndarray:
    """Extrapolated (T−τ, 6) motion for a clip from its own first τ frames."""
    a_ref, h_ref, a_tgt, _ = prepare_batch([clip], model.config)
    with T.no_grad():
        return extrapolate_tensor(model, encode_reference(model, h_ref, a_ref), a_tgt).data[0].astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic corpus and analysis

# per-subject motion style: pose offset, gain of each dimension on the audio
# envelope, and a faint free-running yaw sway at a characteristic frequency
SUBJECT_STYLES = (
    {"offset": np.array([0.05, -0.04, 0.01, 0.02, -0.03, 0.0]), "gain": np.array([0.15, 0.05, 0.02, 0.01, 0.03, 0.01]), "sway": (0.6, 0.01)},
    {"offset": np.array([-0.06, 0.05, -0.02, -0.03, 0.02, 0.01]), "gain": np.array([0.08, -0.12, 0.03, -0.03, 0.01, -0.01]), "sway": (0.9, 0.01)},
)


def envelope(t: np.ndarray, frequency: float, phase: float) -> np.ndarray:
    return 0.5 + 0.5 * np.sin(2 * np.pi * frequency * t + phase)


def speech_audio(n_samples: int, rate: int, frequency: float, phase: float, rng: np.random.Generator, carrier: float = 440.0) -> np.ndarray:
    """Amplitude-modulated carrier standing in for speech; the envelope drives mouth and nod."""
    t = np.arange(n_samples) / rate
    tone = np.sin(2 * np.pi * carrier * t) + 0.3 * np.sin(2 * np.pi * 2.5 * carrier * t + 1.0)
    return 0.6 * envelope(t, frequency, phase) * tone / 1.3 + 0.002 * rng.normal(size=n_samples)


def synthetic_clip(subject: int, n_frames: int, config: MotionConfig, rng: np.random.Generator, frequency=None, phase=None) -> MotionClip:
    style = SUBJECT_STYLES[subject % len(SUBJECT_STYLES)]
    f = float(rng.uniform(1.5, 3.0) if frequency is None else frequency)
    ph = float(rng.uniform(0, 2 * np.pi) if phase is None else phase)
    t = np.arange(n_frames) / config.fps
    env = envelope(t, f, ph)
    motion = style["offset"] + np.outer(2.0 * env - 1.0, style["gain"])
    sway_f, sway_a = style["sway"]
    motion[:, 1] += sway_a * np.sin(2 * np.pi * sway_f * t + rng.uniform(0, 2 * np.pi))
    audio = speech_audio(n_frames * config.samples_per_frame, config.sample_rate, f, ph, rng)
    return MotionClip(motion, audio, subject, f, ph)


def synthetic_corpus(config: MotionConfig, rng: np.random.Generator, clips_per_subject: int = 6, n_frames: int | None = None, n_subjects: int = 2):
    n_frames = n_frames or 2 * config.tau
    return [synthetic_clip(s, n_frames, config, rng) for s in range(n_subjects) for _ in range(clips_per_subject)]


def estimate_frequency(signal, fps: float, fmin: float = 0.5, fmax: float = 6.0, n_grid: int = 2201) -> float:
    """Least-squares single-sinusoid fit over a frequency grid."""
    x = np.asarray(signal, dtype=np.float64)
    x = x - x.mean()
    t = np.arange(len(x)) / fps
    best, best_f = -np.inf, fmin
    for f in np.linspace(fmin, fmax, n_grid):
        A = np.stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t), np.ones_like(t)], 1)
        coef, *_ = np.linalg.lstsq(A, x, rcond=None)
        explained = float(x @ (A @ coef))
        if explained > best:
            best, best_f = explained, float(f)
    return best_f
