"""PCA expression space and the audio-to-expression learner Ψ."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .audio import AudioTrack, load_noise
from .geometry import N_LANDMARKS, as_landmarks
from .numeric import layers as L
from .numeric import tensor as T

N_COEFFS = 20
WINDOW_FRAMES = 7
SNR_CHOICES_DB = tuple(range(6, 31, 3))


class ExpressionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PCA basis


@dataclass(frozen=True)
class ExpressionBasis:
    mean: np.ndarray  # (204,)
    components: np.ndarray  # (20, 204), orthonormal rows
    explained_variance: np.ndarray  # (20,)

    def to_state(self) -> dict:
        return {"mean": self.mean, "components": self.components, "explained_variance": self.explained_variance}

    @classmethod
    def from_state(cls, state) -> "ExpressionBasis":
        return cls(np.asarray(state["mean"], np.float64), np.asarray(state["components"], np.float64), np.asarray(state["explained_variance"], np.float64))


def fit_expression_basis(aligned_frames, n_components: int = N_COEFFS) -> ExpressionBasis:
    X = np.stack([as_landmarks(f).reshape(-1) for f in aligned_frames])
    if len(X) < n_components + 1:
        raise ExpressionError(f"need at least {n_components + 1} frames to fit {n_components} components, got {len(X)}")
    mean = X.mean(0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = Vt[:n_components].copy()
    # sign convention: largest-magnitude entry positive
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(n_components), pivot])[:, None]
    var = s[:n_components] ** 2 / max(len(X) - 1, 1)
    return ExpressionBasis(mean, comps, var)


def encode_expression(frame, basis: ExpressionBasis) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    flat = x.reshape(*x.shape[:-2], -1) if x.shape[-2:] == (N_LANDMARKS, 3) else x
    return (flat - basis.mean) @ basis.components.T


def decode_expression(coeffs, basis: ExpressionBasis) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    return (basis.mean + c @ basis.components).reshape(*c.shape[:-1], N_LANDMARKS, 3)


def add_identity(predicted, reference_frame, basis: ExpressionBasis) -> np.ndarray:
    """Predicted expression plus the reference frame's off-basis (identity) residual."""
    ref = as_landmarks(reference_frame)
    residual = ref - decode_expression(encode_expression(ref, basis), basis)
    return decode_expression(predicted, basis) + residual


# ---------------------------------------------------------------------------
# audio windows and augmentation


def window_length(sample_rate: int, fps: float) -> int:
    return int(round(WINDOW_FRAMES * sample_rate / fps))


def audio_window(track: AudioTrack, frame_t: int, fps: float = 25.0) -> np.ndarray:
    """Samples covering frames t−3..t+3, zero-padded outside the track."""
    n = window_length(track.sample_rate, fps)
    start = int(round((frame_t - WINDOW_FRAMES // 2) * track.sample_rate / fps))
    out = np.zeros(n)
    lo, hi = max(start, 0), min(start + n, len(track.samples))
    if hi > lo:
        out[lo - start : hi - start] = track.samples[lo:hi]
    return out


def audio_windows(track: AudioTrack, frames, fps: float = 25.0) -> np.ndarray:
    return np.stack([audio_window(track, int(t), fps) for t in frames])


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def augment_with_noise(window, noise_source: AudioTrack | None = None, rng: np.random.Generator | None = None, return_snr: bool = False):
    """Mix in noise at an SNR drawn uniformly from {6, 9, …, 30} dB.

    The noise segment is scaled so the realized power ratio equals the draw.
    Silent windows come back unchanged with a RuntimeWarning.
    """
    rng = rng if rng is not None else np.random.default_rng()
    noise_source = noise_source or load_noise()
    w = np.asarray(window, dtype=np.float64)
    snr = float(SNR_CHOICES_DB[int(rng.integers(len(SNR_CHOICES_DB)))])
    ps = _power(w)
    if ps == 0.0:
        warnings.warn("augment_with_noise: silent window left unchanged", RuntimeWarning, stacklevel=2)
        return (w.copy(), None) if return_snr else w.copy()
    src = noise_source.samples
    if _power(src) == 0.0:
        raise ExpressionError("noise source is silent")
    if len(src) < len(w):
        src = np.tile(src, int(np.ceil(len(w) / len(src))) + 1)
    off = int(rng.integers(len(src) - len(w) + 1))
    seg = src[off : off + len(w)]
    pn = _power(seg)
    if pn == 0.0:
        seg, pn = src[: len(w)], _power(src[: len(w)])
    out = w + seg * np.sqrt(ps / (pn * 10.0 ** (snr / 10.0)))
    return (out, snr) if return_snr else out


def measured_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    return float(10.0 * np.log10(_power(clean) / _power(np.asarray(noisy, dtype=np.float64) - clean)))


# ---------------------------------------------------------------------------
# Ψ


class PsiModel(L.Module):
    """Audio window + reference coefficients → expression coefficients.

    Three stride-4 conv1d layers and a projection encode raw audio; two
    linear layers encode the reference; two linear layers decode the
    concatenation.  The last decoder layer starts at zero.
    """

    def __init__(self, window: int, rng: np.random.Generator | None = None, channels=(8, 16, 16), hidden: int = 64):
        rng = rng if rng is not None else nm.get_rng()
        self.window = int(window)
        c0, c1, c2 = channels
        self.audio_encoder = [
            L.conv1d(rng, 1, c0, k=8, stride=4, padding=2),
            L.conv1d(rng, c0, c1, k=8, stride=4, padding=2),
            L.conv1d(rng, c1, c2, k=8, stride=4, padding=2),
        ]
        n = self.window
        for _ in range(3):
            n = (n + 2 * 2 - 8) // 4 + 1
        self._conv_len = n
        self.audio_encoder.append(L.linear(rng, c2 * n, hidden))
        self.landmark_encoder = [L.linear(rng, N_COEFFS, hidden // 2), L.linear(rng, hidden // 2, hidden // 2)]
        self.decoder = [L.linear(rng, hidden + hidden // 2, hidden), L.linear(rng, hidden, N_COEFFS, zero=True)]

    def __call__(self, windows, reference_coeffs) -> T.Tensor:
        w = T.as_tensor(windows)
        if w.ndim == 1:
            w = w.reshape(1, -1)
        if w.shape[-1] != self.window:
            raise ExpressionError(f"audio window has {w.shape[-1]} samples, model expects {self.window}")
        r = T.as_tensor(reference_coeffs)
        if r.ndim == 1:
            r = r.reshape(1, -1)
        h = w.reshape(w.shape[0], 1, self.window)
        for layer in self.audio_encoder[:3]:
            h = T.leaky_relu(layer(h))
        h = T.leaky_relu(self.audio_encoder[3](h.reshape(h.shape[0], -1)))
        g = T.leaky_relu(self.landmark_encoder[0](r))
        g = T.leaky_relu(self.landmark_encoder[1](g))
        z = T.leaky_relu(self.decoder[0](T.concat([h, g], axis=1)))
        return self.decoder[1](z)


def predict_expression(model: PsiModel, window, reference_coeffs) -> np.ndarray:
    single = np.ndim(window) == 1
    with T.no_grad():
        out = model(window, reference_coeffs).data
    return out[0] if single else out


def train_expression_learner(
    model: PsiModel,
    dataset,
    epochs: int,
    rng: np.random.Generator,
    lr: float = 2e-4,
    augment: bool = True,
    noise_source: AudioTrack | None = None,
    batch_size: int = 64,
    log=None,
) -> list[float]:
    """Adam on coefficient MSE; each epoch re-noises every window. Returns per-epoch mean loss."""
    windows, refs, targets = (np.asarray(a, dtype=np.float64) for a in dataset)
    if len(windows) == 0:
        raise ExpressionError("empty training set")
    if not (len(windows) == len(refs) == len(targets)):
        raise ExpressionError("dataset arrays must have equal length")
    noise_source = noise_source or (load_noise() if augment else None)
    opt = nm.Adam(model.parameters(), lr=lr)
    history = []
    dtype = nm.get_default_dtype()
    for epoch in range(epochs):
        order = rng.permutation(len(windows))
        total = 0.0
        for b in range(0, len(order), batch_size):
            idx = order[b : b + batch_size]
            x = windows[idx]
            if augment:
                x = np.stack([augment_with_noise(w, noise_source, rng) for w in x])
            opt.zero_grad()
            try:
                pred = model(x.astype(dtype), refs[idx].astype(dtype))
                loss = T.mean(T.square(pred - targets[idx].astype(dtype)))
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite expression loss at epoch {epoch}, batch {b // batch_size}: {exc}") from exc
            value = float(loss.item())
            T.backward(loss)
            opt.step()
            total += value * len(idx)
        history.append(total / len(windows))
        if log is not None:
            log(epoch, history[-1])
    return history
