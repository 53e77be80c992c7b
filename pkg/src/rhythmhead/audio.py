"""Mono PCM-16 audio tracks and WAV I/O (stdlib ``wave``)."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

DEFAULT_SAMPLE_RATE = 50000


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class AudioTrack:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError("sample rate must be positive")
        if not np.isfinite(s).all():
            raise AudioError("audio contains non-finite samples")
        object.__setattr__(self, "samples", np.clip(s, -1.0, 1.0))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def frames(self, fps: float) -> int:
        """Number of whole video frames the track covers."""
        return int(np.floor(len(self.samples) * fps / self.sample_rate + 1e-9))


def write_wav(path, track: AudioTrack) -> None:
    pcm = np.clip(np.rint(track.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(track.sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path) -> AudioTrack:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise AudioError(f"{path}: only 16-bit PCM is supported")
        n_ch, rate = w.getnchannels(), w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").astype(np.float64)
    if n_ch > 1:
        data = data.reshape(-1, n_ch).mean(1)
    return AudioTrack(data / 32767.0, rate)


def colored_noise(n: int, rng: np.random.Generator, exponent: float = 1.0) -> np.ndarray:
    """1/f^exponent noise normalized to unit peak."""
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n)
    f[0] = f[1]
    x = np.fft.irfft(spec / f ** (exponent / 2.0), n)
    x -= x.mean()
    return x / np.abs(x).max()


@lru_cache(maxsize=1)
def _bundled_noise() -> AudioTrack:
    with resources.as_file(resources.files("rhythmhead.data").joinpath("noise.wav")) as path:
        return read_wav(path)


def load_noise() -> AudioTrack:
    """The bundled seeded pink-noise clip used for augmentation."""
    return _bundled_noise()
