"""Audio containers and PCM16 WAV input/output.

Only mono 16-bit PCM at the configured sample rate is accepted; there is
deliberately no resampling or stereo downmix.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PCM16_SCALE = 32768.0


@dataclass
class AudioSegment:
    """A single-channel utterance held as float64 samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"audio '{self.id}': expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"audio '{self.id}': sample_rate must be positive, got {self.sample_rate}")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


def read_wav(path, expected_rate: int = 8000, id: str | None = None) -> AudioSegment:
    """Read a mono PCM16 WAV file. A sample-rate mismatch is an error."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise DataError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM, got sample width {wf.getsampwidth()}")
        rate = wf.getframerate()
        if expected_rate is not None and rate != expected_rate:
            raise DataError(f"{path}: sample rate {rate} Hz does not match required {expected_rate} Hz")
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM16_SCALE
    utt_id = id if id is not None else _stem(path)
    return AudioSegment(samples=samples, sample_rate=rate, id=utt_id)


def write_wav(path, audio: AudioSegment) -> None:
    """Write an AudioSegment as mono PCM16."""
    clipped = np.clip(audio.samples, -1.0, 32767.0 / PCM16_SCALE)
    pcm = np.round(clipped * PCM16_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


def _stem(path) -> str:
    name = str(path).replace("\\", "/").rsplit("/", 1)[-1]
    return name.rsplit(".", 1)[0] if "." in name else name
