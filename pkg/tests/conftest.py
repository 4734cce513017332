import numpy as np
import pytest

from ivpipe.audio import AudioSegment


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_tone(freq_hz: float, duration: float = 1.0, rate: int = 8000,
              amplitude: float = 0.5, utt_id: str = "tone") -> AudioSegment:
    t = np.arange(int(duration * rate)) / rate
    return AudioSegment(amplitude * np.sin(2 * np.pi * freq_hz * t), rate, utt_id)


def make_noise(duration: float = 1.0, rate: int = 8000, seed: int = 0,
               amplitude: float = 0.3, utt_id: str = "noise") -> AudioSegment:
    gen = np.random.default_rng(seed)
    return AudioSegment(amplitude * gen.standard_normal(int(duration * rate)), rate, utt_id)


def subspace_angles_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles between the column spans of a and b, in degrees."""
    qa, _ = np.linalg.qr(np.asarray(a, dtype=np.float64))
    qb, _ = np.linalg.qr(np.asarray(b, dtype=np.float64))
    sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.degrees(np.arccos(np.clip(sv, -1.0, 1.0)))
