"""Cepstral front-end: framing, MFCC, PLP, filterbank features, ST-CMVN.

All extractors are deterministic for a fixed config (dither is disabled) and
operate on 8 kHz mono audio. MFCC defaults produce 60-dimensional frames
(20 static + 20 delta + 20 delta-delta); PLP defaults produce 39 dimensions
(13 + 13 + 13). Both can be narrowed for small experiments via their configs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .audio import AudioSegment
from .errors import DataError, TooShortError

WINDOW_FUNCTIONS = ("hamming", "hanning", "rectangular")


@dataclass
class FeatureMatrix:
    """Per-utterance T x D matrix of frames plus frame metadata.

    speech_duration is derived: frame_shift times the number of true mask
    entries when a mask is present, frame_shift times T otherwise.
    """

    frames: np.ndarray
    frame_shift: float
    speech_mask: np.ndarray | None = None
    id: str = ""
    speech_duration: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if not np.isfinite(self.frames).all():
            raise DataError(f"features '{self.id}': non-finite values in frame matrix")
        if self.frame_shift <= 0:
            raise DataError(f"features '{self.id}': frame_shift must be positive")
        if self.speech_mask is not None:
            self.speech_mask = np.asarray(self.speech_mask, dtype=bool)
            if self.speech_mask.shape != (self.num_frames,):
                raise DataError(
                    f"features '{self.id}': mask length {self.speech_mask.shape} "
                    f"does not match frame count {self.num_frames}"
                )
            self.speech_duration = self.frame_shift * int(self.speech_mask.sum())
        else:
            self.speech_duration = self.frame_shift * self.num_frames

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 8000
    frame_len: float = 0.025
    frame_shift: float = 0.010
    num_ceps: int = 20
    num_filters: int = 23
    low_freq: float = 20.0
    high_freq: float = 4000.0
    preemphasis: float = 0.97
    window: str = "hamming"
    energy_floor: float = 1e-10
    include_deltas: bool = True

    @property
    def dim(self) -> int:
        return self.num_ceps * (3 if self.include_deltas else 1)


@dataclass(frozen=True)
class PlpConfig:
    sample_rate: int = 8000
    frame_len: float = 0.020
    frame_shift: float = 0.010
    num_ceps: int = 13
    lpc_order: int = 12
    low_freq: float = 0.0
    high_freq: float = 4000.0
    preemphasis: float = 0.97
    window: str = "hamming"
    energy_floor: float = 1e-10
    compress_power: float = 1.0 / 3.0
    include_deltas: bool = True

    @property
    def dim(self) -> int:
        return self.num_ceps * (3 if self.include_deltas else 1)


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 8000
    frame_len: float = 0.025
    frame_shift: float = 0.010
    num_filters: int = 40
    low_freq: float = 20.0
    high_freq: float = 4000.0
    preemphasis: float = 0.97
    window: str = "hamming"
    energy_floor: float = 1e-10


def frame_signal(audio: AudioSegment, frame_len: float, frame_shift: float,
                 window: str = "hamming") -> np.ndarray:
    """Slice audio into overlapping frames tapered by a window function.

    Frame count is floor((num_samples - frame_len*rate) / (frame_shift*rate)) + 1.
    """
    if frame_shift <= 0 or frame_len < frame_shift:
        raise DataError(f"invalid framing: frame_len={frame_len}, frame_shift={frame_shift}")
    flen = int(round(frame_len * audio.sample_rate))
    fshift = int(round(frame_shift * audio.sample_rate))
    n = audio.num_samples
    if n < flen:
        raise TooShortError(
            f"audio '{audio.id}' too short: {n} samples < one {flen}-sample frame"
        )
    count = (n - flen) // fshift + 1
    idx = np.arange(flen)[None, :] + fshift * np.arange(count)[:, None]
    frames = audio.samples[idx]
    return frames * _window(window, flen)


def _window(name: str, length: int) -> np.ndarray:
    if name == "hamming":
        return np.hamming(length)
    if name == "hanning":
        return np.hanning(length)
    if name == "rectangular":
        return np.ones(length)
    raise DataError(f"unknown window function '{name}'")


def _preemphasize(samples: np.ndarray, coeff: float) -> np.ndarray:
    # First sample is replicated so a constant signal stays constant.
    if coeff == 0.0:
        return samples
    return samples - coeff * np.concatenate(([samples[0]], samples[:-1]))


def _power_spectrum(frames: np.ndarray) -> np.ndarray:
    nfft = 1 << (frames.shape[1] - 1).bit_length()
    spec = np.fft.rfft(frames, nfft, axis=1)
    return (spec.real ** 2 + spec.imag ** 2), nfft


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters: int, nfft: int, sample_rate: int,
                   low_freq: float, high_freq: float) -> np.ndarray:
    """Triangular mel filters evaluated on FFT bin frequencies, (F, nfft//2+1)."""
    if not 0 <= low_freq < high_freq <= sample_rate / 2:
        raise DataError(f"bad filterbank band [{low_freq}, {high_freq}] at rate {sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq), num_filters + 2))
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    fb = np.zeros((num_filters, bins.shape[0]))
    for m in range(num_filters):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bins - lo) / (center - lo)
        falling = (hi - bins) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def hz_to_bark(hz):
    return 6.0 * np.arcsinh(np.asarray(hz, dtype=np.float64) / 600.0)


def bark_filterbank(nfft: int, sample_rate: int, low_freq: float,
                    high_freq: float) -> tuple[np.ndarray, np.ndarray]:
    """Critical-band filters on the bark axis with +/-10 and -25 dB/bark skirts.

    Returns (weights with shape (B, nfft//2+1), band center frequencies in Hz).
    """
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    bin_bark = hz_to_bark(bins)
    min_bark = float(hz_to_bark(low_freq))
    max_bark = float(hz_to_bark(high_freq))
    num_bands = int(math.ceil(max_bark - min_bark)) + 1
    centers_bark = min_bark + np.arange(num_bands)
    fb = np.zeros((num_bands, bins.shape[0]))
    for b, z in enumerate(centers_bark):
        lof = bin_bark - z - 0.5
        hif = bin_bark - z + 0.5
        fb[b] = 10.0 ** np.minimum(0.0, np.minimum(hif, -2.5 * lof))
    centers_hz = 600.0 * np.sinh(centers_bark / 6.0)
    return fb, centers_hz


def equal_loudness_weights(freqs_hz: np.ndarray) -> np.ndarray:
    """Equal-loudness preemphasis curve evaluated at the given frequencies."""
    w2 = (2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64)) ** 2
    numerator = (w2 + 56.8e6) * w2 ** 2
    denominator = (w2 + 6.3e6) ** 2 * (w2 + 0.38e9)
    out = np.where(denominator > 0, numerator / np.where(denominator > 0, denominator, 1.0), 0.0)
    return out


def compute_deltas(static: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas over +/-window frames with edge replication."""
    t = static.shape[0]
    padded = np.concatenate(
        [np.repeat(static[:1], window, axis=0), static, np.repeat(static[-1:], window, axis=0)]
    )
    denom = 2.0 * sum(j * j for j in range(1, window + 1))
    delta = np.zeros_like(static)
    for j in range(1, window + 1):
        delta += j * (padded[window + j : window + j + t] - padded[window - j : window - j + t])
    return delta / denom


def _append_deltas(static: np.ndarray) -> np.ndarray:
    d1 = compute_deltas(static)
    d2 = compute_deltas(d1)
    return np.concatenate([static, d1, d2], axis=1)


def extract_mfcc(audio: AudioSegment, config: MfccConfig = MfccConfig()) -> FeatureMatrix:
    """Mel-cepstral features: preemphasis, framing, FFT, mel filterbank,
    floored log, orthonormal DCT-II, optional delta and delta-delta blocks."""
    emphasized = AudioSegment(
        _preemphasize(audio.samples, config.preemphasis), audio.sample_rate, audio.id
    )
    frames = frame_signal(emphasized, config.frame_len, config.frame_shift, config.window)
    power, nfft = _power_spectrum(frames)
    fb = mel_filterbank(config.num_filters, nfft, config.sample_rate,
                        config.low_freq, config.high_freq)
    energies = power @ fb.T
    log_energies = np.log(np.maximum(energies, config.energy_floor))
    ceps = scipy.fft.dct(log_energies, type=2, norm="ortho", axis=1)[:, : config.num_ceps]
    out = _append_deltas(ceps) if config.include_deltas else ceps
    return FeatureMatrix(out, config.frame_shift, id=audio.id)


def extract_fbank(audio: AudioSegment, config: FbankConfig = FbankConfig()) -> FeatureMatrix:
    """Log mel filterbank energies (the SAD input representation)."""
    emphasized = AudioSegment(
        _preemphasize(audio.samples, config.preemphasis), audio.sample_rate, audio.id
    )
    frames = frame_signal(emphasized, config.frame_len, config.frame_shift, config.window)
    power, nfft = _power_spectrum(frames)
    fb = mel_filterbank(config.num_filters, nfft, config.sample_rate,
                        config.low_freq, config.high_freq)
    log_energies = np.log(np.maximum(power @ fb.T, config.energy_floor))
    return FeatureMatrix(log_energies, config.frame_shift, id=audio.id)


def extract_plp(audio: AudioSegment, config: PlpConfig = PlpConfig()) -> FeatureMatrix:
    """Perceptual linear prediction cepstra.

    Chain: critical-band (bark) analysis, equal-loudness weighting,
    intensity-to-loudness compression, all-pole modelling via Levinson-Durbin,
    cepstral recursion, optional deltas.
    """
    emphasized = AudioSegment(
        _preemphasize(audio.samples, config.preemphasis), audio.sample_rate, audio.id
    )
    frames = frame_signal(emphasized, config.frame_len, config.frame_shift, config.window)
    power, nfft = _power_spectrum(frames)
    fb, centers_hz = bark_filterbank(nfft, config.sample_rate, config.low_freq, config.high_freq)
    bands = power @ fb.T
    bands = bands * equal_loudness_weights(centers_hz)[None, :]
    loudness = np.maximum(bands, config.energy_floor) ** config.compress_power
    # Duplicate edge bands before the inverse transform, as is conventional.
    padded = np.concatenate([loudness[:, :1], loudness, loudness[:, -1:]], axis=1)
    autocorr = _spectrum_to_autocorr(padded, config.lpc_order)
    lpc, err = _levinson_batch(autocorr, config.lpc_order)
    ceps = _lpc_to_cepstra(lpc, err, config.num_ceps)
    out = _append_deltas(ceps) if config.include_deltas else ceps
    return FeatureMatrix(out, config.frame_shift, id=audio.id)


def _spectrum_to_autocorr(band_spectrum: np.ndarray, order: int) -> np.ndarray:
    """Autocorrelation from a sampled power spectrum via an even inverse DFT."""
    j = band_spectrum.shape[1]
    extended = np.concatenate([band_spectrum, band_spectrum[:, -2:0:-1]], axis=1)
    autocorr = np.fft.ifft(extended, axis=1).real
    return autocorr[:, : order + 1] / (2 * (j - 1))


def _levinson_batch(r: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Levinson-Durbin over a batch of autocorrelation rows.

    Returns (a, err) where a has shape (T, order+1) with a[:, 0] = 1 and err
    is the final prediction error variance per row.
    """
    t = r.shape[0]
    a = np.zeros((t, order + 1))
    a[:, 0] = 1.0
    err = np.maximum(r[:, 0].copy(), 1e-30)
    for m in range(1, order + 1):
        acc = r[:, m].copy()
        for k in range(1, m):
            acc += a[:, k] * r[:, m - k]
        reflect = -acc / err
        prev = a[:, 1:m].copy()
        a[:, 1:m] = prev + reflect[:, None] * prev[:, ::-1]
        a[:, m] = reflect
        err = err * (1.0 - reflect ** 2)
        err = np.maximum(err, 1e-30)
    return a, err


def _lpc_to_cepstra(a: np.ndarray, err: np.ndarray, num_ceps: int) -> np.ndarray:
    """Cepstra of the all-pole model err / |A|^2; c0 carries the log gain."""
    t, cols = a.shape
    order = cols - 1
    ceps = np.zeros((t, num_ceps))
    ceps[:, 0] = np.log(err)
    for n in range(1, num_ceps):
        acc = -a[:, n] if n <= order else np.zeros(t)
        for k in range(1, n):
            if n - k <= order:
                acc = acc - (k / n) * ceps[:, k] * a[:, n - k]
        ceps[:, n] = acc
    return ceps


def sliding_window_moments(frames: np.ndarray, half_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame mean and variance over a centered window truncated at edges."""
    t = frames.shape[0]
    cumsum = np.concatenate([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    cumsq = np.concatenate([np.zeros((1, frames.shape[1])), np.cumsum(frames ** 2, axis=0)])
    lo = np.maximum(np.arange(t) - half_width, 0)
    hi = np.minimum(np.arange(t) + half_width + 1, t)
    counts = (hi - lo)[:, None].astype(np.float64)
    mean = (cumsum[hi] - cumsum[lo]) / counts
    var = (cumsq[hi] - cumsq[lo]) / counts - mean ** 2
    return mean, np.maximum(var, 0.0)


def st_cmvn(feats: FeatureMatrix, window: float = 3.0, variance_floor: float = 1e-10) -> FeatureMatrix:
    """Short-term cepstral mean and variance normalization.

    Each frame is normalized by the mean and standard deviation of a window
    of the given length (seconds) centered on it, truncated at the utterance
    edges. Zero-variance dimensions are floored, never divided by zero.
    """
    if window <= 0:
        raise DataError(f"st_cmvn window must be positive, got {window}")
    half = max(int(round(window / feats.frame_shift)) // 2, 0)
    mean, var = sliding_window_moments(feats.frames, half)
    std = np.sqrt(np.maximum(var, variance_floor))
    return FeatureMatrix((feats.frames - mean) / std, feats.frame_shift,
                         speech_mask=feats.speech_mask, id=feats.id)
