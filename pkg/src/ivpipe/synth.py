"""Synthetic verification corpora: speaker-specific filtered noise.

Each speaker is a set of resonator (formant-like) frequencies and bandwidths;
each language adds a spectral tilt and a fixed offset to those frequencies,
and languages are split between an out-domain group (labelled training data)
and an in-domain group (unlabelled dev plus evaluation trials). Utterances
alternate speech bursts with near-silent gaps, giving ground-truth speech
regions. Everything derives from one seed, so corpora are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import AudioSegment, write_wav
from .errors import ConfigError, DataError

BASE_FORMANTS = np.array([450.0, 1150.0, 2150.0, 3100.0])
BASE_BANDWIDTHS = np.array([90.0, 130.0, 180.0, 220.0])


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    domain: str                      # "in" or "out"
    tilt: float                      # first-order spectral tilt coefficient
    formant_offset_hz: tuple = (0.0, 0.0, 0.0, 0.0)


def default_languages() -> list[LanguageSpec]:
    return [
        LanguageSpec("lang-out-a", "out", -0.25, (40.0, -60.0, 50.0, 0.0)),
        LanguageSpec("lang-out-b", "out", 0.10, (-50.0, 40.0, -30.0, 60.0)),
        LanguageSpec("lang-in-a", "in", 0.45, (90.0, 120.0, -110.0, -80.0)),
        LanguageSpec("lang-in-b", "in", -0.50, (-120.0, -70.0, 130.0, 90.0)),
    ]


@dataclass
class SyntheticCorpusSpec:
    num_speakers: int = 50
    segments_per_speaker: int = 8
    languages: list[LanguageSpec] = field(default_factory=default_languages)
    speaker_scale: float = 1.0       # inter-speaker spread of resonator params
    channel_scale: float = 1.0       # per-utterance jitter and noise level
    duration_range: tuple = (12.0, 22.0)
    silence_ratio: float = 0.2
    sample_rate: int = 8000
    snr_db: float = 18.0
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ConfigError("corpus needs at least one speaker")
        if self.segments_per_speaker < 1:
            raise ConfigError("corpus needs at least one segment per speaker")
        if not self.languages:
            raise ConfigError("corpus needs at least one language")
        lo, hi = self.duration_range
        if not 9.0 <= lo <= hi <= 140.0:
            raise ConfigError(f"durations must lie within [9, 140] s, got {self.duration_range}")
        if self.speaker_scale < 0 or self.channel_scale < 0:
            raise ConfigError("variance scales must be non-negative")
        if not 0.0 <= self.silence_ratio < 0.9:
            raise ConfigError("silence_ratio must lie in [0, 0.9)")


@dataclass
class UtteranceInfo:
    utt_id: str
    path: str
    speaker_id: str
    language_id: str
    domain_tag: str
    duration: float
    speech_regions: list  # list of (start_sec, end_sec) speech intervals


@dataclass
class CorpusIndex:
    utterances: list
    spec_seed: int = 0

    def by_domain(self, domain: str) -> list:
        return [u for u in self.utterances if u.domain_tag == domain]

    def speakers(self, domain: str | None = None) -> list:
        pool = self.utterances if domain is None else self.by_domain(domain)
        return sorted({u.speaker_id for u in pool})


def _resonator_sos(freq: float, bandwidth: float, rate: int) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / rate)
    theta = 2.0 * np.pi * freq / rate
    b0 = (1.0 - r) * np.sqrt(1.0 - 2.0 * r * np.cos(2 * theta) + r * r)
    return np.array([[b0, 0.0, 0.0, 1.0, -2.0 * r * np.cos(theta), r * r]])


def _speaker_params(rng: np.random.Generator, spec: SyntheticCorpusSpec,
                    language: LanguageSpec) -> tuple[np.ndarray, np.ndarray]:
    spread = 0.12 * spec.speaker_scale
    freqs = BASE_FORMANTS * (1.0 + rng.normal(0.0, spread, size=4))
    freqs = freqs + np.asarray(language.formant_offset_hz)
    freqs = np.clip(freqs, 150.0, spec.sample_rate / 2 - 300.0)
    bws = BASE_BANDWIDTHS * (1.0 + rng.normal(0.0, 0.5 * spread, size=4))
    bws = np.clip(bws, 40.0, 400.0)
    return freqs, bws


def _segment_plan(rng: np.random.Generator, duration: float,
                  silence_ratio: float) -> list:
    """Alternating (is_speech, length) plan covering the full duration."""
    plan = []
    remaining = duration
    speech_first = True
    while remaining > 1e-9:
        burst = min(float(rng.uniform(1.0, 3.0)), remaining)
        plan.append((speech_first, burst))
        remaining -= burst
        if remaining <= 1e-9:
            break
        if silence_ratio > 0.0:
            gap = burst * silence_ratio / (1.0 - silence_ratio)
            gap = min(float(gap * rng.uniform(0.7, 1.3)), remaining)
            if gap > 1e-3:
                plan.append((False, gap))
                remaining -= gap
    return plan


def synthesize_utterance(rng: np.random.Generator, spec: SyntheticCorpusSpec,
                         freqs: np.ndarray, bws: np.ndarray, tilt: float,
                         duration: float, utt_id: str) -> tuple[AudioSegment, list]:
    rate = spec.sample_rate
    jitter = 0.02 * spec.channel_scale
    use_freqs = np.clip(freqs * (1.0 + rng.normal(0.0, jitter, size=4)),
                        150.0, rate / 2 - 250.0)
    use_bws = np.clip(bws * (1.0 + rng.normal(0.0, jitter, size=4)), 40.0, 450.0)
    sos = np.concatenate([_resonator_sos(f, b, rate) for f, b in zip(use_freqs, use_bws)])

    plan = _segment_plan(rng, duration, spec.silence_ratio)
    total = int(round(duration * rate))
    samples = np.zeros(total)
    regions = []
    cursor = 0
    for is_speech, length in plan:
        n = min(int(round(length * rate)), total - cursor)
        if n <= 0:
            break
        if is_speech:
            excitation = rng.standard_normal(n)
            voiced = scipy.signal.sosfilt(sos, excitation)
            voiced = voiced + tilt * np.concatenate(([0.0], voiced[:-1]))
            rms = np.sqrt(np.mean(voiced**2)) or 1.0
            samples[cursor : cursor + n] = 0.25 * voiced / rms
            regions.append((cursor / rate, (cursor + n) / rate))
        cursor += n

    noise_rms = 0.25 * 10.0 ** (-spec.snr_db / 20.0) * max(spec.channel_scale, 0.1)
    samples = samples + rng.standard_normal(total) * noise_rms
    peak = np.abs(samples).max()
    if peak > 0.99:
        samples = samples * (0.99 / peak)
    return AudioSegment(samples, rate, utt_id), regions


def generate_corpus(spec: SyntheticCorpusSpec, out_dir) -> CorpusIndex:
    """Write WAVs, ground-truth regions and the corpus table; deterministic."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    region_dir = out_dir / "regions"
    wav_dir.mkdir(parents=True, exist_ok=True)
    region_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    langs = spec.languages
    utterances = []
    for s in range(spec.num_speakers):
        language = langs[s % len(langs)]
        speaker_id = f"spk{s:04d}"
        freqs, bws = _speaker_params(rng, spec, language)
        for seg in range(spec.segments_per_speaker):
            duration = float(rng.uniform(*spec.duration_range))
            utt_id = f"{speaker_id}-{seg:02d}"
            audio, regions = synthesize_utterance(
                rng, spec, freqs, bws, language.tilt, duration, utt_id
            )
            wav_path = wav_dir / f"{utt_id}.wav"
            write_wav(wav_path, audio)
            region_path = region_dir / f"{utt_id}.txt"
            region_text = "".join(f"{a:.3f} {b:.3f}\n" for a, b in regions)
            region_path.write_text(region_text)
            utterances.append(UtteranceInfo(
                utt_id=utt_id, path=str(wav_path), speaker_id=speaker_id,
                language_id=language.name, domain_tag=language.domain,
                duration=duration, speech_regions=regions,
            ))
    index = CorpusIndex(utterances, spec_seed=spec.seed)
    save_corpus_index(out_dir / "corpus.tsv", index)
    return index


def save_corpus_index(path, index: CorpusIndex) -> None:
    lines = [f"# seed {index.spec_seed}\n"]
    for u in index.utterances:
        lines.append(
            f"{u.utt_id}\t{u.path}\t{u.speaker_id}\t{u.language_id}\t"
            f"{u.domain_tag}\t{u.duration:.3f}\n"
        )
    Path(path).write_text("".join(lines))


def load_corpus_index(path) -> CorpusIndex:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.tsv"
    utterances = []
    seed = 0
    for line in path.read_text().splitlines():
        if line.startswith("# seed"):
            seed = int(line.split()[-1])
            continue
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise DataError(f"{path}: malformed corpus line {line!r}")
        utt_id, wav, speaker, lang, domain, duration = parts
        region_path = path.parent / "regions" / f"{utt_id}.txt"
        regions = []
        if region_path.exists():
            for rline in region_path.read_text().splitlines():
                a, b = rline.split()
                regions.append((float(a), float(b)))
        utterances.append(UtteranceInfo(utt_id, wav, speaker, lang, domain,
                                        float(duration), regions))
    return CorpusIndex(utterances, spec_seed=seed)


def parse_corpus_spec(path) -> SyntheticCorpusSpec:
    """Corpus spec from the flat [corpus] section format."""
    from .config import parse_value

    values: dict = {}
    section = None
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if section not in (None, "corpus"):
            raise ConfigError(f"{path}:{ln}: unknown section [{section}]")
        values[key] = parse_value(raw)

    spec_kwargs: dict = {}
    simple = {f.name for f in SyntheticCorpusSpec.__dataclass_fields__.values()} - {
        "languages", "duration_range"
    }
    for key, value in values.items():
        if key in simple:
            spec_kwargs[key] = value
        elif key == "duration_min":
            spec_kwargs.setdefault("duration_range", [12.0, 22.0])
            spec_kwargs["duration_range"][0] = float(value)
        elif key == "duration_max":
            spec_kwargs.setdefault("duration_range", [12.0, 22.0])
            spec_kwargs["duration_range"][1] = float(value)
        else:
            raise ConfigError(f"unknown corpus spec key '{key}'")
    if "duration_range" in spec_kwargs:
        spec_kwargs["duration_range"] = tuple(spec_kwargs["duration_range"])
    return SyntheticCorpusSpec(**spec_kwargs)
