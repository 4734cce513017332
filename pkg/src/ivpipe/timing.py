"""Single-trial resource report: per-stage user/system/real time and memory.

Stages mirror the processing of one enrolment and one test segment:
cepstral features (with ST-CMVN), SAD, and i-vector extraction (statistics
plus the MAP solve). Time comes from os.times(), peak memory from
tracemalloc, both in-process for portability.
"""

from __future__ import annotations

import os
import time
import tracemalloc
from dataclasses import dataclass

from .audio import read_wav
from .config import PipelineConfig
from .errors import DataError
from .features import extract_fbank, extract_mfcc, extract_plp, st_cmvn
from .gmm import GmmModel, accumulate_stats, scale_stats, train_ubm
from .ivector import TvModel, extract_ivector, train_tv
from .pipeline import _frontend_configs, _sad_model
from .sad import apply_mask, compute_speech_mask

STAGE_NAMES = ("features", "SAD", "i-vectors")


@dataclass
class StageTiming:
    segment: str          # "enrolment" or "test"
    stage: str
    segment_duration: float
    speech_duration: float
    user_time: float
    system_time: float
    real_time: float
    peak_memory_mb: float


@dataclass
class TimingReport:
    rows: list

    def stage_rows(self, segment: str) -> list:
        return [r for r in self.rows if r.segment == segment]

    def max_stage(self, segment: str) -> str:
        rows = self.stage_rows(segment)
        return max(rows, key=lambda r: r.real_time).stage

    def render(self) -> str:
        header = (f"{'segment':<10} {'seg dur':>8} {'speech':>8} {'stage':<10} "
                  f"{'user':>8} {'system':>8} {'real':>8} {'mem(MB)':>9}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.segment:<10} {r.segment_duration:>7.1f}s {r.speech_duration:>7.1f}s "
                f"{r.stage:<10} {r.user_time:>7.2f}s {r.system_time:>7.2f}s "
                f"{r.real_time:>7.2f}s {r.peak_memory_mb:>9.1f}"
            )
        return "\n".join(lines)


class _Meter:
    def __enter__(self):
        tracemalloc.start()
        self._times = os.times()
        self._wall = time.perf_counter()
        return self

    def __exit__(self, *exc):
        after = os.times()
        self.real = time.perf_counter() - self._wall
        self.user = after.user - self._times.user
        self.system = after.system - self._times.system
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        self.peak_mb = peak / (1024.0 * 1024.0)
        return False


def bootstrap_models(config: PipelineConfig, audios, feature_type: str | None = None):
    """Train a UBM and extractor from the given audio only.

    Keeps the timing CLI self-contained when no trained artifacts exist; the
    measured extraction cost depends only on the model sizes.
    """
    ft = feature_type or config.frontend.feature_type
    if ft == "fusion":
        ft = "mfcc"
    cep_cfg, fbank_cfg = _frontend_configs(config, ft)
    extractor = extract_mfcc if ft == "mfcc" else extract_plp
    sad = _sad_model(config)
    mats = []
    for audio in audios:
        feats = st_cmvn(extractor(audio, cep_cfg), window=config.frontend.cmvn_window)
        mask = compute_speech_mask(extract_fbank(audio, fbank_cfg), sad)
        mats.append(apply_mask(feats, mask))
    total = sum(m.num_frames for m in mats)
    components = min(config.gmm.components, max(total // 50, 2))
    ubm = train_ubm(mats, components, iters=3, seed=config.gmm.seed)
    stats = [scale_stats(accumulate_stats(ubm, m), config.ivector.stats_scale)
             for m in mats]
    rank = min(config.ivector.rank, components * mats[0].dim)
    tv = train_tv(stats, ubm, rank=rank, iters=2, seed=config.ivector.seed)
    return ubm, tv


def timing_report(config: PipelineConfig, enrol_wav, test_wav,
                  ubm: GmmModel | None = None, tv: TvModel | None = None,
                  feature_type: str | None = None) -> TimingReport:
    """Measure the front-end and extraction stages on one trial."""
    ft = feature_type or config.frontend.feature_type
    if ft == "fusion":
        ft = "mfcc"
    cep_cfg, fbank_cfg = _frontend_configs(config, ft)
    extractor = extract_mfcc if ft == "mfcc" else extract_plp
    sad = _sad_model(config)

    enrol_audio = read_wav(enrol_wav, expected_rate=config.frontend.sample_rate)
    test_audio = read_wav(test_wav, expected_rate=config.frontend.sample_rate)
    if ubm is None or tv is None:
        ubm, tv = bootstrap_models(config, [enrol_audio, test_audio], ft)

    rows = []
    for segment, audio in (("enrolment", enrol_audio), ("test", test_audio)):
        with _Meter() as m_feats:
            feats = st_cmvn(extractor(audio, cep_cfg), window=config.frontend.cmvn_window)
        with _Meter() as m_sad:
            fbank = extract_fbank(audio, fbank_cfg)
            mask = compute_speech_mask(fbank, sad)
            speech = apply_mask(feats, mask)
        with _Meter() as m_ivec:
            stats = scale_stats(accumulate_stats(ubm, speech), config.ivector.stats_scale)
            extract_ivector(stats, tv, ubm)
        meters = {"features": m_feats, "SAD": m_sad, "i-vectors": m_ivec}
        for stage in STAGE_NAMES:
            meter = meters[stage]
            rows.append(StageTiming(
                segment=segment, stage=stage,
                segment_duration=audio.duration,
                speech_duration=speech.speech_duration,
                user_time=meter.user, system_time=meter.system,
                real_time=meter.real, peak_memory_mb=meter.peak_mb,
            ))
    if not rows:
        raise DataError("no timing rows produced")
    return TimingReport(rows=rows)
