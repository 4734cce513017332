"""End-to-end experiment orchestration with cached, hash-stamped stages.

The corpus is partitioned by domain: out-domain speakers form the labelled
training set, in-domain speakers split into an unlabelled dev set (whitening,
duration pairs, in-domain PLDA, s-norm cohort) and the evaluation trial set.

Every stage writes its artifacts plus a STAGE.json carrying a hash of the
stage's config subset and its input hashes; rerunning with unchanged config
and inputs is a no-op, and any upstream change invalidates everything below.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import read_wav
from .config import PipelineConfig
from .errors import ConfigError, DataError, PipelineError
from .features import (
    FbankConfig,
    FeatureMatrix,
    MfccConfig,
    PlpConfig,
    extract_fbank,
    extract_mfcc,
    extract_plp,
    st_cmvn,
)
from .fileio import (
    load_embedding,
    load_features,
    load_gmm,
    load_kernel,
    load_plda,
    load_scores,
    load_stats,
    load_trials,
    load_tv,
    save_calibration,
    save_chain_manifest,
    save_embedding,
    save_features,
    save_gmm,
    save_kernel,
    save_plda,
    save_scores,
    save_stats,
    save_transform,
    save_trials,
    save_tv,
)
from .gmm import accumulate_stats, scale_stats, train_ubm
from .ivector import Embedding, extract_ivector, train_tv
from .plda import Trial, adapt_plda, build_kernel, enroll, score_matrix, train_plda
from .postprocess import (
    DetMetrics,
    apply_qmf,
    cohort_stats,
    compute_metrics,
    det_points,
    fuse,
    snorm_from_stats,
    train_calibration,
)
from .sad import EnergyThresholdSource, SadModel, compute_speech_mask, apply_mask
from .synth import CorpusIndex, load_corpus_index
from .transforms import (
    apply_chain,
    fit_center,
    fit_center_whiten,
    fit_lda,
    fit_ln_lda,
    fit_nda,
    fit_short_duration_comp,
    make_length_norm,
)

log = logging.getLogger(__name__)


@dataclass
class Partition:
    train: list
    dev: list
    eval_enrol: dict          # speaker -> list of enrolment utterances
    eval_test: list

    def all_utterances(self) -> list:
        enrol = [u for group in self.eval_enrol.values() for u in group]
        return self.train + self.dev + enrol + self.eval_test


@dataclass
class HarnessOptions:
    dev_fraction: float = 0.4


@dataclass
class ChainResult:
    feature_type: str
    metrics: DetMetrics
    scores: dict
    calib_scores: dict
    key: dict
    stage_hashes: dict = field(default_factory=dict)


@dataclass
class PipelineResult:
    metrics: DetMetrics
    chains: dict
    stage_hashes: dict
    out_dir: str


def partition_corpus(index: CorpusIndex, config: PipelineConfig,
                     options: HarnessOptions | None = None) -> Partition:
    options = options or HarnessOptions()
    train = index.by_domain("out")
    if not train:
        raise DataError("corpus has no out-domain utterances for training")
    in_speakers = index.speakers("in")
    if len(in_speakers) < 3:
        raise DataError("corpus needs at least 3 in-domain speakers")
    dev_count = max(int(round(len(in_speakers) * options.dev_fraction)), 1)
    dev_speakers = set(in_speakers[:dev_count])
    eval_speakers = [s for s in in_speakers if s not in dev_speakers]
    if not eval_speakers:
        raise DataError("no in-domain speakers left for evaluation")

    dev = [u for u in index.by_domain("in") if u.speaker_id in dev_speakers]
    enrol_count = config.plda.enrol_segments
    eval_enrol: dict = {}
    eval_test: list = []
    for spk in eval_speakers:
        utts = sorted((u for u in index.by_domain("in") if u.speaker_id == spk),
                      key=lambda u: u.utt_id)
        if len(utts) <= enrol_count:
            raise DataError(f"speaker {spk} lacks segments for enrolment plus test")
        eval_enrol[spk] = utts[:enrol_count]
        eval_test.extend(utts[enrol_count:])
    return Partition(train=train, dev=dev, eval_enrol=eval_enrol, eval_test=eval_test)


def _hash_payload(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class StageRunner:
    """Runs named stages with config-hash caching under one output root."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.hashes: dict = {}

    def run(self, name: str, payload, builder):
        stage_dir = self.out_dir / name
        stage_hash = _hash_payload(payload)
        marker = stage_dir / "STAGE.json"
        if marker.exists():
            try:
                recorded = json.loads(marker.read_text())
            except json.JSONDecodeError:
                recorded = {}
            if recorded.get("hash") == stage_hash:
                log.info("stage %s: cache hit (%s)", name, stage_hash)
                self.hashes[name] = stage_hash
                return stage_dir
        log.info("stage %s: computing (%s)", name, stage_hash)
        stage_dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        try:
            builder(stage_dir)
        except PipelineError as exc:
            raise type(exc)(f"stage {name}: {exc}") from exc
        marker.write_text(json.dumps({
            "stage": name, "hash": stage_hash,
            "elapsed_sec": round(time.perf_counter() - started, 3),
        }, indent=1))
        self.hashes[name] = stage_hash
        return stage_dir


def _frontend_configs(config: PipelineConfig, feature_type: str):
    f = config.frontend
    if feature_type == "mfcc":
        cep = MfccConfig(sample_rate=f.sample_rate, num_ceps=f.mfcc_num_ceps,
                         num_filters=f.mfcc_num_filters, window=f.window,
                         include_deltas=f.mfcc_include_deltas)
    elif feature_type == "plp":
        cep = PlpConfig(sample_rate=f.sample_rate, num_ceps=f.plp_num_ceps,
                        lpc_order=f.plp_lpc_order, window=f.window,
                        include_deltas=f.plp_include_deltas)
    else:
        raise ConfigError(f"unknown feature type '{feature_type}'")
    fbank = FbankConfig(sample_rate=f.sample_rate, num_filters=f.sad_num_filters,
                        frame_len=cep.frame_len, frame_shift=cep.frame_shift,
                        window=f.window)
    return cep, fbank


def _sad_model(config: PipelineConfig) -> SadModel:
    f = config.frontend
    loop = f.sad_self_loop
    transitions = np.array([[loop, 1.0 - loop], [1.0 - loop, loop]])
    priors = np.array([1.0 - f.sad_speech_prior, f.sad_speech_prior])
    return SadModel(EnergyThresholdSource(temperature=f.sad_temperature),
                    transitions=transitions, priors=priors, context=f.sad_context)


def extract_speech_features(audio, feature_type: str, config: PipelineConfig,
                            sad_model: SadModel | None = None) -> FeatureMatrix:
    """Cepstra, ST-CMVN, then SAD masking, as one front-end pass."""
    cep_cfg, fbank_cfg = _frontend_configs(config, feature_type)
    extractor = extract_mfcc if feature_type == "mfcc" else extract_plp
    feats = extractor(audio, cep_cfg)
    feats = st_cmvn(feats, window=config.frontend.cmvn_window)
    model = sad_model or _sad_model(config)
    mask = compute_speech_mask(extract_fbank(audio, fbank_cfg), model)
    return apply_mask(feats, mask)


class ChainPipeline:
    """One feature chain (mfcc or plp) through scoring and calibration."""

    def __init__(self, config: PipelineConfig, index: CorpusIndex,
                 partition: Partition, runner: StageRunner, feature_type: str):
        self.config = config
        self.index = index
        self.partition = partition
        self.runner = runner
        self.ft = feature_type
        self.corpus_ids = sorted(u.utt_id for u in partition.all_utterances())

    # ---------------------------------------------------------------- stages

    def features_stage(self):
        cfg = self.config
        payload = {
            "stage": f"features-{self.ft}",
            "frontend": vars(cfg.frontend),
            "feature_type": self.ft,
            "utterances": self.corpus_ids,
            "corpus_seed": self.index.spec_seed,
        }

        def build(stage_dir: Path):
            sad_model = _sad_model(cfg)
            for utt in self.partition.all_utterances():
                audio = read_wav(utt.path, expected_rate=cfg.frontend.sample_rate,
                                 id=utt.utt_id)
                feats = extract_speech_features(audio, self.ft, cfg, sad_model)
                save_features(stage_dir / f"{utt.utt_id}.feats", feats)

        return self.runner.run(f"features-{self.ft}", payload, build)

    def ubm_stage(self, features_dir: Path):
        cfg = self.config
        train_ids = sorted(u.utt_id for u in self.partition.train + self.partition.dev)
        payload = {
            "stage": f"ubm-{self.ft}",
            "gmm": vars(cfg.gmm),
            "train_ids": train_ids,
            "inputs": [self.runner.hashes[f"features-{self.ft}"]],
        }

        def build(stage_dir: Path):
            mats = [load_features(features_dir / f"{uid}.feats") for uid in train_ids]
            model = train_ubm(mats, cfg.gmm.components, iters=cfg.gmm.iters,
                              seed=cfg.gmm.seed,
                              covariance_floor_scale=cfg.gmm.covariance_floor_scale,
                              min_occupancy=cfg.gmm.min_occupancy)
            save_gmm(stage_dir / "ubm.gmm", model)

        return self.runner.run(f"ubm-{self.ft}", payload, build)

    def stats_stage(self, features_dir: Path, ubm_dir: Path):
        cfg = self.config
        payload = {
            "stage": f"stats-{self.ft}",
            "scale": cfg.ivector.stats_scale,
            "excerpt_seconds": cfg.transforms.shortcomp_excerpt_seconds,
            "excerpt_seed": cfg.transforms.shortcomp_seed,
            "inputs": [self.runner.hashes[f"features-{self.ft}"],
                       self.runner.hashes[f"ubm-{self.ft}"]],
        }
        dev_ids = sorted(u.utt_id for u in self.partition.dev)

        def build(stage_dir: Path):
            ubm = load_gmm(ubm_dir / "ubm.gmm")
            excerpt_rng = np.random.default_rng(cfg.transforms.shortcomp_seed)
            for utt in self.partition.all_utterances():
                feats = load_features(features_dir / f"{utt.utt_id}.feats")
                stats = scale_stats(accumulate_stats(ubm, feats), cfg.ivector.stats_scale)
                save_stats(stage_dir / f"{utt.utt_id}.stats", stats)
                if utt.utt_id in dev_ids:
                    excerpt = self._excerpt(feats, excerpt_rng)
                    ex_stats = scale_stats(accumulate_stats(ubm, excerpt),
                                           cfg.ivector.stats_scale)
                    save_stats(stage_dir / f"excerpt-{utt.utt_id}.stats", ex_stats)

        return self.runner.run(f"stats-{self.ft}", payload, build)

    def _excerpt(self, feats: FeatureMatrix, rng: np.random.Generator) -> FeatureMatrix:
        """Contiguous slice holding the configured seconds of speech frames.

        The features are already speech-only, so the excerpt is a frame run;
        utterances with less speech contribute their full content.
        """
        want = int(round(self.config.transforms.shortcomp_excerpt_seconds
                         / feats.frame_shift))
        if feats.num_frames <= want:
            return feats
        start = int(rng.integers(0, feats.num_frames - want + 1))
        return FeatureMatrix(feats.frames[start : start + want], feats.frame_shift,
                             id=feats.id)

    def tv_stage(self, stats_dir: Path):
        cfg = self.config
        train_ids = sorted(u.utt_id for u in self.partition.train + self.partition.dev)
        payload = {
            "stage": f"tv-{self.ft}",
            "ivector": vars(cfg.ivector),
            "train_ids": train_ids,
            "inputs": [self.runner.hashes[f"stats-{self.ft}"]],
        }

        def build(stage_dir: Path):
            ubm = load_gmm(self.runner.out_dir / f"ubm-{self.ft}" / "ubm.gmm")
            stats = [load_stats(stats_dir / f"{uid}.stats") for uid in train_ids]
            tv = train_tv(stats, ubm, rank=cfg.ivector.rank, iters=cfg.ivector.iters,
                          seed=cfg.ivector.seed)
            tv.ubm_ref = self.runner.hashes[f"ubm-{self.ft}"]
            save_tv(stage_dir / "tv.model", tv)

        return self.runner.run(f"tv-{self.ft}", payload, build)

    def ivectors_stage(self, stats_dir: Path, tv_dir: Path):
        payload = {
            "stage": f"ivectors-{self.ft}",
            "inputs": [self.runner.hashes[f"stats-{self.ft}"],
                       self.runner.hashes[f"tv-{self.ft}"]],
        }
        dev_ids = sorted(u.utt_id for u in self.partition.dev)
        info = {u.utt_id: u for u in self.partition.all_utterances()}

        frame_shift = _frontend_configs(self.config, self.ft)[0].frame_shift

        def build(stage_dir: Path):
            ubm = load_gmm(self.runner.out_dir / f"ubm-{self.ft}" / "ubm.gmm")
            tv = load_tv(tv_dir / "tv.model")
            for uid, utt in sorted(info.items()):
                stats = load_stats(stats_dir / f"{uid}.stats")
                emb = extract_ivector(stats, tv, ubm)
                emb.speaker_id = utt.speaker_id
                emb.language_id = utt.language_id
                emb.domain_tag = utt.domain_tag
                emb.speech_duration = stats.total_frames * frame_shift
                save_embedding(stage_dir / f"{uid}.ivec", emb)
            for uid in dev_ids:
                stats = load_stats(stats_dir / f"excerpt-{uid}.stats")
                emb = extract_ivector(stats, tv, ubm)
                emb.speaker_id = info[uid].speaker_id
                emb.language_id = info[uid].language_id
                emb.domain_tag = info[uid].domain_tag
                emb.speech_duration = stats.total_frames * frame_shift
                save_embedding(stage_dir / f"excerpt-{uid}.ivec", emb)

        return self.runner.run(f"ivectors-{self.ft}", payload, build)

    def transforms_stage(self, ivec_dir: Path):
        cfg = self.config
        payload = {
            "stage": f"transforms-{self.ft}",
            "transforms": vars(cfg.transforms),
            "inputs": [self.runner.hashes[f"ivectors-{self.ft}"]],
        }
        t = cfg.transforms
        train_utts = self.partition.train
        dev_ids = sorted(u.utt_id for u in self.partition.dev)

        def build(stage_dir: Path):
            load = lambda name: load_embedding(ivec_dir / f"{name}.ivec")
            train_embs = [load(u.utt_id) for u in sorted(train_utts, key=lambda u: u.utt_id)]
            dev_embs = [load(uid) for uid in dev_ids]
            fit_pool = train_embs + dev_embs if t.center_with_dev else train_embs

            chain = []
            center = fit_center(fit_pool)
            chain.append(center)
            state = lambda embs: [apply_chain(chain, e) for e in embs]
            whiten = fit_center_whiten(state(fit_pool))
            chain.append(whiten)

            labels = [e.speaker_id for e in train_embs]
            current_train = state(train_embs)
            if t.use_lda_instead_of_nda:
                proj = fit_lda(current_train, labels, out_dim=t.nda_out_dim)
            else:
                proj = fit_nda(current_train, labels, k=t.nda_k, out_dim=t.nda_out_dim)
            chain.append(proj)

            if t.shortcomp_enabled:
                pairs = []
                for uid in dev_ids:
                    full = apply_chain(chain, load(uid))
                    excerpt = apply_chain(chain, load(f"excerpt-{uid}"))
                    excerpt.id = full.id
                    pairs.append((full, excerpt))
                sc_lda, sc_wccn = fit_short_duration_comp(pairs, out_dim=t.shortcomp_out_dim)
                chain.append(sc_lda)
                chain.append(sc_wccn)

            final_train = state(train_embs)
            if t.lnlda_enabled:
                final_proj = fit_ln_lda(final_train, labels,
                                        [e.language_id for e in train_embs],
                                        out_dim=t.lnlda_out_dim)
            else:
                final_proj = fit_lda(final_train, labels, out_dim=t.lnlda_out_dim,
                                     stage="ln-lda")
            chain.append(final_proj)
            chain.append(make_length_norm())

            names = []
            for i, link in enumerate(chain):
                name = f"{i:02d}-{link.kind}.tr"
                save_transform(stage_dir / name, link)
                names.append(name)
            save_chain_manifest(stage_dir / "chain.txt", names)

            out_dir = stage_dir / "embeddings"
            out_dir.mkdir(exist_ok=True)
            for name in sorted(p.stem for p in ivec_dir.glob("*.ivec")):
                emb = apply_chain(chain, load(name))
                save_embedding(out_dir / f"{name}.ivec", emb)

        return self.runner.run(f"transforms-{self.ft}", payload, build)

    def plda_stage(self, transformed_dir: Path):
        cfg = self.config
        payload = {
            "stage": f"plda-{self.ft}",
            "plda": vars(cfg.plda),
            "inputs": [self.runner.hashes[f"transforms-{self.ft}"]],
        }
        train_ids = sorted(u.utt_id for u in self.partition.train)
        dev_ids = sorted(u.utt_id for u in self.partition.dev)

        def build(stage_dir: Path):
            load = lambda name: load_embedding(transformed_dir / f"{name}.ivec")
            train_embs = [load(uid) for uid in train_ids]
            out_model = train_plda([e.w for e in train_embs],
                                   [e.speaker_id for e in train_embs],
                                   num_factors=cfg.plda.factors, iters=cfg.plda.iters,
                                   seed=cfg.plda.seed, domain_tag="out")
            save_plda(stage_dir / "out.plda", out_model)
            dev_embs = [load(uid) for uid in dev_ids]
            # every unlabelled dev vector counts as its own speaker
            in_model = train_plda([e.w for e in dev_embs],
                                  [e.id for e in dev_embs],
                                  num_factors=cfg.plda.factors, iters=cfg.plda.iters,
                                  seed=cfg.plda.seed, domain_tag="in")
            save_plda(stage_dir / "in.plda", in_model)
            if cfg.plda.adapt_enabled:
                final = adapt_plda(in_model, out_model, alpha=cfg.plda.alpha,
                                   interpolate_mean=cfg.plda.interpolate_mean)
            else:
                final = out_model
            save_plda(stage_dir / "final.plda", final)
            save_kernel(stage_dir / "kernel.bin", build_kernel(final))

        return self.runner.run(f"plda-{self.ft}", payload, build)

    def scoring_stage(self, transformed_dir: Path, plda_dir: Path):
        cfg = self.config
        payload = {
            "stage": f"scores-{self.ft}",
            "postprocess": vars(cfg.postprocess),
            "enrol_segments": cfg.plda.enrol_segments,
            "inputs": [self.runner.hashes[f"transforms-{self.ft}"],
                       self.runner.hashes[f"plda-{self.ft}"]],
        }

        def build(stage_dir: Path):
            load = lambda name: load_embedding(transformed_dir / f"{name}.ivec")
            kernel = load_kernel(plda_dir / "kernel.bin")
            cohort = [load(u.utt_id) for u in
                      sorted(self.partition.dev, key=lambda u: u.utt_id)]
            cohort_rows = np.vstack([e.w for e in cohort])

            models = {spk: enroll([load(u.utt_id) for u in utts])
                      for spk, utts in sorted(self.partition.eval_enrol.items())}
            tests = [load(u.utt_id) for u in
                     sorted(self.partition.eval_test, key=lambda u: u.utt_id)]
            trials = [Trial(spk, te.id,
                            "target" if te.speaker_id == spk else "nontarget")
                      for spk in models for te in tests]
            save_trials(stage_dir / "trials.txt", trials)
            save_trials(stage_dir / "key.txt", trials, with_labels=True)

            eval_scores = self._score_block(kernel, models, tests, cohort_rows, cfg)
            save_scores(stage_dir / "eval.scores", eval_scores)

            calib_models, calib_tests = self._calibration_split()
            calib_models = {spk: enroll([load(u.utt_id) for u in utts])
                            for spk, utts in calib_models.items()}
            calib_tests = [load(u.utt_id) for u in calib_tests]
            calib_scores = self._score_block(kernel, calib_models, calib_tests,
                                             cohort_rows, cfg)
            save_scores(stage_dir / "calibration.scores", calib_scores)
            calib_key = {(spk, te.id): "target" if te.speaker_id == spk else "nontarget"
                         for spk in calib_models for te in calib_tests}
            save_trials(stage_dir / "calibration.key",
                        [Trial(m, t, lab) for (m, t), lab in sorted(calib_key.items())],
                        with_labels=True)

            cal = train_calibration(
                list(calib_scores.values()),
                [calib_key[k] for k in calib_scores],
                p_tar=cfg.postprocess.p_tar,
            )
            save_calibration(stage_dir / "calibration.txt", cal)
            final_scores = {k: float(cal.apply(v)) for k, v in eval_scores.items()}
            save_scores(stage_dir / "final.scores", final_scores)

            key = {(t.model_id, t.test_id): t.label for t in trials}
            metrics = compute_metrics(
                [final_scores[k] for k in sorted(final_scores)],
                [key[k] for k in sorted(final_scores)],
                p_tar=cfg.postprocess.p_tar, c_miss=cfg.postprocess.c_miss,
                c_fa=cfg.postprocess.c_fa,
            )
            _write_metrics(stage_dir, metrics, final_scores, key)

        return self.runner.run(f"scores-{self.ft}", payload, build)

    def _calibration_split(self):
        """Enrol/test split over the labelled training speakers."""
        enrol_count = self.config.plda.enrol_segments
        by_spk: dict = {}
        for u in sorted(self.partition.train, key=lambda u: u.utt_id):
            by_spk.setdefault(u.speaker_id, []).append(u)
        models = {}
        tests = []
        for spk, utts in sorted(by_spk.items()):
            if len(utts) <= enrol_count:
                continue
            models[spk] = utts[:enrol_count]
            tests.extend(utts[enrol_count:])
        if not models or not tests:
            raise DataError("training speakers cannot support calibration trials")
        return models, tests

    def _score_block(self, kernel, models: dict, tests: list,
                     cohort_rows: np.ndarray, cfg: PipelineConfig) -> dict:
        """Raw kernel scores, s-normalized, then QMF-shifted."""
        model_ids = sorted(models)
        model_rows = np.vstack([models[m].w for m in model_ids])
        test_rows = np.vstack([t.w for t in tests])
        raw = score_matrix(kernel, model_rows, test_rows)
        enrol_cohort = score_matrix(kernel, model_rows, cohort_rows)
        test_cohort = score_matrix(kernel, test_rows, cohort_rows)

        out = {}
        for i, mid in enumerate(model_ids):
            stats_e = enrol_cohort[i]
            for j, test in enumerate(tests):
                stats = cohort_stats(stats_e, test_cohort[j])
                score = snorm_from_stats(raw[i, j], stats,
                                         mode=cfg.postprocess.snorm_mode)
                if cfg.postprocess.qmf_enabled:
                    if test.speech_duration is None:
                        raise DataError(f"test '{test.id}' lacks a speech duration")
                    score = apply_qmf(score, test.speech_duration,
                                      coeff=cfg.postprocess.qmf_coeff)
                out[(mid, test.id)] = float(score)
        return out

    # ---------------------------------------------------------------- driver

    def run(self) -> ChainResult:
        features_dir = self.features_stage()
        ubm_dir = self.ubm_stage(features_dir)
        stats_dir = self.stats_stage(features_dir, ubm_dir)
        tv_dir = self.tv_stage(stats_dir)
        ivec_dir = self.ivectors_stage(stats_dir, tv_dir)
        transforms_dir = self.transforms_stage(ivec_dir)
        plda_dir = self.plda_stage(transforms_dir / "embeddings")
        scores_dir = self.scoring_stage(transforms_dir / "embeddings", plda_dir)

        final_scores = load_scores(scores_dir / "eval.scores")
        calib_scores = load_scores(scores_dir / "calibration.scores")
        key = {(t.model_id, t.test_id): t.label
               for t in load_trials(scores_dir / "key.txt")}
        calibrated = load_scores(scores_dir / "final.scores")
        metrics = compute_metrics(
            [calibrated[k] for k in sorted(calibrated)],
            [key[k] for k in sorted(calibrated)],
            p_tar=self.config.postprocess.p_tar,
            c_miss=self.config.postprocess.c_miss, c_fa=self.config.postprocess.c_fa,
        )
        return ChainResult(feature_type=self.ft, metrics=metrics, scores=final_scores,
                           calib_scores=calib_scores, key=key,
                           stage_hashes=dict(self.runner.hashes))


def _write_metrics(stage_dir: Path, metrics: DetMetrics, scores: dict, key: dict) -> None:
    report = (
        f"trials {len(scores)}\n"
        f"eer {metrics.eer:.6f}\n"
        f"min_cdet {metrics.min_cdet:.6f}\n"
        f"act_cdet {metrics.act_cdet:.6f}\n"
        f"threshold_min {metrics.threshold_min:.6f}\n"
        f"p_tar {metrics.p_tar}\n"
    )
    (stage_dir / "metrics.txt").write_text(report)
    ordered = sorted(scores)
    pts = det_points([scores[k] for k in ordered], [key[k] for k in ordered])
    (stage_dir / "det.txt").write_text(
        "".join(f"{pm:.6f} {pf:.6f}\n" for pm, pf in pts)
    )


def run_pipeline(config: PipelineConfig, corpus, out_dir,
                 options: HarnessOptions | None = None) -> PipelineResult:
    """Execute the configured experiment; returns the headline metrics.

    corpus may be a CorpusIndex or a path to a generated corpus directory.
    feature_type "fusion" runs the mfcc and plp chains and sums their scores.
    """
    config.validate()
    index = corpus if isinstance(corpus, CorpusIndex) else load_corpus_index(corpus)
    partition = partition_corpus(index, config, options)
    runner = StageRunner(out_dir)

    feature_types = (["mfcc", "plp"] if config.frontend.feature_type == "fusion"
                     else [config.frontend.feature_type])
    chains = {}
    for ft in feature_types:
        chains[ft] = ChainPipeline(config, index, partition, runner, ft).run()

    if config.frontend.feature_type != "fusion":
        result = chains[feature_types[0]]
        return PipelineResult(metrics=result.metrics, chains=chains,
                              stage_hashes=dict(runner.hashes), out_dir=str(out_dir))

    payload = {
        "stage": "fusion",
        "postprocess": vars(config.postprocess),
        "inputs": [chains["mfcc"].stage_hashes["scores-mfcc"],
                   chains["plp"].stage_hashes["scores-plp"]],
    }

    def build(stage_dir: Path):
        fused = fuse(chains["mfcc"].scores, chains["plp"].scores)
        fused_calib = fuse(chains["mfcc"].calib_scores, chains["plp"].calib_scores)
        save_scores(stage_dir / "fused.scores", fused)
        calib_key_path = runner.out_dir / "scores-mfcc" / "calibration.key"
        calib_key = {(t.model_id, t.test_id): t.label
                     for t in load_trials(calib_key_path)}
        cal = train_calibration([fused_calib[k] for k in sorted(fused_calib)],
                                [calib_key[k] for k in sorted(fused_calib)],
                                p_tar=config.postprocess.p_tar)
        save_calibration(stage_dir / "calibration.txt", cal)
        final = {k: float(cal.apply(v)) for k, v in fused.items()}
        save_scores(stage_dir / "final.scores", final)
        key = chains["mfcc"].key
        metrics = compute_metrics([final[k] for k in sorted(final)],
                                  [key[k] for k in sorted(final)],
                                  p_tar=config.postprocess.p_tar,
                                  c_miss=config.postprocess.c_miss,
                                  c_fa=config.postprocess.c_fa)
        _write_metrics(stage_dir, metrics, final, key)

    fusion_dir = runner.run("fusion", payload, build)
    key = chains["mfcc"].key
    final = load_scores(fusion_dir / "final.scores")
    metrics = compute_metrics([final[k] for k in sorted(final)],
                              [key[k] for k in sorted(final)],
                              p_tar=config.postprocess.p_tar,
                              c_miss=config.postprocess.c_miss,
                              c_fa=config.postprocess.c_fa)
    return PipelineResult(metrics=metrics, chains=chains,
                          stage_hashes=dict(runner.hashes), out_dir=str(out_dir))
