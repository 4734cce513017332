"""Batch command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Subcommands wrap the library stages one-to-one; `ivpipe run`
drives the full experiment with ablation flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .audio import read_wav
from .config import PipelineConfig, dump_config, full_scale_config, load_config
from .errors import PipelineError
from .features import FbankConfig, extract_fbank, st_cmvn
from .gmm import accumulate_stats, scale_stats, train_ubm
from .ivector import extract_ivector, train_tv
from .plda import adapt_plda, build_kernel, enroll, score_trial, train_plda
from .postprocess import (
    apply_qmf,
    cohort_stats,
    compute_metrics,
    det_points,
    fuse,
    snorm_from_stats,
    train_calibration,
)
from .pipeline import extract_speech_features, run_pipeline, _frontend_configs, _sad_model
from .sad import apply_mask, compute_speech_mask
from .synth import generate_corpus, parse_corpus_spec
from .timing import timing_report
from .transforms import (
    apply_chain,
    fit_center_whiten,
    fit_lda,
    fit_ln_lda,
    fit_nda,
    fit_short_duration_comp,
)

log = logging.getLogger("ivpipe")


def _load_pipeline_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    return load_config(path)


def _read_audio_manifest(path, sample_rate):
    for utt_id, wav in sorted(fileio.load_manifest(path).items()):
        yield utt_id, read_wav(wav, expected_rate=sample_rate, id=utt_id)


def cmd_features(args) -> int:
    config = _load_pipeline_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for utt_id, audio in _read_audio_manifest(args.manifest, config.frontend.sample_rate):
        if args.type == "fbank":
            cfg = FbankConfig(sample_rate=config.frontend.sample_rate,
                              num_filters=config.frontend.sad_num_filters,
                              window=config.frontend.window)
            feats = extract_fbank(audio, cfg)
        else:
            feats = extract_speech_features(audio, args.type, config) if args.masked \
                else _unmasked_features(audio, args.type, config)
        path = out / f"{utt_id}.feats"
        fileio.save_features(path, feats)
        entries[utt_id] = str(path)
    fileio.save_manifest(out / "manifest.tsv", entries)
    return 0


def _unmasked_features(audio, feature_type, config):
    from .features import extract_mfcc, extract_plp

    cep_cfg, _ = _frontend_configs(config, feature_type)
    extractor = extract_mfcc if feature_type == "mfcc" else extract_plp
    return st_cmvn(extractor(audio, cep_cfg), window=config.frontend.cmvn_window)


def cmd_sad(args) -> int:
    config = _load_pipeline_config(args.config)
    model = fileio.load_sad_model(args.model) if args.model else _sad_model(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, fbank_cfg = _frontend_configs(config, args.type)
    masks = {}
    for utt_id, audio in _read_audio_manifest(args.manifest, config.frontend.sample_rate):
        fbank = extract_fbank(audio, fbank_cfg)
        mask = compute_speech_mask(fbank, model)
        from .features import FeatureMatrix

        path = out / f"{utt_id}.mask"
        fileio.save_features(path, FeatureMatrix(
            mask.astype(np.float64)[:, None], fbank.frame_shift, id=utt_id))
        masks[utt_id] = (str(path), mask)
    fileio.save_manifest(out / "manifest.tsv", {k: v[0] for k, v in masks.items()})
    if args.apply_to:
        feats_out = Path(args.features_out or (out / "masked"))
        feats_out.mkdir(parents=True, exist_ok=True)
        entries = {}
        for utt_id, path in sorted(fileio.load_manifest(args.apply_to).items()):
            feats = fileio.load_features(path)
            masked = apply_mask(feats, masks[utt_id][1])
            outp = feats_out / f"{utt_id}.feats"
            fileio.save_features(outp, masked)
            entries[utt_id] = str(outp)
        fileio.save_manifest(feats_out / "manifest.tsv", entries)
    return 0


def cmd_ubm_train(args) -> int:
    config = _load_pipeline_config(args.config)
    mats = [fileio.load_features(p)
            for _, p in sorted(fileio.load_manifest(args.manifest).items())]
    model = train_ubm(mats, args.components, iters=args.iters, seed=args.seed,
                      covariance_floor_scale=config.gmm.covariance_floor_scale,
                      min_occupancy=config.gmm.min_occupancy)
    fileio.save_gmm(args.out, model)
    return 0


def cmd_stats(args) -> int:
    ubm = fileio.load_gmm(args.ubm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for utt_id, path in sorted(fileio.load_manifest(args.manifest).items()):
        feats = fileio.load_features(path)
        stats = accumulate_stats(ubm, feats)
        if args.scale != 1.0:
            stats = scale_stats(stats, args.scale)
        spath = out / f"{utt_id}.stats"
        fileio.save_stats(spath, stats)
        entries[utt_id] = str(spath)
    fileio.save_manifest(out / "manifest.tsv", entries)
    return 0


def _load_stats_dir(path):
    stats_dir = Path(path)
    manifest = stats_dir / "manifest.tsv"
    if manifest.exists():
        return [fileio.load_stats(p)
                for _, p in sorted(fileio.load_manifest(manifest).items())]
    return [fileio.load_stats(p) for p in sorted(stats_dir.glob("*.stats"))]


def cmd_tv_train(args) -> int:
    ubm = fileio.load_gmm(args.ubm)
    stats = _load_stats_dir(args.stats)
    tv = train_tv(stats, ubm, rank=args.rank, iters=args.iters, seed=args.seed)
    fileio.save_tv(args.out, tv)
    return 0


def cmd_ivectors(args) -> int:
    ubm = fileio.load_gmm(args.ubm)
    tv = fileio.load_tv(args.tv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for stats in _load_stats_dir(args.stats):
        emb = extract_ivector(stats, tv, ubm)
        path = out / f"{stats.utterance_id}.ivec"
        fileio.save_embedding(path, emb)
        entries[stats.utterance_id] = str(path)
    fileio.save_manifest(out / "manifest.tsv", entries)
    return 0


def _load_embeddings(manifest):
    return [fileio.load_embedding(p)
            for _, p in sorted(fileio.load_manifest(manifest).items())]


def cmd_transform_fit(args) -> int:
    embs = _load_embeddings(args.manifest)
    if args.kind == "whiten":
        transform = fit_center_whiten(embs)
        fileio.save_transform(args.out, transform)
        return 0
    if args.kind in ("nda", "lda", "lnlda"):
        labels = [e.speaker_id for e in embs]
        if any(l is None for l in labels):
            raise PipelineError("embeddings lack speaker ids") from None
        if args.kind == "nda":
            transform = fit_nda(embs, labels, k=args.k, out_dim=args.out_dim)
        elif args.kind == "lda":
            transform = fit_lda(embs, labels, out_dim=args.out_dim)
        else:
            langs = [e.language_id for e in embs]
            transform = fit_ln_lda(embs, labels, langs, out_dim=args.out_dim)
        fileio.save_transform(args.out, transform)
        return 0
    # shortcomp: manifest pairs full/excerpt by shared utterance id
    if not args.pairs:
        raise PipelineError("--pairs manifest required for shortcomp")
    full = {e.id: e for e in embs}
    pairs = []
    for utt_id, path in sorted(fileio.load_manifest(args.pairs).items()):
        excerpt = fileio.load_embedding(path)
        pairs.append((full[utt_id], excerpt))
    lda_t, wccn_t = fit_short_duration_comp(pairs, out_dim=args.out_dim)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.save_transform(out.with_suffix(".lda.tr"), lda_t)
    fileio.save_transform(out.with_suffix(".wccn.tr"), wccn_t)
    fileio.save_chain_manifest(out, [out.with_suffix(".lda.tr").name,
                                     out.with_suffix(".wccn.tr").name])
    return 0


def cmd_transform_apply(args) -> int:
    chain = fileio.load_chain(args.chain)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for utt_id, path in sorted(fileio.load_manifest(args.manifest).items()):
        emb = apply_chain(chain, fileio.load_embedding(path))
        opath = out / f"{utt_id}.ivec"
        fileio.save_embedding(opath, emb)
        entries[utt_id] = str(opath)
    fileio.save_manifest(out / "manifest.tsv", entries)
    return 0


def cmd_plda_train(args) -> int:
    embs = _load_embeddings(args.manifest)
    if args.singleton_speakers:
        labels = [e.id for e in embs]
    else:
        labels = [e.speaker_id for e in embs]
        if any(l is None for l in labels):
            raise PipelineError("embeddings lack speaker ids") from None
    model = train_plda([e.w for e in embs], labels, num_factors=args.factors,
                       iters=args.iters, seed=args.seed, domain_tag=args.domain)
    fileio.save_plda(args.out, model)
    return 0


def cmd_plda_adapt(args) -> int:
    in_model = fileio.load_plda(args.in_model)
    out_model = fileio.load_plda(args.out_model)
    adapted = adapt_plda(in_model, out_model, alpha=args.alpha,
                         interpolate_mean=args.interpolate_mean)
    fileio.save_plda(args.out, adapted)
    if args.kernel:
        fileio.save_kernel(args.kernel, build_kernel(adapted))
    return 0


def cmd_score(args) -> int:
    kernel = fileio.load_kernel(args.kernel)
    enrol = {e.id: e for e in _load_embeddings(args.enrol)}
    tests = {e.id: e for e in _load_embeddings(args.test)}
    trials = fileio.load_trials(args.trials)
    scored = {}
    for trial in trials:
        if trial.model_id not in enrol or trial.test_id not in tests:
            raise PipelineError(
                f"trial references unknown ids: {trial.model_id} {trial.test_id}"
            ) from None
        scored[(trial.model_id, trial.test_id)] = score_trial(
            enrol[trial.model_id], tests[trial.test_id], kernel)
    fileio.save_scores(args.out, scored)
    return 0


def cmd_snorm(args) -> int:
    kernel = fileio.load_kernel(args.kernel)
    cohort = _load_embeddings(args.cohort)
    enrol = {e.id: e for e in _load_embeddings(args.enrol)}
    tests = {e.id: e for e in _load_embeddings(args.test)}
    scores = fileio.load_scores(args.scores)
    cohort_rows = np.vstack([e.w for e in cohort])
    from .plda import score_matrix

    out = {}
    enrol_side = {}
    test_side = {}
    for (model_id, test_id), raw in sorted(scores.items()):
        if model_id not in enrol_side:
            enrol_side[model_id] = score_matrix(
                kernel, enrol[model_id].w[None, :], cohort_rows).ravel()
        if test_id not in test_side:
            test_side[test_id] = score_matrix(
                kernel, tests[test_id].w[None, :], cohort_rows).ravel()
        stats = cohort_stats(enrol_side[model_id], test_side[test_id])
        out[(model_id, test_id)] = snorm_from_stats(raw, stats, mode=args.mode)
    fileio.save_scores(args.out, out)
    return 0


def cmd_qmf(args) -> int:
    scores = fileio.load_scores(args.scores)
    tests = {e.id: e for e in _load_embeddings(args.test)}
    out = {}
    for (model_id, test_id), score in scores.items():
        duration = tests[test_id].speech_duration
        if duration is None:
            raise PipelineError(f"embedding '{test_id}' lacks a speech duration") from None
        out[(model_id, test_id)] = apply_qmf(score, duration, coeff=args.coeff)
    fileio.save_scores(args.out, out)
    return 0


def cmd_fuse(args) -> int:
    fused = fuse(fileio.load_scores(args.scores_a), fileio.load_scores(args.scores_b))
    fileio.save_scores(args.out, fused)
    return 0


def _scores_and_labels(scores_path, key_path):
    scores = fileio.load_scores(scores_path)
    key = {(t.model_id, t.test_id): t.label for t in fileio.load_trials(key_path)}
    ordered = sorted(scores)
    missing = [k for k in ordered if k not in key]
    if missing:
        raise PipelineError(f"scores without key entries: {missing[:3]}") from None
    return [scores[k] for k in ordered], [key[k] for k in ordered], scores


def cmd_calibrate(args) -> int:
    if args.apply:
        cal = fileio.load_calibration(args.apply)
        scores = fileio.load_scores(args.scores)
        fileio.save_scores(args.out, {k: float(cal.apply(v)) for k, v in scores.items()})
        return 0
    values, labels, _ = _scores_and_labels(args.scores, args.key)
    cal = train_calibration(values, labels, p_tar=args.ptar)
    fileio.save_calibration(args.out, cal)
    return 0


def cmd_metrics(args) -> int:
    values, labels, _ = _scores_and_labels(args.scores, args.key)
    metrics = compute_metrics(values, labels, p_tar=args.ptar,
                              c_miss=args.c_miss, c_fa=args.c_fa)
    report = (f"trials {len(values)}\n"
              f"eer {metrics.eer:.6f}\n"
              f"min_cdet {metrics.min_cdet:.6f}\n"
              f"act_cdet {metrics.act_cdet:.6f}\n"
              f"threshold_min {metrics.threshold_min:.6f}\n"
              f"p_tar {metrics.p_tar}\n")
    sys.stdout.write(report)
    if args.det:
        pts = det_points(values, labels)
        Path(args.det).write_text("".join(f"{pm:.6f} {pf:.6f}\n" for pm, pf in pts))
    return 0


def cmd_synth(args) -> int:
    spec = parse_corpus_spec(args.spec)
    generate_corpus(spec, args.out)
    return 0


def cmd_run(args) -> int:
    config = _load_pipeline_config(args.config)
    if args.no_shortcomp:
        config.transforms.shortcomp_enabled = False
    if args.lda_instead_of_nda:
        config.transforms.use_lda_instead_of_nda = True
    if args.no_lnlda:
        config.transforms.lnlda_enabled = False
    if args.no_qmf:
        config.postprocess.qmf_enabled = False
    if args.no_adapt:
        config.plda.adapt_enabled = False
    config.validate()
    result = run_pipeline(config, args.corpus, args.out)
    m = result.metrics
    sys.stdout.write(
        f"eer {m.eer:.6f}\nmin_cdet {m.min_cdet:.6f}\nact_cdet {m.act_cdet:.6f}\n"
    )
    return 0


def cmd_timing(args) -> int:
    config = _load_pipeline_config(args.config)
    report = timing_report(config, args.enrol, args.test)
    sys.stdout.write(report.render() + "\n")
    return 0


def cmd_config(args) -> int:
    config = full_scale_config() if args.full_scale else PipelineConfig()
    if args.dump:
        sys.stdout.write(dump_config(config))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivpipe",
        description="Speaker-verification back-end pipeline",
    )
    parser.add_argument("--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract cepstral or filterbank features")
    p.add_argument("--type", choices=("mfcc", "plp", "fbank"), required=True)
    p.add_argument("--config")
    p.add_argument("--manifest", required=True, help="utterance-id<TAB>wav-path")
    p.add_argument("--out", required=True)
    p.add_argument("--masked", action="store_true",
                   help="run SAD and drop non-speech frames")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("sad", help="speech activity detection masks")
    p.add_argument("--model", help="saved SAD model; defaults to config energy SAD")
    p.add_argument("--config")
    p.add_argument("--type", choices=("mfcc", "plp"), default="mfcc",
                   help="frame geometry to match")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--apply-to", help="feature manifest to mask")
    p.add_argument("--features-out")
    p.set_defaults(func=cmd_sad)

    p = sub.add_parser("ubm-train", help="train the full-covariance UBM")
    p.add_argument("--manifest", required=True)
    p.add_argument("--components", type=int, required=True)
    p.add_argument("--iters", type=int, default=8)
    p.add_argument("--seed", type=int, default=100)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ubm_train)

    p = sub.add_parser("stats", help="accumulate scaled Baum-Welch statistics")
    p.add_argument("--ubm", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scale", type=float, default=0.33)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("tv-train", help="train the total-variability matrix")
    p.add_argument("--stats", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tv_train)

    p = sub.add_parser("ivectors", help="extract i-vectors from statistics")
    p.add_argument("--stats", required=True)
    p.add_argument("--tv", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ivectors)

    p = sub.add_parser("transform-fit", help="fit a compensation transform")
    p.add_argument("--kind", choices=("whiten", "nda", "lda", "shortcomp", "lnlda"),
                   required=True)
    p.add_argument("--manifest", required=True, help="embedding manifest")
    p.add_argument("--pairs", help="excerpt-embedding manifest (shortcomp)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out-dim", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform_fit)

    p = sub.add_parser("transform-apply", help="apply a transform chain")
    p.add_argument("--chain", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform_apply)

    p = sub.add_parser("plda-train", help="train a PLDA model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--factors", type=int, default=10)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=400)
    p.add_argument("--domain", choices=("in", "out"), default="out")
    p.add_argument("--singleton-speakers", action="store_true",
                   help="treat every embedding as its own speaker")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plda_train)

    p = sub.add_parser("plda-adapt", help="interpolate in/out-domain PLDA")
    p.add_argument("--alpha", type=float, default=0.10)
    p.add_argument("--in-model", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--interpolate-mean", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--kernel", help="also write the scoring kernel")
    p.set_defaults(func=cmd_plda_adapt)

    p = sub.add_parser("score", help="score a trial list")
    p.add_argument("--kernel", required=True)
    p.add_argument("--enrol", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("snorm", help="symmetric score normalization")
    p.add_argument("--kernel", required=True)
    p.add_argument("--cohort", required=True, help="impostor embedding manifest")
    p.add_argument("--enrol", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--mode", choices=("sum", "paper-minus"), default="sum")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_snorm)

    p = sub.add_parser("qmf", help="duration quality-measure offset")
    p.add_argument("--coeff", type=float, default=-0.2)
    p.add_argument("--scores", required=True)
    p.add_argument("--test", required=True, help="test embedding manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_qmf)

    p = sub.add_parser("fuse", help="sum two score files over identical trials")
    p.add_argument("scores_a")
    p.add_argument("scores_b")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("calibrate", help="train or apply an affine llr map")
    p.add_argument("--scores", required=True)
    p.add_argument("--key")
    p.add_argument("--ptar", type=float, default=0.0001)
    p.add_argument("--apply", help="existing calibration file to apply")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("metrics", help="EER and detection costs")
    p.add_argument("--ptar", type=float, default=0.0001)
    p.add_argument("--c-miss", type=float, default=1.0)
    p.add_argument("--c-fa", type=float, default=1.0)
    p.add_argument("--scores", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--det", help="write P_miss/P_fa pairs to this file")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the full experiment")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-shortcomp", action="store_true")
    p.add_argument("--lda-instead-of-nda", action="store_true")
    p.add_argument("--no-lnlda", action="store_true")
    p.add_argument("--no-qmf", action="store_true")
    p.add_argument("--no-adapt", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("timing", help="single-trial resource report")
    p.add_argument("--config")
    p.add_argument("--enrol", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("config", help="print configuration defaults")
    p.add_argument("--dump", action="store_true")
    p.add_argument("--full-scale", action="store_true")
    p.set_defaults(func=cmd_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PipelineError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: missing file: {exc}\n")
        return 3
    except KeyError as exc:
        sys.stderr.write(f"error: unknown identifier {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
