"""Round-trip tests for every artifact format."""

import numpy as np
import pytest

from ivpipe.errors import DataError
from ivpipe.features import FeatureMatrix
from ivpipe.fileio import (
    load_calibration,
    load_chain,
    load_embedding,
    load_features,
    load_gmm,
    load_kernel,
    load_manifest,
    load_plda,
    load_sad_model,
    load_scores,
    load_stats,
    load_transform,
    load_trials,
    load_tv,
    save_calibration,
    save_chain_manifest,
    save_embedding,
    save_features,
    save_gmm,
    save_kernel,
    save_manifest,
    save_plda,
    save_sad_model,
    save_scores,
    save_stats,
    save_transform,
    save_trials,
    save_tv,
)
from ivpipe.gmm import GmmModel, SuffStats
from ivpipe.ivector import Embedding, TvModel
from ivpipe.plda import PldaModel, ScoringKernel, Trial, build_kernel
from ivpipe.postprocess import CalibrationMap
from ivpipe.sad import EnergyThresholdSource, MlpClassifierSource, SadModel
from ivpipe.transforms import LinearTransform


class TestFeatures:
    def test_roundtrip_with_mask(self, rng, tmp_path):
        mask = rng.random(30) < 0.5
        mask[0] = True
        feats = FeatureMatrix(rng.normal(size=(30, 7)).astype(np.float32), 0.01,
                              speech_mask=mask, id="utt-1")
        path = tmp_path / "utt.feats"
        save_features(path, feats)
        loaded = load_features(path)
        np.testing.assert_array_equal(loaded.frames, feats.frames)
        np.testing.assert_array_equal(loaded.speech_mask, mask)
        assert loaded.id == "utt-1"
        assert loaded.frame_shift == feats.frame_shift

    def test_roundtrip_without_mask(self, rng, tmp_path):
        feats = FeatureMatrix(rng.normal(size=(5, 3)).astype(np.float32), 0.02, id="x")
        path = tmp_path / "x.feats"
        save_features(path, feats)
        loaded = load_features(path)
        assert loaded.speech_mask is None
        assert loaded.speech_duration == pytest.approx(0.1)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DataError):
            load_features(path)


class TestGmmStats:
    def test_gmm_roundtrip_bit_exact(self, rng, tmp_path):
        means = rng.normal(size=(3, 4))
        covs = np.stack([np.eye(4) * s for s in (0.5, 1.0, 2.0)])
        weights = np.array([0.2, 0.3, 0.5])
        model = GmmModel(weights, means, covs)
        path = tmp_path / "ubm.gmm"
        save_gmm(path, model)
        loaded = load_gmm(path)
        assert (loaded.weights == model.weights).all()
        assert (loaded.means == model.means).all()
        assert (loaded.covariances == model.covariances).all()

    def test_stats_roundtrip(self, rng, tmp_path):
        stats = SuffStats(rng.uniform(0, 5, 4), rng.normal(size=(4, 3)),
                          utterance_id="utt/9", scale_applied=0.33)
        path = tmp_path / "u.stats"
        save_stats(path, stats)
        loaded = load_stats(path)
        assert (loaded.zero_order == stats.zero_order).all()
        assert (loaded.first_order == stats.first_order).all()
        assert loaded.scale_applied == 0.33
        assert loaded.utterance_id == "utt/9"


class TestTvEmbedding:
    def test_tv_roundtrip(self, rng, tmp_path):
        tv = TvModel(rng.normal(size=(12, 5)), ubm_ref="ubm-1", stats_scale=0.33,
                     num_components=3, dim=4)
        path = tmp_path / "t.tv"
        save_tv(path, tv)
        loaded = load_tv(path)
        assert (loaded.t == tv.t).all()
        assert loaded.stats_scale == 0.33
        assert loaded.num_components == 3 and loaded.dim == 4
        assert loaded.ubm_ref == "ubm-1"

    def test_embedding_roundtrip_full_metadata(self, rng, tmp_path):
        emb = Embedding(rng.normal(size=6), id="e1", speaker_id="spk3",
                        language_id="yue", domain_tag="in", speech_duration=12.5,
                        stage_tag="ln-lda")
        path = tmp_path / "e.ivec"
        save_embedding(path, emb)
        loaded = load_embedding(path)
        assert (loaded.w == emb.w).all()
        assert loaded.speaker_id == "spk3"
        assert loaded.language_id == "yue"
        assert loaded.domain_tag == "in"
        assert loaded.speech_duration == 12.5
        assert loaded.stage_tag == "ln-lda"

    def test_embedding_roundtrip_missing_metadata(self, rng, tmp_path):
        emb = Embedding(rng.normal(size=3), id="bare")
        path = tmp_path / "bare.ivec"
        save_embedding(path, emb)
        loaded = load_embedding(path)
        assert loaded.speaker_id is None
        assert loaded.speech_duration is None
        assert loaded.stage_tag == "raw"


class TestTransforms:
    def test_projection_roundtrip(self, rng, tmp_path):
        t = LinearTransform(kind="nda", a=rng.normal(size=(3, 5)), stage="nda")
        path = tmp_path / "p.tr"
        save_transform(path, t)
        loaded = load_transform(path)
        assert loaded.kind == "nda"
        assert (loaded.a == t.a).all()
        assert loaded.b is None
        assert loaded.stage == "nda"

    def test_whiten_roundtrip(self, rng, tmp_path):
        t = LinearTransform(kind="whiten", a=np.eye(4), b=rng.normal(size=4),
                            stage="centered")
        path = tmp_path / "w.tr"
        save_transform(path, t)
        loaded = load_transform(path)
        assert (loaded.b == t.b).all()

    def test_length_norm_roundtrip(self, tmp_path):
        t = LinearTransform(kind="length-norm", stage="length-normed")
        path = tmp_path / "l.tr"
        save_transform(path, t)
        loaded = load_transform(path)
        assert loaded.kind == "length-norm"
        assert loaded.a is None

    def test_chain_manifest(self, rng, tmp_path):
        names = []
        for i in range(3):
            t = LinearTransform(kind="lda", a=rng.normal(size=(2, 2)))
            save_transform(tmp_path / f"t{i}.tr", t)
            names.append(f"t{i}.tr")
        save_chain_manifest(tmp_path / "chain.txt", names)
        chain = load_chain(tmp_path / "chain.txt")
        assert len(chain) == 3


class TestPldaKernel:
    def test_plda_roundtrip(self, rng, tmp_path):
        v = rng.normal(size=(4, 2))
        a = rng.normal(size=(4, 4))
        model = PldaModel(rng.normal(size=4), v, a @ a.T + 4 * np.eye(4), domain_tag="in")
        path = tmp_path / "m.plda"
        save_plda(path, model)
        loaded = load_plda(path)
        assert (loaded.m == model.m).all()
        assert (loaded.v == model.v).all()
        assert (loaded.sigma == model.sigma).all()
        assert loaded.domain_tag == "in"

    def test_kernel_roundtrip(self, rng, tmp_path):
        v = rng.normal(size=(3, 2))
        a = rng.normal(size=(3, 3))
        kernel = build_kernel(PldaModel(rng.normal(size=3), v, a @ a.T + 3 * np.eye(3)))
        path = tmp_path / "k.kernel"
        save_kernel(path, kernel)
        loaded = load_kernel(path)
        assert (loaded.p == kernel.p).all()
        assert (loaded.q == kernel.q).all()
        assert (loaded.m == kernel.m).all()
        assert loaded.c == kernel.c


class TestSadModelFile:
    def test_energy_model_roundtrip(self, tmp_path):
        model = SadModel(EnergyThresholdSource(threshold=-3.5, temperature=0.7),
                         transitions=np.array([[0.95, 0.05], [0.02, 0.98]]),
                         priors=np.array([0.4, 0.6]), context=5)
        path = tmp_path / "sad.model"
        save_sad_model(path, model)
        loaded = load_sad_model(path)
        assert isinstance(loaded.source, EnergyThresholdSource)
        assert loaded.source.threshold == -3.5
        assert loaded.source.temperature == 0.7
        assert (loaded.transitions == model.transitions).all()
        assert loaded.context == 5

    def test_auto_threshold_roundtrip(self, tmp_path):
        model = SadModel(EnergyThresholdSource(threshold=None))
        path = tmp_path / "sad2.model"
        save_sad_model(path, model)
        assert load_sad_model(path).source.threshold is None

    def test_mlp_model_roundtrip(self, rng, tmp_path):
        weights = [rng.normal(size=(6, 4)), rng.normal(size=(4, 2))]
        biases = [rng.normal(size=4), rng.normal(size=2)]
        model = SadModel(MlpClassifierSource(weights, biases, "tanh"))
        path = tmp_path / "mlp.model"
        save_sad_model(path, model)
        loaded = load_sad_model(path)
        assert isinstance(loaded.source, MlpClassifierSource)
        assert loaded.source.activation == "tanh"
        for got, want in zip(loaded.source.weights, weights):
            assert (got == want).all()


class TestTextFormats:
    def test_calibration_roundtrip(self, tmp_path):
        cal = CalibrationMap(a=1.25, b=-0.75, p_tar=0.0001)
        path = tmp_path / "cal.txt"
        save_calibration(path, cal)
        loaded = load_calibration(path)
        assert loaded.a == 1.25 and loaded.b == -0.75 and loaded.p_tar == 0.0001

    def test_manifest_roundtrip(self, tmp_path):
        entries = {"u1": "a/b.feats", "u2": "c.feats"}
        path = tmp_path / "manifest.tsv"
        save_manifest(path, entries)
        assert load_manifest(path) == entries

    def test_trials_and_key_roundtrip(self, tmp_path):
        trials = [Trial("m1", "t1", "target"), Trial("m1", "t2", "nontarget")]
        key_path = tmp_path / "key.txt"
        save_trials(key_path, trials, with_labels=True)
        loaded = load_trials(key_path)
        assert loaded[0].label == "target"
        list_path = tmp_path / "trials.txt"
        save_trials(list_path, trials)
        assert load_trials(list_path)[0].label is None

    def test_scores_roundtrip(self, tmp_path):
        scored = {("m1", "t1"): 1.234567891, ("m2", "t2"): -0.5}
        path = tmp_path / "scores.txt"
        save_scores(path, scored)
        loaded = load_scores(path)
        assert loaded[("m1", "t1")] == pytest.approx(1.234567891, abs=1e-9)

    def test_key_requires_labels(self, tmp_path):
        with pytest.raises(DataError):
            save_trials(tmp_path / "k.txt", [Trial("m", "t")], with_labels=True)
