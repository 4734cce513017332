"""SAD tests: posterior sources, Viterbi against exhaustive search, masking."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivpipe.errors import ConfigError, DataError, NoSpeechError
from ivpipe.features import FeatureMatrix
from ivpipe.sad import (
    EnergyThresholdSource,
    MlpClassifierSource,
    SadModel,
    apply_mask,
    compute_speech_mask,
    sad_posteriors,
    stack_context,
    train_mlp_sad,
    viterbi_decode,
)


def brute_force_viterbi(loglikes: np.ndarray, transitions: np.ndarray) -> tuple[float, tuple]:
    """Enumerate all 2^T paths; returns (best score, best path).

    Ties resolve to the path that is smallest as a tuple, i.e. non-speech
    preferred earliest.
    """
    t = loglikes.shape[0]
    log_trans = np.log(transitions)
    best_score, best_path = -np.inf, None
    for path in itertools.product((0, 1), repeat=t):
        score = loglikes[0, path[0]]
        for i in range(1, t):
            score += log_trans[path[i - 1], path[i]] + loglikes[i, path[i]]
        if score > best_score:
            best_score, best_path = score, path
    return best_score, best_path


def path_score(loglikes, transitions, path) -> float:
    log_trans = np.log(transitions)
    score = loglikes[0, int(path[0])]
    for i in range(1, len(path)):
        score += log_trans[int(path[i - 1]), int(path[i])] + loglikes[i, int(path[i])]
    return float(score)


TRANS = np.array([[0.99, 0.01], [0.01, 0.99]])


class TestViterbi:
    def test_all_speech(self):
        loglikes = np.tile([-10.0, 0.0], (20, 1))
        assert viterbi_decode(loglikes, TRANS).all()

    def test_spurious_nonspeech_frame_smoothed(self):
        # One weakly non-speech frame inside strong speech: switching twice
        # costs 2*log(0.01/0.99) ~ -9.2, staying costs only the emission gap.
        loglikes = np.tile([-4.0, 0.0], (9, 1))
        loglikes[4] = [0.0, -1.0]
        stay = path_score(loglikes, TRANS, [1] * 9)
        dip = path_score(loglikes, TRANS, [1, 1, 1, 1, 0, 1, 1, 1, 1])
        assert stay > dip
        assert viterbi_decode(loglikes, TRANS).all()

    def test_tie_breaks_toward_nonspeech(self):
        loglikes = np.zeros((4, 2))
        symmetric = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert not viterbi_decode(loglikes, symmetric).any()

    @settings(max_examples=60, deadline=None)
    @given(
        t=st.integers(min_value=1, max_value=12),
        seed=st.integers(min_value=0, max_value=10_000),
        self_loop=st.floats(min_value=0.5, max_value=0.999),
    )
    def test_matches_exhaustive_enumeration(self, t, seed, self_loop):
        gen = np.random.default_rng(seed)
        loglikes = gen.normal(size=(t, 2)) * 3.0
        trans = np.array([[self_loop, 1 - self_loop], [1 - self_loop, self_loop]])
        best_score, best_path = brute_force_viterbi(loglikes, trans)
        mask = viterbi_decode(loglikes, trans)
        got = path_score(loglikes, trans, mask.astype(int))
        assert got == pytest.approx(best_score, abs=1e-9)
        assert tuple(mask.astype(int)) == best_path

    def test_shape_validation(self):
        with pytest.raises(DataError):
            viterbi_decode(np.zeros((5, 3)), TRANS)


class TestEnergySource:
    def test_high_energy_scores_speech(self):
        frames = np.full((30, 40), -8.0)
        frames[10:20] = 2.0
        feats = FeatureMatrix(frames, 0.010, id="e")
        model = SadModel(EnergyThresholdSource())
        loglikes = sad_posteriors(feats, model)
        assert (loglikes[10:20, 1] > loglikes[10:20, 0]).all()
        assert (loglikes[:10, 0] > loglikes[:10, 1]).all()

    def test_uniform_posterior_equal_priors_gives_equal_loglikes(self):
        frames = np.zeros((10, 40))
        feats = FeatureMatrix(frames, 0.010, id="u")
        model = SadModel(EnergyThresholdSource(threshold=0.0))
        loglikes = sad_posteriors(feats, model)
        np.testing.assert_allclose(loglikes[:, 0], loglikes[:, 1], atol=1e-12)


class TestMlpSource:
    def test_hand_computed_forward_pass(self):
        # 2 inputs -> 2 hidden (relu) -> 2 outputs, no context.
        w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b1 = np.array([0.0, 0.5])
        w2 = np.array([[1.0, 0.0], [0.0, 1.0]])
        b2 = np.array([0.1, -0.1])
        source = MlpClassifierSource([w1, w2], [b1, b2], activation="relu")
        x = np.array([[0.3, -0.2], [1.0, 1.0]])
        hidden = np.maximum(x @ w1 + b1, 0.0)
        logits = hidden @ w2 + b2
        expl = np.exp(logits - logits.max(axis=1, keepdims=True))
        expected = expl / expl.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(source.forward(x), expected, atol=1e-12)

    def test_dimension_mismatch_is_config_error(self):
        source = MlpClassifierSource([np.zeros((10, 2))], [np.zeros(2)])
        feats = FeatureMatrix(np.zeros((5, 40)), 0.010, id="m")
        model = SadModel(source, context=7)
        with pytest.raises(ConfigError):
            sad_posteriors(feats, model)

    def test_context_stacking_edges_replicate(self):
        frames = np.arange(6, dtype=float)[:, None]
        stacked = stack_context(frames, 2)
        np.testing.assert_array_equal(stacked[0], [0, 0, 0, 1, 2])
        np.testing.assert_array_equal(stacked[-1], [3, 4, 5, 5, 5])

    def test_training_learns_separable_labels(self):
        gen = np.random.default_rng(0)
        x = np.concatenate([gen.normal(-2, 0.5, size=(300, 4)), gen.normal(2, 0.5, size=(300, 4))])
        y = np.concatenate([np.zeros(300, dtype=int), np.ones(300, dtype=int)])
        source = train_mlp_sad(x, y, hidden_layers=(16,), epochs=30, seed=1)
        preds = source.forward(x).argmax(axis=1)
        assert (preds == y).mean() > 0.95


class TestApplyMask:
    def test_identity_mask(self):
        feats = FeatureMatrix(np.arange(20.0).reshape(10, 2), 0.010, id="a")
        out = apply_mask(feats, np.ones(10, dtype=bool))
        np.testing.assert_array_equal(out.frames, feats.frames)

    def test_half_mask_updates_duration(self):
        feats = FeatureMatrix(np.ones((100, 3)), 0.010, id="b")
        mask = np.zeros(100, dtype=bool)
        mask[::2] = True
        out = apply_mask(feats, mask)
        assert out.num_frames == 50
        assert out.speech_duration == pytest.approx(0.5)

    def test_all_false_mask_raises_no_speech(self):
        feats = FeatureMatrix(np.ones((10, 3)), 0.010, id="c")
        with pytest.raises(NoSpeechError):
            apply_mask(feats, np.zeros(10, dtype=bool))

    def test_length_mismatch(self):
        feats = FeatureMatrix(np.ones((10, 3)), 0.010, id="d")
        with pytest.raises(DataError):
            apply_mask(feats, np.ones(9, dtype=bool))


class TestSadModelValidation:
    def test_transition_rows_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            SadModel(EnergyThresholdSource(), transitions=np.array([[0.9, 0.2], [0.1, 0.9]]))

    def test_probabilities_in_open_interval(self):
        with pytest.raises(ConfigError):
            SadModel(EnergyThresholdSource(), transitions=np.array([[1.0, 0.0], [0.0, 1.0]]))

    def test_end_to_end_mask_on_synthetic_silence(self):
        frames = np.full((60, 40), -9.0)
        frames[20:40] = 1.0
        feats = FeatureMatrix(frames, 0.010, id="seg")
        mask = compute_speech_mask(feats, SadModel(EnergyThresholdSource()))
        assert mask[25:35].all()
        assert not mask[:15].any()
