"""Compensation-chain tests with independent scatter oracles."""

import numpy as np
import pytest

from ivpipe.errors import DataError, StageOrderError
from ivpipe.ivector import Embedding
from ivpipe.transforms import (
    LinearTransform,
    apply_chain,
    apply_transform,
    fit_center,
    fit_center_whiten,
    fit_lda,
    fit_ln_lda,
    fit_nda,
    fit_short_duration_comp,
    lda_scatter,
    length_normalize,
    ln_lda_scatter,
    make_length_norm,
    nda_scatter,
)

from conftest import subspace_angles_deg


class TestWhitening:
    def test_standard_normal_sample_maps_near_identity(self, rng):
        x = rng.standard_normal((5000, 4))
        t = fit_center_whiten(x)
        np.testing.assert_allclose(t.a, np.eye(4), atol=0.15)

    def test_defining_property_covariance_identity(self, rng):
        x = rng.standard_normal((400, 6)) @ rng.normal(size=(6, 6)) + rng.normal(size=6)
        t = fit_center_whiten(x)
        y = (x - t.b) @ t.a.T
        np.testing.assert_allclose(np.cov(y, rowvar=False), np.eye(6), atol=1e-6)

    def test_axis_aligned_covariance_scales_axes(self, rng):
        x = rng.standard_normal((200000, 2)) * np.array([2.0, 1.0])
        t = fit_center_whiten(x)
        np.testing.assert_allclose(np.abs(t.a), np.diag([0.5, 1.0]), atol=0.02)

    def test_rank_deficient_warns_and_regularizes(self, rng, caplog):
        x = rng.standard_normal((5, 8))
        with caplog.at_level("WARNING"):
            t = fit_center_whiten(x)
        assert "ridge" in caplog.text
        assert np.isfinite(t.a).all()


def brute_force_nda_scatter(x, labels, k, alpha=2.0):
    """Plain nested-loop nonparametric scatter computation."""
    n, d = x.shape
    classes = sorted(set(labels), key=str)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        dists_own = sorted(own, key=lambda j: (float(np.linalg.norm(x[i] - x[j])), j))
        k_own = min(k, len(own))
        nn_own = dists_own[:k_own]
        local_own = x[nn_own].mean(axis=0)
        diff = x[i] - local_own
        sw += np.outer(diff, diff)
        d_own = np.linalg.norm(x[i] - x[dists_own[k_own - 1]])
        for cls in classes:
            if cls == labels[i]:
                continue
            other = [j for j in range(n) if labels[j] == cls]
            dists_oth = sorted(other, key=lambda j: (float(np.linalg.norm(x[i] - x[j])), j))
            k_oth = min(k, len(other))
            nn_oth = dists_oth[:k_oth]
            d_oth = np.linalg.norm(x[i] - x[dists_oth[k_oth - 1]])
            weight = min(d_own ** alpha, d_oth ** alpha) / (d_own ** alpha + d_oth ** alpha)
            diff_b = x[i] - x[nn_oth].mean(axis=0)
            sb += weight * np.outer(diff_b, diff_b)
    return sw, sb


class TestNda:
    def test_scatter_matches_bruteforce_oracle(self, rng):
        x = rng.normal(size=(20, 5))
        labels = ([0] * 7) + ([1] * 7) + ([2] * 6)
        pair = nda_scatter(x, labels, k=2)
        sw_expected, sb_expected = brute_force_nda_scatter(x, labels, k=2)
        np.testing.assert_allclose(pair.sw, sw_expected, atol=1e-10)
        np.testing.assert_allclose(pair.sb, sb_expected, atol=1e-10)

    def test_limit_approaches_lda_subspace(self, rng):
        centers = rng.normal(size=(4, 5)) * 8.0
        x = np.concatenate([centers[c] + rng.normal(size=(20, 5)) for c in range(4)])
        labels = np.repeat(np.arange(4), 20)
        nda = fit_nda(x, labels, k=19, out_dim=3)
        lda = fit_lda(x, labels, out_dim=3)
        assert subspace_angles_deg(nda.a.T, lda.a.T).max() < 5.0

    def test_two_1d_classes_give_discriminant_direction(self):
        x = np.array([[-2.0], [-1.9], [-2.1], [2.0], [1.9], [2.1]])
        labels = [0, 0, 0, 1, 1, 1]
        t = fit_nda(x, labels, k=2, out_dim=1)
        assert t.a.shape == (1, 1)
        assert t.a[0, 0] > 0

    def test_k_clamped_with_warning(self, rng, caplog):
        x = rng.normal(size=(8, 3))
        labels = [0, 0, 0, 0, 1, 1, 1, 1]
        with caplog.at_level("WARNING"):
            fit_nda(x, labels, k=10, out_dim=2)
        assert "clamping k" in caplog.text

    def test_single_sample_class_rejected(self, rng):
        with pytest.raises(DataError):
            fit_nda(rng.normal(size=(4, 2)), [0, 0, 0, 1], k=1)


class TestLda:
    def test_two_spherical_classes_direction(self, rng):
        mu1, mu2 = np.array([2.0, 0.0]), np.array([-2.0, 0.0])
        x = np.concatenate([rng.standard_normal((3000, 2)) + mu1,
                            rng.standard_normal((3000, 2)) + mu2])
        labels = [0] * 3000 + [1] * 3000
        t = fit_lda(x, labels, out_dim=1)
        direction = t.a[0] / np.linalg.norm(t.a[0])
        expected = (mu1 - mu2) / np.linalg.norm(mu1 - mu2)
        assert abs(direction @ expected) > 0.99

    def test_all_singleton_classes_regularized_with_warning(self, rng, caplog):
        x = rng.normal(size=(6, 3))
        with caplog.at_level("WARNING"):
            t = fit_lda(x, list(range(6)), out_dim=2)
        assert "singleton" in caplog.text
        assert np.isfinite(t.a).all()

    def test_scatter_matches_bruteforce(self, rng):
        x = rng.normal(size=(40, 4))
        labels = list(np.repeat([0, 1, 2, 3], 10))
        pair = lda_scatter(x, labels)
        mean = x.mean(axis=0)
        sb = np.zeros((4, 4))
        sw = np.zeros((4, 4))
        for cls in range(4):
            sel = x[np.asarray(labels) == cls]
            mu = sel.mean(axis=0)
            sb += len(sel) * np.outer(mu - mean, mu - mean)
            for row in sel:
                sw += np.outer(row - mu, row - mu)
        np.testing.assert_allclose(pair.sb, sb, atol=1e-10)
        np.testing.assert_allclose(pair.sw, sw, atol=1e-10)


class TestShortDurationComp:
    def make_pairs(self, rng, n=60, d=6, offset=None, noise=0.01):
        full = rng.normal(size=(n, d))
        pairs = []
        for i in range(n):
            excerpt = full[i] + (offset if offset is not None else 0.0)
            excerpt = excerpt + rng.normal(size=d) * noise
            pairs.append((Embedding(full[i], id=f"u{i}"),
                          Embedding(excerpt, id=f"u{i}")))
        return pairs

    def test_planted_direction_removed(self, rng):
        d_vec = np.zeros(6)
        d_vec[2] = 1.0
        pairs = self.make_pairs(rng, offset=2.5 * d_vec)
        lda_t, _ = fit_short_duration_comp(pairs, out_dim=5)
        basis, _ = np.linalg.qr(lda_t.a.T)
        removed_part = d_vec - basis @ (basis.T @ d_vec)
        cosine = np.linalg.norm(removed_part) / np.linalg.norm(d_vec)
        assert cosine > 0.99

    def test_wccn_defining_property(self, rng):
        pairs = self.make_pairs(rng, n=80, noise=0.5)
        lda_t, wccn_t = fit_short_duration_comp(pairs, out_dim=5)
        projected = []
        for full, excerpt in pairs:
            pf = wccn_t.a @ (lda_t.a @ full.w)
            pe = wccn_t.a @ (lda_t.a @ excerpt.w)
            projected.append((pf, pe))
        within = np.zeros((5, 5))
        for pf, pe in projected:
            pair_mat = np.stack([pf, pe])
            centered = pair_mat - pair_mat.mean(axis=0)
            within += centered.T @ centered / 2.0
        within /= len(projected)
        np.testing.assert_allclose(within, np.eye(5), atol=1e-8)

    def test_identical_pairs_warn(self, rng, caplog):
        full = rng.normal(size=(30, 4))
        pairs = [(Embedding(f, id=f"u{i}"), Embedding(f.copy(), id=f"u{i}"))
                 for i, f in enumerate(full)]
        with caplog.at_level("WARNING"):
            lda_t, wccn_t = fit_short_duration_comp(pairs, out_dim=3)
        assert "within scatter is zero" in caplog.text or "singular" in caplog.text
        assert np.isfinite(lda_t.a).all() and np.isfinite(wccn_t.a).all()

    def test_unpaired_embedding_rejected(self, rng):
        pairs = [(Embedding(rng.normal(size=3), id="a"), Embedding(rng.normal(size=3), id="b"))]
        with pytest.raises(DataError):
            fit_short_duration_comp(pairs, out_dim=2)

    def test_default_out_dim_removes_ten(self, rng):
        full = rng.normal(size=(400, 20))
        pairs = [(Embedding(full[i], id=f"u{i}"),
                  Embedding(full[i] + rng.normal(size=20) * 0.1, id=f"u{i}"))
                 for i in range(400)]
        lda_t, wccn_t = fit_short_duration_comp(pairs)
        assert lda_t.out_dim == 10
        assert wccn_t.a.shape == (10, 10)


class TestLnLda:
    def test_hand_computed_between_scatter(self):
        # 2 languages x 2 speakers x 2 embeddings in 3 dims.
        x = np.array([
            [1.0, 0.0, 0.0], [1.2, 0.1, 0.0],   # lang A, spk 1
            [0.0, 1.0, 0.5], [0.2, 0.9, 0.4],   # lang A, spk 2
            [3.0, 3.0, 1.0], [2.8, 3.2, 1.1],   # lang B, spk 3
            [4.0, 2.0, 0.0], [4.1, 2.1, 0.2],   # lang B, spk 4
        ])
        speakers = ["s1", "s1", "s2", "s2", "s3", "s3", "s4", "s4"]
        languages = ["A", "A", "A", "A", "B", "B", "B", "B"]
        pair = ln_lda_scatter(x, speakers, languages)

        sb_expected = np.zeros((3, 3))
        for lang in ("A", "B"):
            lang_rows = x[[i for i, l in enumerate(languages) if l == lang]]
            lang_mean = lang_rows.mean(axis=0)
            for spk in sorted({s for s, l in zip(speakers, languages) if l == lang}):
                rows = x[[i for i in range(8) if speakers[i] == spk]]
                dev = rows.mean(axis=0) - lang_mean
                sb_expected += len(rows) * np.outer(dev, dev)
        np.testing.assert_allclose(pair.sb, sb_expected, atol=1e-12)
        np.testing.assert_allclose(pair.st, x.T @ x, atol=1e-12)
        np.testing.assert_allclose(pair.sw, pair.st - pair.sb, atol=1e-12)

    def test_single_language_equals_total_scatter_lda(self, rng):
        spk = np.repeat(np.arange(12), 5)
        x = rng.normal(size=(12, 4))[spk] * 2.0 + rng.normal(size=(60, 4))
        ln = fit_ln_lda(x, spk, ["eng"] * 60, out_dim=3)
        lda = fit_lda(x, spk, out_dim=3, use_total_scatter=True)
        np.testing.assert_allclose(ln.a, lda.a, atol=1e-8)

    def test_language_offset_direction_suppressed(self, rng):
        d = 6
        offset = np.zeros(d)
        offset[0] = 25.0
        spk_means = rng.normal(size=(20, d)) * 1.0
        rows, speakers, languages = [], [], []
        for s in range(20):
            lang = "A" if s < 10 else "B"
            base = spk_means[s] + (offset if lang == "B" else 0.0)
            for seg in range(6):
                rows.append(base + rng.normal(size=d) * 0.3)
                speakers.append(f"s{s}")
                languages.append(lang)
        x = np.asarray(rows)
        t = fit_ln_lda(x, speakers, languages, out_dim=3)
        top = t.a[0] / np.linalg.norm(t.a[0])
        v_hat = offset / np.linalg.norm(offset)
        assert abs(top @ v_hat) < 0.1

    def test_speaker_with_two_languages_rejected(self, rng):
        x = rng.normal(size=(4, 3))
        with pytest.raises(DataError):
            fit_ln_lda(x, ["s1", "s1", "s1", "s2"], ["A", "B", "A", "A"], out_dim=2)


class TestLengthNorm:
    def test_three_four_five(self):
        emb = length_normalize(Embedding(np.array([3.0, 4.0])))
        np.testing.assert_allclose(emb.w, [0.6, 0.8], atol=1e-15)

    def test_idempotent(self, rng):
        emb = length_normalize(Embedding(rng.normal(size=8)))
        again = length_normalize(emb)
        np.testing.assert_allclose(again.w, emb.w, atol=1e-15)

    def test_batch_unit_norms(self, rng):
        for _ in range(20):
            emb = length_normalize(Embedding(rng.normal(size=12)))
            assert np.linalg.norm(emb.w) == pytest.approx(1.0, abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(DataError):
            length_normalize(Embedding(np.zeros(4)))


class TestChain:
    def test_empty_chain_is_identity(self, rng):
        emb = Embedding(rng.normal(size=5), id="x")
        out = apply_chain([], emb)
        np.testing.assert_array_equal(out.w, emb.w)

    def test_center_whiten_maps_mean_to_zero(self, rng):
        x = rng.normal(size=(100, 4)) + 5.0
        center = fit_center(x)
        whiten = fit_center_whiten(x - center.b)
        chain = [center, whiten]
        mean_emb = Embedding(x.mean(axis=0), id="mean")
        out = apply_chain(chain, mean_emb)
        np.testing.assert_allclose(out.w, 0.0, atol=1e-8)

    def test_desk_scale_dimension_ladder(self, rng):
        # 60 -> 40 -> 39 -> 30 with length normalization at the end.
        x = rng.normal(size=(300, 60))
        labels = list(np.repeat(np.arange(30), 10))
        langs = ["A" if l < 15 else "B" for l in labels]
        center = fit_center(x)
        xc = x - center.b
        whiten = fit_center_whiten(xc)
        xw = (xc - whiten.b) @ whiten.a.T
        nda = fit_nda(xw, labels, k=5, out_dim=40)
        xn = xw @ nda.a.T
        pairs = [(Embedding(xn[i], id=f"u{i}"),
                  Embedding(xn[i] + rng.normal(size=40) * 0.05, id=f"u{i}"))
                 for i in range(150)]
        sc_lda, sc_wccn = fit_short_duration_comp(pairs, out_dim=39)
        xs = (xn @ sc_lda.a.T) @ sc_wccn.a.T
        lnlda = fit_ln_lda(xs, labels, langs, out_dim=30)
        chain = [center, whiten, nda, sc_lda, sc_wccn, lnlda, make_length_norm()]
        out = apply_chain(chain, Embedding(x[0], id="u0"))
        assert out.dim == 30
        assert out.stage_tag == "length-normed"
        assert np.linalg.norm(out.w) == pytest.approx(1.0, abs=1e-12)

    def test_dimension_mismatch_rejected(self, rng):
        t = LinearTransform(kind="lda", a=rng.normal(size=(2, 4)))
        with pytest.raises(DataError):
            apply_transform(t, Embedding(rng.normal(size=5)))

    def test_stage_order_enforced(self, rng):
        emb = Embedding(rng.normal(size=4), stage_tag="ln-lda")
        backward = LinearTransform(kind="nda", a=np.eye(4), stage="nda")
        with pytest.raises(StageOrderError):
            apply_transform(backward, emb)
