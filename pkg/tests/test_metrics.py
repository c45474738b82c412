import numpy as np
import pytest

from partfont.dataset import ALPHABET
from partfont.errors import NonFiniteInput, ShapeMismatch, TooSmall
from partfont.metrics import (
    ClassifierConfig,
    FeatureClassifier,
    _ClassifierNet,
    evaluate_corpus,
    evaluate_font,
    feature_statistics,
    fid_from_features,
    frechet_distance,
    l1,
    local_l1,
    msssim,
    msssim_scales,
    save_report,
    ssim,
    train_feature_classifier,
)

from conftest import synth_record


class TestL1:
    def test_identity(self):
        a = np.random.default_rng(0).random((32, 32))
        assert l1(a, a) == 0.0

    def test_extremes(self):
        z, o = np.zeros((16, 16)), np.ones((16, 16))
        assert l1(z, o) == 1.0

    def test_half_pixels_quarter(self):
        a = np.zeros((16, 16))
        b = a.copy()
        b[:, :8] = 0.5  # half the pixels differ by 0.5
        assert l1(a, b) == 0.25

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            l1(np.zeros((8, 8)), np.zeros((8, 9)))

    def test_metric_properties_random_triples(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b, c = (rng.random((12, 12)) for _ in range(3))
            assert l1(a, b) >= 0
            assert l1(a, b) == l1(b, a)
            assert l1(a, c) <= l1(a, b) + l1(b, c) + 1e-12


class TestSSIM:
    def test_identity(self):
        a = np.random.default_rng(0).random((64, 64))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert msssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_complement_negative_on_glyph(self, dejavu_128):
        a = dejavu_128.glyphs["A"].pixels.astype(np.float64)
        assert ssim(a, 1.0 - a) < 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((32, 32)), rng.random((32, 32))
        assert ssim(a, b) == ssim(b, a)

    def test_matches_reference_implementation(self):
        from skimage.metrics import structural_similarity

        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.random((64, 64))
            b = np.clip(a + rng.normal(0, 0.3, a.shape), 0, 1)
            ref = structural_similarity(
                a, b, win_size=11, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=1.0,
            )
            assert ssim(a, b) == pytest.approx(ref, abs=1e-10)

    def test_too_small(self):
        with pytest.raises(TooSmall):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_msssim_scale_schedule(self):
        assert msssim_scales(128) == 4
        assert msssim_scales(64) == 3
        assert msssim_scales(22) == 2
        with pytest.raises(TooSmall):
            msssim_scales(10)

    def test_msssim_bounded(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((128, 128)), rng.random((128, 128))
        v = msssim(a, b)
        assert 0.0 <= v <= 1.0


class TestLocalL1:
    def test_identity(self, dejavu_128):
        a = dejavu_128.glyphs["B"].pixels
        assert local_l1(a, a) == 0.0

    def test_complement_on_binary_glyph(self, dejavu_128):
        a = (dejavu_128.glyphs["B"].pixels > 0.5).astype(np.float64)
        assert local_l1(a, 1.0 - a) == pytest.approx(1.0, abs=1e-12)

    def test_blank_target_nan(self):
        blank = np.zeros((64, 64))
        assert np.isnan(local_l1(blank, blank))

    def test_full_patch_with_center_keypoint_equals_l1(self, dejavu_128):
        a = dejavu_128.glyphs["C"].pixels
        b = dejavu_128.glyphs["O"].pixels
        got = local_l1(a, b, patch=128, keypoints=[(64, 64)])
        assert got == l1(a, b)

    def test_keypoint_override(self, dejavu_128):
        a = dejavu_128.glyphs["D"].pixels
        b = np.zeros_like(a)
        v = local_l1(a, b, patch=32, keypoints=[(40, 40), (80, 80)])
        assert v > 0


class TestFrechet:
    def test_identical_gaussians(self):
        mu = np.arange(4.0)
        cov = np.diag([0.5, 1.0, 2.0, 4.0])
        assert frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-6)

    def test_unit_mean_shift(self):
        mu1 = np.zeros(3)
        mu2 = np.array([1.0, 0.0, 0.0])
        cov = np.diag([1.0, 2.0, 3.0])
        assert frechet_distance(mu1, cov, mu2, cov) == pytest.approx(1.0, abs=1e-6)

    def test_diagonal_scaling_case(self):
        mu = np.zeros(3)
        assert frechet_distance(mu, 4 * np.eye(3), mu, np.eye(3)) == pytest.approx(3.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(40, 6))
        b = rng.normal(size=(40, 6)) * 1.5 + 0.3
        mu1, c1 = feature_statistics(a)
        mu2, c2 = feature_statistics(b)
        d12 = frechet_distance(mu1, c1, mu2, c2)
        d21 = frechet_distance(mu2, c2, mu1, c1)
        assert d12 >= 0 and abs(d12 - d21) < 1e-5

    def test_non_finite_rejected(self):
        mu = np.zeros(3)
        bad = np.full((3, 3), np.nan)
        with pytest.raises(NonFiniteInput):
            frechet_distance(mu, bad, mu, np.eye(3))

    def test_self_fid_near_zero_highdim(self):
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(120, 32))
        assert fid_from_features(feats, feats) < 1e-3


class TestClassifiers:
    @pytest.fixture(scope="class")
    def records(self):
        return [synth_record(f"f{i}", f"fam{i}", size=32, seed=i) for i in range(8)]

    def test_content_classifier_learns(self, records):
        clf = train_feature_classifier(
            "content", records, ClassifierConfig(epochs=14, seed=0)
        )
        assert clf.val_accuracy > 0.9
        feats = clf.features(records[0].stacked())
        assert feats.shape == (26, 256)
        assert np.isfinite(feats).all()

    def test_style_classifier_above_chance(self, records):
        clf = train_feature_classifier("style", records, ClassifierConfig(epochs=14, seed=0))
        assert clf.val_accuracy > 5.0 / len(records)

    def test_bad_role(self, records):
        with pytest.raises(ValueError):
            train_feature_classifier("texture", records)


class TestReports:
    def _identity_pairs(self, n=2):
        pairs = []
        for i in range(n):
            rec = synth_record(f"r{i}", "fam", size=128, seed=i)
            gen = {ch: rec.glyphs[ch].pixels.copy() for ch in ALPHABET}
            pairs.append((gen, rec))
        return pairs

    def test_identity_scores(self):
        gen, rec = self._identity_pairs(1)[0]
        rep = evaluate_font(gen, rec)
        assert rep.aggregate["l1"] == 0.0
        assert rep.aggregate["ssim"] == pytest.approx(1.0, abs=1e-12)
        assert rep.aggregate["msssim"] == pytest.approx(1.0, abs=1e-12)
        locals_ = [v["local_l1"] for v in rep.per_char.values() if not np.isnan(v["local_l1"])]
        assert locals_ and max(locals_) == 0.0

    def test_corpus_self_fid(self, tmp_path):
        pairs = self._identity_pairs(2)
        # untrained nets still define a feature space; FID(X, X) must vanish
        import torch

        torch.manual_seed(0)
        style = FeatureClassifier("style", _ClassifierNet(2), ["r0", "r1"])
        content = FeatureClassifier("content", _ClassifierNet(26), list(ALPHABET))
        report = evaluate_corpus(pairs, style, content)
        assert report.aggregate["style_fid"] < 1e-3
        assert report.aggregate["content_fid"] < 1e-3
        json_path, csv_path = save_report(report, tmp_path)
        assert json_path.exists() and csv_path.exists()
        rows = csv_path.read_text().strip().splitlines()
        assert len(rows) == 1 + 2 * 26

    def test_missing_char_rejected(self):
        gen, rec = self._identity_pairs(1)[0]
        del gen["Z"]
        with pytest.raises(ShapeMismatch):
            evaluate_font(gen, rec)
