import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from angiovid import metrics as M
from angiovid.errors import MetricError, ShapeError

from oracles import constant_ssim, gaussian_frechet_1d, pairwise_auroc, psnr_scalar, recall_enum

# -- PSNR


def test_psnr_examples():
    a = np.zeros((8, 8))
    assert M.psnr(a, a) == math.inf
    assert M.psnr(a, np.ones((8, 8))) == 0.0
    assert M.psnr(a, np.full((8, 8), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    assert M.psnr(a, np.full((8, 8), 0.5)) == pytest.approx(psnr_scalar(a, np.full((8, 8), 0.5)))
    with pytest.raises(ShapeError):
        M.psnr(a, np.zeros((4, 4)))


# -- SSIM


def test_ssim_identity_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert M.ssim(a, a) == pytest.approx(1.0)
    assert M.ssim(a, b) == pytest.approx(M.ssim(b, a))


def test_ssim_constant_images():
    v = M.ssim(np.full((16, 16), 0.3), np.full((16, 16), 0.7))
    assert v == pytest.approx(constant_ssim(0.3, 0.7), abs=1e-12)
    assert v == pytest.approx(0.724185, abs=1e-6)


def test_ssim_agrees_with_skimage():
    rng = np.random.default_rng(1)
    a = rng.random((40, 40))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    # skimage crops a 5-pixel border after full-image filtering; both average valid windows only
    assert M.ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        M.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- Dice


def test_dice_examples():
    t = np.zeros((4, 4), int)
    t[0, :4] = 1
    p = np.zeros((4, 4), int)
    p[0, :2] = 1
    p[1, :2] = 1
    assert M.dice(t, t) == 1.0
    assert M.dice(t, np.roll(t, 2, axis=0)) == 0.0
    assert M.dice(p, t) == 0.5
    assert M.dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(MetricError):
        M.dice(np.full((2, 2), 0.5), np.ones((2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_identity_suite(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16))
    m = (rng.random((16, 16)) > 0.5).astype(int)
    assert M.ssim(a, a) == pytest.approx(1.0)
    assert M.psnr(a, a) == math.inf
    assert M.dice(m, m) == 1.0


# -- perceptual distance


def test_perceptual_contract():
    rng = np.random.default_rng(2)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    bb = M.default_backbone()
    assert M.perceptual_distance(a, a, bb) == 0.0
    assert M.perceptual_distance(a, b, bb) == pytest.approx(M.perceptual_distance(b, a, bb))
    assert M.perceptual_distance(a, b, bb) > 0


def test_perceptual_monotone_in_noise():
    rng = np.random.default_rng(3)
    bb = M.default_backbone()
    medians = []
    for amp in (0.02, 0.05, 0.1, 0.2):
        d = []
        for _ in range(20):
            a = rng.random((32, 32))
            d.append(M.perceptual_distance(a, np.clip(a + rng.normal(0, amp, a.shape), 0, 1), bb))
        medians.append(np.median(d))
    assert all(y > x for x, y in zip(medians, medians[1:]))


# -- Frechet / FVD


def test_frechet_analytic():
    assert M.frechet_distance([0], [[1]], [1], [[1]]) == pytest.approx(1.0, abs=1e-6)
    assert M.frechet_distance([0], [[1]], [0], [[4]]) == pytest.approx(1.0, abs=1e-6)
    assert M.frechet_distance([0.3], [[2.0]], [-1], [[0.5]]) == pytest.approx(gaussian_frechet_1d(0.3, 2, -1, 0.5))


def test_frechet_symmetric_and_self_zero():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(50, 6)), rng.normal(1, 2, size=(40, 6))
    (m1, s1), (m2, s2) = M.gaussian_stats(x), M.gaussian_stats(y)
    assert M.frechet_distance(m1, s1, m1, s1) <= 1e-6
    assert M.frechet_distance(m1, s1, m2, s2) == pytest.approx(M.frechet_distance(m2, s2, m1, s1), rel=1e-9)
    # diagonal covariances have a closed form
    d1, d2 = np.diag([1.0, 4.0]), np.diag([9.0, 1.0])
    want = 4 + (1 + 9 - 2 * 3) + (4 + 1 - 2 * 2)
    assert M.frechet_distance([0, 0], d1, [2, 0], d2) == pytest.approx(want)


def test_frechet_singular_covariance():
    # rank-deficient covariances: still finite and nonnegative
    x = np.random.default_rng(5).normal(size=(3, 10))
    m, s = M.gaussian_stats(x)
    d = M.frechet_distance(m, s, m + 0.1, s)
    assert math.isfinite(d) and d >= 0


def test_fvd_self_and_order():
    rng = np.random.default_rng(6)
    vids = [rng.random((12, 32, 32)).astype(np.float32) for _ in range(4)]
    other = [np.clip(v + 0.2, 0, 1) for v in vids]
    ex = M.default_video_extractor()
    assert M.fvd(vids, vids, ex) <= 1e-6
    assert M.fvd(vids, other, ex) > 0
    assert M.fvd(vids, other, ex) == pytest.approx(M.fvd(vids[::-1], other[::-1], ex), rel=1e-9)
    with pytest.raises(MetricError):
        M.fvd(vids[:1], vids[:1], ex)


def test_video_quality_report():
    rng = np.random.default_rng(7)
    vids = [rng.random((12, 16, 16)).astype(np.float32) for _ in range(3)]
    r = M.video_quality(vids, vids)
    assert r.ssim == pytest.approx(1.0) and r.psnr == math.inf and r.perceptual == 0.0 and r.fvd <= 1e-6
    assert len(r.per_video) == 3
    assert set(r.as_record()) == {"fvd", "ssim", "psnr", "perceptual"}


# -- AUROC / AUPR


def test_auroc_examples():
    assert M.auroc([1, 0, 1, 0], [0.9, 0.8, 0.4, 0.1]) == 0.75
    assert M.auroc([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4]) == 1.0
    assert M.aupr([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4]) == 1.0
    with pytest.raises(MetricError, match="class 1"):
        M.auroc([1, 1, 1], [0.1, 0.2, 0.3])
    with pytest.raises(MetricError, match="class 2"):
        M.auroc([0, 1, 0, 1], np.random.default_rng(0).random((4, 3)))


def test_auroc_bruteforce_exhaustive():
    rng = np.random.default_rng(8)
    for n in range(2, 13):
        for _ in range(40):
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            s = rng.integers(0, 5, n) / 4.0  # coarse grid forces ties
            assert M.auroc(y, s) == pytest.approx(pairwise_auroc(y, s), abs=1e-12)
            assert M.auroc(y, -s) == pytest.approx(1 - M.auroc(y, s), abs=1e-12)


def test_aupr_envelope_hand_value():
    # ranking P N P N: operating points (r=.5, p=1), (r=.5, p=.5), (r=1, p=2/3), (r=1, p=.5)
    # envelope gives 0.5*1 + 0.5*(2/3)
    assert M.aupr([1, 0, 1, 0], [0.9, 0.8, 0.4, 0.1]) == pytest.approx(0.5 + 1 / 3)


def test_macro_average():
    y = np.array([0, 1, 2, 0, 1, 2])
    s = np.eye(3)[y] + 0.01
    assert M.auroc(y, s) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, rng.integers(0, 2, 10)]
    s = rng.random(12)
    p = rng.permutation(12)
    assert M.auroc(y, s) == pytest.approx(M.auroc(y[p], s[p]))
    assert M.aupr(y, s) == pytest.approx(M.aupr(y[p], s[p]))


# -- Recall@K


def _mate_at(ranks, size=25):
    ranked, qp, gallery = [], [], {}
    for q, r in enumerate(ranks):
        ids = [f"q{q}_x{j}" for j in range(size)]
        ids[r - 1] = f"q{q}_mate"
        for g in ids:
            gallery[g] = f"P{q}" if g.endswith("mate") else f"other{q}_{g}"
        ranked.append(ids)
        qp.append(f"P{q}")
    return ranked, qp, gallery


def test_recall_enumeration():
    ranked, qp, gallery = _mate_at([1, 3, 20])
    r = M.recall_at_k(ranked, qp, gallery)
    want, mean = recall_enum([1, 3, 20])
    assert r.recall == pytest.approx(want)
    assert r.recall == pytest.approx({1: 1 / 3, 5: 2 / 3, 10: 2 / 3})
    assert r.mean_recall == pytest.approx(mean) and r.mean_recall == pytest.approx(0.5556, abs=1e-4)


def test_recall_excludes_mateless_queries():
    ranked, qp, gallery = _mate_at([1, 2])
    ranked.append(["q0_x1"])
    qp.append("nobody")
    r = M.recall_at_k(ranked, qp, gallery)
    assert r.excluded == 1 and r.n_queries == 2 and r.recall[1] == 0.5


# -- summaries


def test_summarize_examples():
    s = M.summarize([0.5, 0.5, 0.5])
    assert (s.ci95_low, s.ci95_high, s.se) == (0.5, 0.5, 0.0)
    s = M.summarize([0.4, 0.6])
    assert s.mean == pytest.approx(0.5) and s.se == pytest.approx(0.1)
    assert (s.ci95_low, s.ci95_high) == pytest.approx((0.304, 0.696))
    assert M.summarize([0.5, 0.5], [0.5, 0.5]).p_value is None
    with pytest.raises(MetricError):
        M.summarize([1.0])


def test_summarize_paired_pvalue():
    from scipy import stats
    a, b = [0.7, 0.72, 0.69, 0.75, 0.71], [0.6, 0.65, 0.66, 0.62, 0.7]
    assert M.summarize(a, b).p_value == pytest.approx(stats.ttest_rel(a, b).pvalue)


def test_write_table(tmp_path):
    M.write_table(tmp_path / "t.csv", [{"metric": "ssim", "split": "test", "seed": 0, "value": 0.5}])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["metric,split,seed,value", "ssim,test,0,0.5"]
