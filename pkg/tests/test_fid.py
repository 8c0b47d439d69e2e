import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from jiehua.evaluation import load_images
from jiehua.fid import (
    FeatureExtractor,
    FIDReport,
    GaussianStats,
    RepeatError,
    closed_form_fid,
    eval_protocol,
    extract_features,
    fid,
    fit_gaussian,
    matrix_sqrt_psd,
)
from jiehua.tensor import Rng
from jiehua.vision.data import synth_style_corpus


def _stats(mu, sigma):
    mu = np.atleast_1d(np.asarray(mu, float))
    return GaussianStats(100, mu, np.atleast_2d(np.asarray(sigma, float)))


def _scipy_fid(mu1, s1, mu2, s2):
    covmean = linalg.sqrtm(s1 @ s2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean))


def _random_psd(r, d, rank=None):
    a = r.standard_normal((d, rank or d))
    return a @ a.T / d


def test_identical_gaussians_score_zero():
    s = _stats([1.0, 2.0], np.eye(2))
    assert fid(s, s) == pytest.approx(0.0, abs=1e-10)


def test_mean_shift_only():
    assert fid(_stats([0, 0], np.eye(2)), _stats([3, 4], np.eye(2))) == pytest.approx(25.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_one_dimensional_closed_form(seed):
    r = np.random.default_rng(seed)
    m1, m2 = r.normal(size=2)
    v1, v2 = r.uniform(0.1, 3.0, 2)
    expect = (m1 - m2) ** 2 + (np.sqrt(v1) - np.sqrt(v2)) ** 2
    assert fid(_stats(m1, v1), _stats(m2, v2)) == pytest.approx(expect, abs=1e-9)


def test_equal_covariances_reduce_to_mean_term():
    r = np.random.default_rng(0)
    sigma = _random_psd(r, 6)
    mu1, mu2 = r.normal(size=6), r.normal(size=6)
    assert fid(_stats(mu1, sigma), _stats(mu2, sigma)) == pytest.approx(np.sum((mu1 - mu2) ** 2), abs=1e-8)


def test_matches_scipy_on_random_pairs():
    r = np.random.default_rng(1)
    for _ in range(50):
        d = int(r.integers(2, 9))
        s1, s2 = _random_psd(r, d), _random_psd(r, d)
        mu1, mu2 = r.normal(size=d), r.normal(size=d)
        assert fid(_stats(mu1, s1), _stats(mu2, s2)) == pytest.approx(_scipy_fid(mu1, s1, mu2, s2), abs=1e-6)


def test_matrix_sqrt_reconstructs_psd():
    r = np.random.default_rng(2)
    worst = 0.0
    for i in range(1000):
        d = int(r.integers(1, 10))
        a = _random_psd(r, d, rank=int(r.integers(1, d + 1)) if i % 3 == 0 else None)
        root = matrix_sqrt_psd(a)
        assert np.allclose(root, root.T)
        assert np.linalg.eigvalsh(root).min() > -1e-10
        worst = max(worst, np.max(np.abs(root @ root - a)) / max(1.0, np.max(np.abs(a))))
    assert worst < 1e-8


def test_matrix_sqrt_rejects_asymmetry():
    with pytest.raises(ValueError, match="symmetric"):
        matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="square"):
        matrix_sqrt_psd(np.ones((2, 3)))
    # float round-off stays inside the relative tolerance
    a = np.array([[1e6, 1.0], [1.0 + 1e-3, 1e6]])
    assert matrix_sqrt_psd(a).shape == (2, 2)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimensions"):
        fid(_stats([0, 0], np.eye(2)), _stats([0, 0, 0], np.eye(3)))


def test_fit_gaussian_unbiased_and_symmetric():
    feats = np.random.default_rng(3).normal(size=(50, 4))
    s = fit_gaussian(feats)
    assert np.allclose(s.sigma, np.cov(feats, rowvar=False))
    assert np.array_equal(s.sigma, s.sigma.T)
    assert s.n == 50 and s.dim == 4
    with pytest.raises(ValueError):
        fit_gaussian(feats[:1])


def test_monte_carlo_estimate_near_closed_form():
    r = np.random.default_rng(4)
    d = 8
    mu1, mu2 = r.normal(size=d), r.normal(size=d) * 0.5
    s1, s2 = _random_psd(r, d) + 0.1 * np.eye(d), _random_psd(r, d) + 0.1 * np.eye(d)
    truth = closed_form_fid(mu1, s1, mu2, s2)
    a = r.multivariate_normal(mu1, s1, 10_000)
    b = r.multivariate_normal(mu2, s2, 10_000)
    est = fid(fit_gaussian(a), fit_gaussian(b))
    assert abs(est - truth) / truth < 0.05


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_symmetric_and_nonnegative(seed, d):
    r = np.random.default_rng(seed)
    a = _stats(r.normal(size=d), _random_psd(r, d, rank=int(r.integers(1, d + 1))))
    b = _stats(r.normal(size=d), _random_psd(r, d))
    ab, ba = fid(a, b), fid(b, a)
    assert ab >= 0 and ba >= 0
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-8)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return synth_style_corpus(24, 64, Rng(0), tmp_path_factory.mktemp("fid_corpus"))


def _domain_images(manifest, domain):
    return load_images(manifest.by_domain(domain))


def test_extractor_deterministic_and_locked():
    a, b = FeatureExtractor(), FeatureExtractor()
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert all(p.locked for p in a.parameters())
    imgs = Rng(1).uniform(0, 1, (5, 32, 32, 3))
    f = extract_features(a, imgs)
    assert f.shape == (5, 64) and f.dtype == np.float64
    assert np.array_equal(f, extract_features(b, imgs, chunk=2))
    with pytest.raises(ValueError):
        extract_features(a, np.zeros((0, 32, 32, 3)))


def test_extractor_separates_styles(corpus):
    ext = FeatureExtractor()
    a = extract_features(ext, _domain_images(corpus, "jiehua"))
    b = extract_features(ext, _domain_images(corpus, "other"))
    half = len(a) // 2
    within = fid(fit_gaussian(a[:half]), fit_gaussian(a[half:]))
    across = fid(fit_gaussian(a[:half]), fit_gaussian(b[:half]))
    assert across > 5 * within


def test_protocol_replaying_reference_scores_near_zero(corpus):
    ref = _domain_images(corpus, "jiehua")
    report = eval_protocol(lambda n, rng: ref[:n], ref, repeats=3, n_samples=len(ref))
    assert len(report.scores) == 3
    assert report.mean <= 1e-6
    assert report.config["mode"] == "set" and report.config["n_reference"] == len(ref)


def test_protocol_seeds_each_repeat_independently(corpus):
    ref = _domain_images(corpus, "jiehua")
    seen = []

    def gen(n, rng):
        seen.append(rng.uniform(0, 1, (1,))[0])
        return rng.uniform(0, 1, (n, 64, 64, 3))

    r1 = eval_protocol(gen, ref, repeats=3, rng=Rng(5), n_samples=4)
    r2 = eval_protocol(gen, ref, repeats=3, rng=Rng(5), n_samples=4)
    assert r1.scores == r2.scores
    assert len(set(seen[:3])) == 3 and seen[:3] == seen[3:]


def test_protocol_reports_failing_repeat(corpus):
    ref = _domain_images(corpus, "jiehua")
    calls = []

    def gen(n, rng):
        calls.append(n)
        if len(calls) == 3:
            raise RuntimeError("boom")
        return ref[:n]

    with pytest.raises(RepeatError, match="repeat 2"):
        eval_protocol(gen, ref, repeats=5, n_samples=4)


def test_single_image_mode(corpus):
    ref = _domain_images(corpus, "jiehua")
    report = eval_protocol(lambda n, rng: ref[:n], ref, repeats=4, n_samples=1, single_image=True, rng=Rng(2))
    assert report.config["mode"] == "single_image"
    assert all(s >= 0 for s in report.scores)
    one = eval_protocol(lambda n, rng: ref[:1], ref[:1], repeats=2, n_samples=1, single_image=True)
    assert one.scores == [0.0, 0.0]


def test_protocol_validation(corpus):
    ref = _domain_images(corpus, "jiehua")
    with pytest.raises(ValueError):
        eval_protocol(lambda n, rng: ref[:n], ref, repeats=0)
    with pytest.raises(ValueError):
        eval_protocol(lambda n, rng: ref[:n], ref, n_samples=1)
    with pytest.raises(ValueError):
        eval_protocol(lambda n, rng: ref[:n], ref[:1], n_samples=4)


def test_report_round_trip():
    rep = FIDReport([0.1, 0.25, 1 / 3], {"repeats": 3, "mode": "set"})
    text = rep.to_text()
    assert text.splitlines()[0].startswith("# ")
    back = FIDReport.from_text(text)
    assert back.scores == rep.scores and back.mean == rep.mean
    with pytest.raises(ValueError):
        FIDReport.from_text(text.replace(f"mean {rep.mean!r}", "mean 9.0"))
    with pytest.raises(ValueError):
        FIDReport.from_text("# repeats 3\n")


def test_fit_gaussian_monte_carlo():
    r = np.random.default_rng(6)
    m, S = r.normal(size=4), _random_psd(r, 4) + 0.5 * np.eye(4)
    s = fit_gaussian(r.multivariate_normal(m, S, 10_000))
    assert np.linalg.norm(s.mu - m) <= 0.05 * max(np.linalg.norm(m), 1.0)
    assert np.linalg.norm(s.sigma - S) <= 0.05 * np.linalg.norm(S)


def test_opposite_styles_are_farther_than_within_style(corpus):
    ext = FeatureExtractor()
    a = extract_features(ext, _domain_images(corpus, "jiehua"))
    b = extract_features(ext, _domain_images(corpus, "other"))
    within = np.mean([np.linalg.norm(a[i] - a[j]) for i in range(len(a)) for j in range(i + 1, len(a))])
    assert np.linalg.norm(a[0] - b[0]) > within
    assert np.mean(np.linalg.norm(a[:, None] - b[None], axis=-1)) > within
