"""Frechet distance between Gaussian fits of image features.

Features come from a small fixed random conv net rather than Inception, so
scores are comparable only with each other, never with published FID values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import autograd as ag
from .tensor.autograd import Tensor, no_grad
from .tensor.nn import Conv2d, Module
from .tensor.rng import Rng
from .vision.data import DatasetManifest
from .vision.imageio import load_image

EXTRACTOR_SEED = 1729
FEATURE_DIM = 64
SYMMETRY_TOL = 1e-6


class FeatureExtractor(Module):
    """Three stride-2 conv+tanh stages and a global average pool. Never trained."""

    def __init__(self, seed: int = EXTRACTOR_SEED, dim: int = FEATURE_DIM, width: int = 32):
        rng = Rng(seed)
        self.seed = seed
        self.dim = dim
        self.conv1 = Conv2d(3, width, 3, stride=2, padding=1, rng=rng.child("conv1"))
        self.conv2 = Conv2d(width, width, 3, stride=2, padding=1, rng=rng.child("conv2"))
        self.conv3 = Conv2d(width, dim, 3, stride=2, padding=1, rng=rng.child("conv3"))
        self.set_locked(True)
        self.assign_names("extractor.")

    def forward(self, x: Tensor) -> Tensor:
        h = ag.tanh(self.conv1(x))
        h = ag.tanh(self.conv2(h))
        h = ag.tanh(self.conv3(h))
        return ag.mean(h, axis=(1, 2))


def extract_features(extractor: FeatureExtractor, images, chunk: int = 64) -> np.ndarray:
    """``(n, d)`` float64 features for NHWC images in [0, 1]; rows follow input order."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"need a nonempty NHWC batch, got shape {images.shape}")
    rows = []
    with no_grad():
        for start in range(0, images.shape[0], chunk):
            x = images[start : start + chunk] * 2.0 - 1.0
            rows.append(extractor(Tensor(x)).data.astype(np.float64))
    return np.concatenate(rows, axis=0)


@dataclass
class GaussianStats:
    n: int
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_gaussian(features) -> GaussianStats:
    """Column means and the unbiased (n - 1) covariance."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    n = f.shape[0]
    if n < 2:
        raise ValueError(f"fit_gaussian needs at least 2 samples, got {n}")
    mu = f.mean(axis=0)
    centered = f - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(n, mu, 0.5 * (sigma + sigma.T))


def matrix_sqrt_psd(a) -> np.ndarray:
    """Symmetric square root through eigh, negative eigenvalues clamped to 0."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"need a square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    w, q = np.linalg.eigh(0.5 * (a + a.T))
    root = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T
    return 0.5 * (root + root.T)


def fid(s1: GaussianStats, s2: GaussianStats) -> float:
    if s1.dim != s2.dim:
        raise ValueError(f"feature dimensions differ: {s1.dim} vs {s2.dim}")
    diff = s1.mu - s2.mu
    root1 = matrix_sqrt_psd(s1.sigma)
    inner = root1 @ s2.sigma @ root1
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    value = float(diff @ diff + np.trace(s1.sigma) + np.trace(s2.sigma) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def closed_form_fid(mu1, sigma1, mu2, sigma2) -> float:
    """FID of two known Gaussians, for oracle comparisons."""
    return fid(
        GaussianStats(0, np.asarray(mu1, float), np.asarray(sigma1, float)),
        GaussianStats(0, np.asarray(mu2, float), np.asarray(sigma2, float)),
    )


@dataclass
class FIDReport:
    scores: list[float]
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    def to_text(self) -> str:
        lines = [f"# {k} {self.config[k]}" for k in sorted(self.config)]
        lines += [repr(float(s)) for s in self.scores]
        lines.append(f"mean {self.mean!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FIDReport":
        config, scores, mean = {}, [], None
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                config[key] = value
            elif line.startswith("mean "):
                mean = float(line.split()[1])
            else:
                scores.append(float(line))
        if mean is None or not scores:
            raise ValueError("malformed FID report: missing scores or mean line")
        report = cls(scores, config)
        if not math.isclose(report.mean, mean, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"report mean {mean} disagrees with its scores ({report.mean})")
        return report


class RepeatError(RuntimeError):
    pass


def _reference_images(reference, root=None) -> np.ndarray:
    if isinstance(reference, DatasetManifest):
        return np.stack([load_image(reference.root / r.image_path) for r in reference.records])
    return np.asarray(reference, dtype=np.float32)


def eval_protocol(
    generator: Callable[[int, Rng], np.ndarray],
    reference,
    repeats: int = 10,
    rng: Rng | None = None,
    n_samples: int = 64,
    n_reference: int | None = None,
    single_image: bool = False,
    extractor: FeatureExtractor | None = None,
) -> FIDReport:
    """Average FID over ``repeats`` independent generate-and-compare rounds.

    ``generator(n, rng)`` returns ``n`` NHWC images in [0, 1]. ``reference`` is
    a manifest (or an image array). Each repeat compares the generated batch
    with ``n_reference`` reference images drawn without replacement (all of
    them when ``None``). With ``single_image`` each repeat instead uses one
    random reference image and only the squared mean distance, since one
    image has no covariance.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if n_samples < (1 if single_image else 2):
        raise ValueError("n_samples too small for covariance estimation")
    rng = rng or Rng(0)
    extractor = extractor or FeatureExtractor()
    ref_images = _reference_images(reference)
    n_ref_total = ref_images.shape[0]
    if not single_image and n_ref_total < 2:
        raise ValueError("reference set needs at least 2 images")
    ref_feats = extract_features(extractor, ref_images)

    scores = []
    for r in range(repeats):
        rep_rng = rng.child(f"repeat{r}")
        try:
            generated = np.asarray(generator(n_samples, rep_rng.child("generate")), dtype=np.float32)
        except Exception as exc:
            raise RepeatError(f"generator failed in repeat {r}: {exc}") from exc
        gen_feats = extract_features(extractor, generated)
        draw = rep_rng.child("reference")
        if single_image:
            ref = ref_feats[draw.integers(0, n_ref_total)]
            diff = gen_feats.mean(axis=0) - ref
            scores.append(float(diff @ diff))
            continue
        if n_reference is None or n_reference >= n_ref_total:
            chosen = ref_feats
        else:
            chosen = ref_feats[np.sort(draw.choice(n_ref_total, n_reference, replace=False))]
        scores.append(fid(fit_gaussian(gen_feats), fit_gaussian(chosen)))

    config = {
        "extractor_seed": extractor.seed,
        "feature_dim": extractor.dim,
        "n_samples": n_samples,
        "n_reference": n_ref_total if n_reference is None else min(n_reference, n_ref_total),
        "repeats": repeats,
        "mode": "single_image" if single_image else "set",
    }
    return FIDReport(scores, config)
