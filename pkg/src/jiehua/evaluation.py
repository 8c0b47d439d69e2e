"""Checkpoint evaluation: turn any trained variant into an FID sampling callback."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .controlnet import GraftedDenoiser
from .cyclegan import translate
from .diffusion import sample
from .fid import FIDReport, FeatureExtractor, eval_protocol
from .tensor import checkpoint as ckpt
from .tensor.rng import Rng
from .training import load_cyclegan, load_diffusion
from .vision.data import EVAL_PROMPT_TEMPLATE, STYLE_A_ARTIST, DatasetManifest
from .vision.imageio import load_image

EVAL_PROMPT = EVAL_PROMPT_TEMPLATE.format(artist=STYLE_A_ARTIST)


def _pick(pool: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    return pool[rng.choice(len(pool), n, replace=len(pool) < n)]


def load_edges(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([load_image(manifest.root / r.edge_path)[:, :, 0] for r in manifest.records])


def load_images(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([load_image(manifest.root / r.image_path) for r in manifest.records])


def diffusion_sampler(model, embedder, schedule, prompt: str = EVAL_PROMPT, guidance_scale: float = 3.0, edge_pool=None):
    """Callback ``(n, rng) -> images``. A grafted model draws its control maps from ``edge_pool``."""
    grafted = isinstance(model, GraftedDenoiser)
    if grafted and edge_pool is None:
        raise ValueError("a grafted model needs a pool of edge maps to sample from")

    def generate(n: int, rng: Rng) -> np.ndarray:
        control = _pick(edge_pool, n, rng.child("edges")) if grafted else None
        return sample(model, embedder, schedule, prompt, control, guidance_scale, rng.child("sample"), n=n)

    return generate


def translation_sampler(state, sources: np.ndarray, direction: str = "X->Y"):
    def generate(n: int, rng: Rng) -> np.ndarray:
        return translate(state, _pick(sources, n, rng), direction)

    return generate


def sampler_for_checkpoint(path, manifest: DatasetManifest, guidance_scale: float = 3.0, prompt: str = EVAL_PROMPT):
    """Sampling callback for a checkpoint of any variant, plus its metadata.

    Diffusion variants sample the evaluation prompt (grafted ones under
    target-style edge maps); CycleGAN translates the other-style images.
    """
    _, meta = ckpt.load(path)
    if meta.get("kind") == "cyclegan":
        state, meta = load_cyclegan(path)
        return translation_sampler(state, load_images(manifest.by_domain("other"))), meta
    model, embedder, schedule, meta = load_diffusion(path)
    edges = load_edges(manifest.by_domain("jiehua")) if isinstance(model, GraftedDenoiser) else None
    return diffusion_sampler(model, embedder, schedule, prompt, guidance_scale, edges), meta


def evaluate_checkpoint(
    path,
    manifest: DatasetManifest,
    seed: int = 0,
    repeats: int = 10,
    n_samples: int = 64,
    n_reference: int | None = None,
    single_image: bool = False,
    guidance_scale: float = 3.0,
) -> FIDReport:
    """FID of a checkpoint against the target-style images of ``manifest``."""
    generate, meta = sampler_for_checkpoint(path, manifest, guidance_scale)
    reference = manifest.by_domain("jiehua")
    if not len(reference):
        raise ValueError("manifest has no target-style records to compare against")
    report = eval_protocol(
        generate,
        reference,
        repeats,
        Rng(seed).child("eval"),
        n_samples,
        n_reference,
        single_image,
        FeatureExtractor(),
    )
    report.config.update(kind=meta["kind"], step=meta["step"], seed=seed, checkpoint=Path(path).name)
    return report
