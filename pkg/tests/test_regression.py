"""Regression baselines measured on the shared 64x64 pipeline run (fixed seeds)."""

import math

import numpy as np
import pytest

from jiehua.cyclegan import translate
from jiehua.diffusion import sample
from jiehua.evaluation import load_images
from jiehua.tensor import Rng
from jiehua.training import load_cyclegan, load_diffusion
from jiehua.vision import canny, edge_density
from jiehua.vision.data import EVAL_PROMPT_TEMPLATE, STYLE_A_ARTIST, STYLE_B_ARTIST, synth_images

pytestmark = pytest.mark.slow


def _density(images):
    return float(np.mean([edge_density(canny(np.rint(img * 255) / 255)) for img in images]))


def test_base_loss_after_2000_steps(trained_pipeline):
    rows = trained_pipeline["base_metrics"]
    assert len(rows) == 2000
    final = np.mean([r["loss"] for r in rows[-100:]])
    assert final < 0.7 * rows[0]["loss"]


def test_finetune_loss_finite(trained_pipeline):
    assert all(math.isfinite(r["loss"]) for r in trained_pipeline["cn_metrics"])


def test_cyclegan_losses_finite_and_cycle_drops(trained_pipeline):
    rows = trained_pipeline["cg_metrics"]
    assert len(rows) == 3000
    keys = ("disc_X", "disc_Y", "gen_adv_G", "gen_adv_F", "cycle")
    assert all(math.isfinite(r[k]) for r in rows for k in keys)
    # measured 0.219 of the step-0 value (criterion 8 reports the 0.2 target)
    assert np.mean([r["cycle"] for r in rows[-100:]]) < 0.25 * rows[0]["cycle"]


def test_style_prompts_separate_by_edge_density(trained_pipeline):
    model, embedder, schedule, _ = load_diffusion(trained_pipeline["base"])
    rng = Rng(0).child("style-prompts")
    dens = {}
    for artist in (STYLE_A_ARTIST, STYLE_B_ARTIST):
        prompt = EVAL_PROMPT_TEMPLATE.format(artist=artist)
        dens[artist] = _density(sample(model, embedder, schedule, prompt, None, 3.0, rng.child(artist), n=20))
    assert dens[STYLE_A_ARTIST] > dens[STYLE_B_ARTIST]


def test_cyclegan_shifts_edge_density_toward_target(trained_pipeline):
    manifest = trained_pipeline["manifest"]
    state, _ = load_cyclegan(trained_pipeline["checkpoints"]["cyclegan"])
    target = _density(load_images(manifest.by_domain("jiehua")))
    sources = load_images(manifest.by_domain("other"))
    before = _density(sources)
    after = _density(translate(state, sources, "X->Y"))
    assert abs(after - target) < abs(before - target)


def test_round_trip_improves_on_held_out(trained_pipeline):
    held_out = synth_images(16, 64, Rng(12345).child("held-out"), "other")
    errors = {}
    for name, path in (("initial", trained_pipeline["cyclegan_initial"]), ("trained", trained_pipeline["checkpoints"]["cyclegan"])):
        state, _ = load_cyclegan(path)
        back = translate(state, translate(state, held_out, "X->Y"), "Y->X")
        errors[name] = float(np.abs(back - held_out).mean())
    assert errors["trained"] < errors["initial"]
