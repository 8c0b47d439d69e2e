"""Shared fixtures. ``trained_pipeline`` trains every model variant once per
session on the 64x64 synthetic corpus and evaluates each with the 10-repeat
FID protocol; the acceptance and regression suites both read from it."""

import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from jiehua.config import RunConfig  # noqa: E402
from jiehua.evaluation import evaluate_checkpoint  # noqa: E402
from jiehua.tensor import Rng  # noqa: E402
from jiehua.training import MetricLog, make_trainer  # noqa: E402
from jiehua.vision.data import synth_style_corpus  # noqa: E402

PIPELINE_SEED = 0
PER_STYLE = 44
RESOLUTION = 64
SHARED = dict(seed=PIPELINE_SEED, resolution=RESOLUTION, base_channels=8, groups=4)
BASE = dict(SHARED, batch_size=8, gradient_accumulation_steps=1, total_steps=2000, learning_rate=2e-3,
            checkpoint_every=500)
CONTROLNET = dict(SHARED, batch_size=2, gradient_accumulation_steps=5, total_steps=500, learning_rate=1e-3,
                  checkpoint_every=250)
CYCLEGAN = dict(SHARED, batch_size=1, total_steps=3000, cyclegan_channels=8, cyclegan_res_blocks=4,
                checkpoint_every=1000)
FID_REPEATS = 10
FID_SAMPLES = 8

# criterion number -> printed line, filled in by test_acceptance
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def trained_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cpu0, wall0 = time.process_time(), time.perf_counter()
    manifest = synth_style_corpus(PER_STYLE, RESOLUTION, Rng(PIPELINE_SEED).child("corpus"), root / "data")

    base = make_trainer("diffusion-base", RunConfig(**BASE), manifest, root / "base").run()
    cn = make_trainer("controlnet", RunConfig(**CONTROLNET), manifest, root / "cn", base_checkpoint=base).run()
    cg = make_trainer("cyclegan", RunConfig(**CYCLEGAN), manifest, root / "cg").run()
    train_cpu = time.process_time() - cpu0

    checkpoints = {
        "untrained_graft": root / "cn" / "checkpoints" / "step_000000.ckpt",
        "finetuned": Path(cn),
        "cyclegan": Path(cg),
    }
    reports = {
        name: evaluate_checkpoint(path, manifest, PIPELINE_SEED, FID_REPEATS, FID_SAMPLES)
        for name, path in checkpoints.items()
    }
    return {
        "root": root,
        "manifest": manifest,
        "base": Path(base),
        "cyclegan_initial": root / "cg" / "checkpoints" / "step_000000.ckpt",
        "checkpoints": checkpoints,
        "reports": reports,
        "base_metrics": MetricLog.read(root / "base" / "metrics.tsv"),
        "cn_metrics": MetricLog.read(root / "cn" / "metrics.tsv"),
        "cg_metrics": MetricLog.read(root / "cg" / "metrics.tsv"),
        "train_cpu": train_cpu,
        "cpu": time.process_time() - cpu0,
        "wall": time.perf_counter() - wall0,
    }
