"""Training loops with checkpoints, resume and a tab-separated metric log.

Every run directory looks like::

    run_manifest.json       written atomically when the run starts
    metrics.tsv             header row, then one row per optimizer step
    checkpoints/step_NNNNNN.ckpt
    checkpoints/final.ckpt

All random streams (data order, prompt dropout, diffusion noise) live in the
checkpoint metadata, so a resumed run continues the exact same streams.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .config import RunConfig
from .controlnet import GraftedDenoiser, finetune_step, graft
from .cyclegan import CycleGANState, cyclegan_train_step
from .diffusion import Denoiser, DenoiserConfig, TextEmbedder, diffusion_train_step, make_schedule
from .tensor import checkpoint as ckpt
from .tensor.optim import AdamState, LrSchedule, accumulate_and_maybe_step, lr_at_step
from .tensor.rng import Rng
from .vision.data import DatasetManifest, TripletSample, prompt_dropout

VARIANTS = ("diffusion-base", "controlnet", "cyclegan")


class TrainingError(RuntimeError):
    pass


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricLog:
    """Append-only TSV. Resuming drops rows past the restored step, which were
    written after the last checkpoint and will be produced again."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = list(columns)

    def start(self, resume_step: int | None) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = "\t".join(self.columns) + "\n"
        if resume_step is None or not self.path.exists():
            self.path.write_text(header)
            return
        lines = self.path.read_text().splitlines(keepends=True)
        if not lines or lines[0] != header:
            raise TrainingError(f"{self.path}: header does not match this run")
        kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split("\t", 1)[0]) < resume_step]
        self.path.write_text("".join(kept))

    def append(self, row: dict) -> None:
        with self.path.open("a") as fh:
            fh.write("\t".join(_fmt(row[c]) for c in self.columns) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        lines = Path(path).read_text().splitlines()
        cols = lines[0].split("\t")
        return [{c: float(v) for c, v in zip(cols, ln.split("\t"))} for ln in lines[1:]]


def write_json_atomic(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def checkpoint_steps(cfg: RunConfig) -> list[int]:
    return list(range(0, cfg.total_steps, cfg.checkpoint_every))


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        resolution=cfg.resolution, base_channels=cfg.base_channels, groups=cfg.groups, text_dim=cfg.text_dim
    )


class Trainer:
    """Shared loop: build or restore state, then step, log and checkpoint."""

    variant = ""
    columns: tuple = ()

    def __init__(self, cfg: RunConfig, manifest: DatasetManifest, run_dir, command: str = ""):
        if manifest.resolution != cfg.resolution:
            raise TrainingError(
                f"manifest resolution {manifest.resolution} != config resolution {cfg.resolution}"
            )
        self.cfg = cfg
        self.manifest = manifest
        self.run_dir = Path(run_dir)
        self.command = command
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.log = MetricLog(self.run_dir / "metrics.tsv", self.columns)
        self.rng = Rng(cfg.seed).child(self.variant)
        self.streams: dict[str, Rng] = {}

    # subclass hooks
    def build(self) -> None:
        raise NotImplementedError

    def entries(self) -> list:
        raise NotImplementedError

    def restore(self, entries: dict, meta: dict) -> None:
        raise NotImplementedError

    def train_one(self, step: int) -> dict:
        raise NotImplementedError

    def extra_meta(self) -> dict:
        return {}

    @property
    def step(self) -> int:
        raise NotImplementedError

    # shared machinery
    def checkpoint_path(self, step: int) -> Path:
        return self.ckpt_dir / f"step_{step:06d}.ckpt"

    def final_path(self) -> Path:
        return self.ckpt_dir / "final.ckpt"

    def meta(self) -> dict:
        return {
            "kind": self.variant,
            "step": self.step,
            "config": self.cfg.portable_dict(),
            "rng": {k: r.get_state() for k, r in self.streams.items()},
            **self.extra_meta(),
        }

    def save(self, path) -> Path:
        ckpt.save(path, self.entries(), self.meta())
        return Path(path)

    def latest_checkpoint(self) -> Path | None:
        found = sorted(self.ckpt_dir.glob("step_*.ckpt"))
        return found[-1] if found else None

    def write_manifest(self) -> None:
        outputs = [self.checkpoint_path(s) for s in checkpoint_steps(self.cfg)] + [self.final_path()]
        outputs = [str(p.relative_to(self.run_dir)) for p in outputs]
        write_json_atomic(
            self.run_dir / "run_manifest.json",
            {
                "run_id": self.cfg.run_id(),
                "variant": self.variant,
                "command": self.command,
                "config": dataclasses.asdict(self.cfg),
                "checkpoints": outputs,
                "metric_log": self.log.path.name,
            },
        )

    def run(self, resume: bool = False, stop_after: int | None = None) -> Path:
        """Train to ``cfg.total_steps``; ``stop_after`` ends early (simulated interrupt)."""
        self.build()
        resume_step = None
        if resume:
            latest = self.latest_checkpoint()
            if latest is not None:
                entries, meta = ckpt.load(latest)
                if meta.get("kind") != self.variant:
                    raise TrainingError(f"{latest} is a {meta.get('kind')} checkpoint, not {self.variant}")
                self.restore(entries, meta)
                for k, state in meta["rng"].items():
                    self.streams[k].set_state(state)
                resume_step = self.step
        self.write_manifest()
        self.log.start(resume_step)
        every = self.cfg.checkpoint_every
        done = 0
        while self.step < self.cfg.total_steps:
            step = self.step
            if step % every == 0 and step != resume_step:
                self.save(self.checkpoint_path(step))
            row = self.train_one(step)
            self.log.append({"step": step, **row})
            done += 1
            if stop_after is not None and done >= stop_after:
                return self.latest_checkpoint()
        return self.save(self.final_path())


class _DiffusionTrainer(Trainer):
    columns = ("step", "lr", "loss")

    def _setup_common(self, samples):
        cfg = self.cfg
        if not samples:
            raise TrainingError("no training samples")
        self.samples = samples
        self.schedule = make_schedule(cfg.diffusion_T)
        self.lr_schedule = LrSchedule.for_run(
            cfg.learning_rate, cfg.lr_warmup_steps, cfg.total_steps, cfg.num_restarts
        )
        self.opt = AdamState()
        self.streams = {"data": self.rng.child("data"), "noise": self.rng.child("noise")}

    @property
    def step(self) -> int:
        return self.opt.step_count

    def _draw(self) -> list[TripletSample]:
        data = self.streams["data"]
        n = len(self.samples)
        idx = data.choice(n, self.cfg.batch_size, replace=n < self.cfg.batch_size)
        return [
            dataclasses.replace(self.samples[i], prompt=prompt_dropout(self.samples[i].prompt, self.cfg.prompt_dropout, data))
            for i in idx
        ]

    def train_one(self, step: int) -> dict:
        acc = self.cfg.gradient_accumulation_steps
        lr = lr_at_step(self.lr_schedule, step)
        losses = []
        for micro in range(1, acc + 1):
            losses.append(self.micro(self._draw()))
            accumulate_and_maybe_step(self.params, self.opt, self.lr_schedule, micro, acc)
        return {"lr": lr, "loss": float(np.mean(losses))}

    def extra_meta(self) -> dict:
        return {
            "denoiser": dataclasses.asdict(self.model_cfg),
            "vocabulary": sorted(self.embedder.vocab),
            "text_dim": self.embedder.dim,
            "diffusion_T": self.cfg.diffusion_T,
        }


class DiffusionBaseTrainer(_DiffusionTrainer):
    """Base denoiser and text embedder trained from scratch on every record."""

    variant = "diffusion-base"

    def build(self) -> None:
        samples = self.manifest.load_samples()
        self._setup_common(samples)
        cfg = self.cfg
        self.model_cfg = denoiser_config(cfg)
        self.embedder = TextEmbedder.from_prompts([s.prompt for s in samples], cfg.text_dim, self.rng.child("embedder"))
        self.model = Denoiser(self.model_cfg, self.rng.child("denoiser"))
        self.model.assign_names("denoiser.")
        self.embedder.assign_names("embedder.")
        self.params = self.model.parameters() + self.embedder.parameters()

    def micro(self, batch) -> float:
        return diffusion_train_step(batch, self.model, self.embedder, self.schedule, self.streams["noise"])

    def entries(self) -> list:
        return (
            ckpt.module_entries(self.model, "denoiser/")
            + ckpt.module_entries(self.embedder, "embedder/")
            + ckpt.adam_entries(self.opt, "adam/")
        )

    def restore(self, entries: dict, meta: dict) -> None:
        ckpt.restore_module(self.model, entries, "denoiser/")
        ckpt.restore_module(self.embedder, entries, "embedder/")
        ckpt.restore_adam(self.opt, entries, "adam/", meta["step"])


class ControlNetTrainer(_DiffusionTrainer):
    """Graft a control branch onto a trained base and fine-tune it on the
    target-style triplets. The base denoiser and the embedder stay locked."""

    variant = "controlnet"

    def __init__(self, cfg, manifest, run_dir, base_checkpoint, command: str = ""):
        super().__init__(cfg, manifest, run_dir, command)
        if base_checkpoint is None:
            raise TrainingError(
                "controlnet training needs --base-checkpoint: train the diffusion-base variant first, "
                "then graft and fine-tune on top of its checkpoint"
            )
        self.base_checkpoint = Path(base_checkpoint)
        if not self.base_checkpoint.is_file():
            raise TrainingError(f"base checkpoint not found: {self.base_checkpoint}")

    def build(self) -> None:
        samples = self.manifest.by_domain("jiehua").load_samples()
        self._setup_common(samples)
        base, embedder, meta = load_base(self.base_checkpoint)
        if meta["denoiser"]["resolution"] != self.cfg.resolution:
            raise TrainingError("base checkpoint resolution does not match the config")
        self.model_cfg = base.cfg
        self.embedder = embedder.set_locked(True)
        self.model = graft(base, self.rng.child("branch"))
        self.params = self.model.trainable_parameters()

    def micro(self, batch) -> float:
        return finetune_step(self.model, batch, self.embedder, self.schedule, self.streams["noise"])

    def entries(self) -> list:
        return (
            ckpt.module_entries(self.model.base, "denoiser/")
            + ckpt.module_entries(self.model.branch, "branch/")
            + ckpt.module_entries(self.embedder, "embedder/")
            + ckpt.adam_entries(self.opt, "adam/")
        )

    def restore(self, entries: dict, meta: dict) -> None:
        ckpt.restore_module(self.model.base, entries, "denoiser/")
        ckpt.restore_module(self.model.branch, entries, "branch/")
        ckpt.restore_module(self.embedder, entries, "embedder/")
        ckpt.restore_adam(self.opt, entries, "adam/", meta["step"])


class CycleGANTrainer(Trainer):
    """Unpaired translation from the other style (X) to the target style (Y)."""

    variant = "cyclegan"
    columns = ("step", "lr", "disc_X", "disc_Y", "gen_adv_G", "gen_adv_F", "cycle", "gen_total")

    def build(self) -> None:
        cfg = self.cfg
        self.x_pool = _images(self.manifest.by_domain("other"))
        self.y_pool = _images(self.manifest.by_domain("jiehua"))
        self.state = CycleGANState.create(
            self.rng.child("nets"), cfg.cyclegan_channels, cfg.cyclegan_res_blocks, cfg.lambda_cycle, cfg.cyclegan_lr
        )
        self.streams = {"data": self.rng.child("data")}

    @property
    def step(self) -> int:
        return self.state.step

    def train_one(self, step: int) -> dict:
        data = self.streams["data"]
        bs = self.cfg.batch_size
        xi = data.choice(len(self.x_pool), bs, replace=len(self.x_pool) < bs)
        yi = data.choice(len(self.y_pool), bs, replace=len(self.y_pool) < bs)
        report = cyclegan_train_step(self.state, self.x_pool[xi] * 2.0 - 1.0, self.y_pool[yi] * 2.0 - 1.0)
        return {"lr": self.state.lr, **report}

    def entries(self) -> list:
        out = []
        for name, net in self.state.networks().items():
            out += ckpt.module_entries(net, f"{name}/")
        return out + ckpt.adam_entries(self.state.gen_opt, "adam_gen/") + ckpt.adam_entries(self.state.disc_opt, "adam_disc/")

    def extra_meta(self) -> dict:
        return {
            "channels": self.cfg.cyclegan_channels,
            "res_blocks": self.cfg.cyclegan_res_blocks,
            "lambda_cycle": self.state.lambda_cycle,
            "lr": self.state.lr,
            "opt_steps": [self.state.gen_opt.step_count, self.state.disc_opt.step_count],
        }

    def restore(self, entries: dict, meta: dict) -> None:
        for name, net in self.state.networks().items():
            ckpt.restore_module(net, entries, f"{name}/")
        gen_steps, disc_steps = meta["opt_steps"]
        ckpt.restore_adam(self.state.gen_opt, entries, "adam_gen/", gen_steps)
        ckpt.restore_adam(self.state.disc_opt, entries, "adam_disc/", disc_steps)
        self.state.step = meta["step"]


def _images(manifest: DatasetManifest) -> np.ndarray:
    samples = manifest.load_samples()
    if not samples:
        raise TrainingError("manifest has no records for a required domain")
    return np.stack([s.image for s in samples])


# ----------------------------------------------------------------- loading


def _read(path, kinds) -> tuple[dict, dict]:
    entries, meta = ckpt.load(path)
    if meta.get("kind") not in kinds:
        raise TrainingError(f"{path}: expected a {' or '.join(kinds)} checkpoint, found {meta.get('kind')!r}")
    return entries, meta


def _base_from(entries, meta) -> tuple[Denoiser, TextEmbedder]:
    model = Denoiser(DenoiserConfig(**meta["denoiser"]))
    ckpt.restore_module(model, entries, "denoiser/")
    model.assign_names("denoiser.")
    embedder = TextEmbedder(meta["vocabulary"], meta["text_dim"])
    ckpt.restore_module(embedder, entries, "embedder/")
    embedder.assign_names("embedder.")
    return model, embedder


def load_base(path) -> tuple[Denoiser, TextEmbedder, dict]:
    entries, meta = _read(path, ("diffusion-base",))
    model, embedder = _base_from(entries, meta)
    model.set_locked(False)
    embedder.set_locked(False)
    return model, embedder, meta


def load_diffusion(path):
    """Model (plain or grafted), embedder, noise schedule and metadata."""
    entries, meta = _read(path, ("diffusion-base", "controlnet"))
    model, embedder = _base_from(entries, meta)
    if meta["kind"] == "controlnet":
        g = graft(model)
        ckpt.restore_module(g.branch, entries, "branch/")
        model = g
    return model, embedder, make_schedule(meta["diffusion_T"]), meta


def load_cyclegan(path) -> tuple[CycleGANState, dict]:
    entries, meta = _read(path, ("cyclegan",))
    state = CycleGANState.create(Rng(0), meta["channels"], meta["res_blocks"], meta["lambda_cycle"], meta["lr"])
    for name, net in state.networks().items():
        ckpt.restore_module(net, entries, f"{name}/")
    state.step = meta["step"]
    return state, meta


def make_trainer(variant: str, cfg: RunConfig, manifest: DatasetManifest, run_dir, base_checkpoint=None, command=""):
    if variant == "diffusion-base":
        return DiffusionBaseTrainer(cfg, manifest, run_dir, command)
    if variant == "controlnet":
        return ControlNetTrainer(cfg, manifest, run_dir, base_checkpoint, command)
    if variant == "cyclegan":
        return CycleGANTrainer(cfg, manifest, run_dir, command)
    raise TrainingError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
