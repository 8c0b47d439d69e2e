"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every failure prints
exactly one line to stderr starting with ``error[usage]:`` or ``error[runtime]:``.
"""

from __future__ import annotations

import argparse
import shlex
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="jiehua", description="Style-transfer pipelines: diffusion + control branch, and CycleGAN.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("prep-data", parents=[common], help="build a triplet dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true", help="generate the two-style synthetic corpus")
    src.add_argument("--input-dir", help="directory of images to import")
    p.add_argument("--per-style", type=int, default=44, help="synthetic images per style")
    p.add_argument("--artist", action="append", default=[], metavar="GLOB=NAME", help="artist name for matching files")
    p.add_argument("--domain", action="append", default=[], metavar="GLOB=DOMAIN", help="domain tag (jiehua|other)")

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("variant", choices=["diffusion-base", "controlnet", "cyclegan"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", help="output directory (default: config run_dir)")
    p.add_argument("--base-checkpoint", help="diffusion-base checkpoint (required for controlnet)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run dir")
    p.add_argument("--emit-plots", action="store_true", help="render the metric log to PNG files")

    p = sub.add_parser("sample", parents=[common], help="generate images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--prompt", help="prompt text (default: the evaluation prompt)")
    p.add_argument("--artist", help="artist name substituted into the evaluation prompt")
    p.add_argument("--edge", help="edge-map image for a controlnet checkpoint")
    p.add_argument("--manifest", help="draw edge maps (controlnet) or source images (cyclegan) from here")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale")

    p = sub.add_parser("eval", parents=[common], help="FID evaluation against the target-style images")
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--reference-self", action="store_true", help="score the reference set against itself")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--repeats", type=int)
    p.add_argument("--samples", type=int, help="generated images per repeat")
    p.add_argument("--single-image", action="store_true", help="one reference image per repeat (mean-only distance)")
    p.add_argument("--emit-plots", action="store_true", help="plot the per-repeat scores")

    sub.add_parser("print-config", parents=[common], help="print the resolved config")
    return parser


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def resolve_config(args) -> RunConfig:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _mapping(pairs: list[str], flag: str) -> dict[str, str]:
    out = {}
    for item in pairs:
        pattern, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"{flag} expects GLOB=VALUE, got {item!r}")
        out[pattern] = value
    return out


# ----------------------------------------------------------------- commands


def cmd_prep_data(args, cfg: RunConfig) -> int:
    from .tensor.rng import Rng
    from .vision.data import build_manifest, corpus_statistics, synth_style_corpus

    if args.synthetic:
        manifest = synth_style_corpus(
            args.per_style, cfg.resolution, Rng(cfg.seed).child("corpus"), args.out, cfg.canny_low, cfg.canny_high
        )
    else:
        artists = _mapping(args.artist, "--artist")
        if not artists:
            raise UsageError("--input-dir needs at least one --artist GLOB=NAME")
        manifest = build_manifest(
            args.input_dir, artists, cfg.resolution, args.out, _mapping(args.domain, "--domain"),
            cfg.canny_low, cfg.canny_high,
        )
    print(f"manifest {Path(args.out) / 'manifest.tsv'} ({len(manifest)} records)")
    for domain, stats in corpus_statistics(manifest).items():
        print(f"{domain}\tcount={stats['count']}\tedge_density={stats['edge_density']:.4f}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import make_trainer
    from .vision.data import DatasetManifest

    run_dir = Path(args.run_dir or cfg.run_dir)
    manifest = DatasetManifest.read(args.manifest)
    command = shlex.join(["jiehua", *sys.argv[1:]]) if sys.argv else ""
    trainer = make_trainer(args.variant, cfg, manifest, run_dir, args.base_checkpoint, command)
    final = trainer.run(resume=args.resume)
    print(f"final checkpoint {final}")
    if args.emit_plots:
        from .plots import plot_metrics

        for path in plot_metrics(run_dir / "metrics.tsv", run_dir / "plots"):
            print(f"plot {path}")
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    from .controlnet import GraftedDenoiser
    from .cyclegan import translate
    from .diffusion import sample
    from .evaluation import load_edges, load_images
    from .tensor import checkpoint as ckpt
    from .tensor.rng import Rng
    from .training import load_cyclegan, load_diffusion
    from .vision.data import EVAL_PROMPT_TEMPLATE, STYLE_A_ARTIST, DatasetManifest
    from .vision.imageio import load_image, save_image

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    _, meta = ckpt.load(path)
    rng = Rng(cfg.seed).child("sample")
    manifest = DatasetManifest.read(args.manifest) if args.manifest else None

    if meta.get("kind") == "cyclegan":
        if manifest is None:
            raise UsageError("sampling a cyclegan checkpoint needs --manifest (source images)")
        state, meta = load_cyclegan(path)
        sources = load_images(manifest.by_domain("other"))
        images = translate(state, sources[rng.choice(len(sources), args.n, replace=len(sources) < args.n)])
    else:
        model, embedder, schedule, meta = load_diffusion(path)
        prompt = args.prompt or EVAL_PROMPT_TEMPLATE.format(artist=args.artist or STYLE_A_ARTIST)
        control = None
        if isinstance(model, GraftedDenoiser):
            if args.edge:
                control = load_image(args.edge)[:, :, 0]
            elif manifest is not None:
                pool = load_edges(manifest.by_domain("jiehua"))
                control = pool[rng.child("edges").choice(len(pool), args.n, replace=len(pool) < args.n)]
            else:
                raise UsageError("sampling a controlnet checkpoint needs --edge or --manifest")
        guidance = cfg.guidance_scale if args.guidance is None else args.guidance
        images = sample(model, embedder, schedule, prompt, control, guidance, rng.child("noise"), n=args.n)

    out = Path(args.out_dir)
    for i, img in enumerate(images):
        name = out / f"sample_seed{cfg.seed}_step{meta['step']}_{i:03d}.ppm"
        save_image(img, name)
        print(name)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluation import evaluate_checkpoint, load_images
    from .fid import eval_protocol
    from .tensor.rng import Rng
    from .vision.data import DatasetManifest

    manifest = DatasetManifest.read(args.manifest)
    repeats = args.repeats or cfg.fid_repeats
    n_samples = args.samples or cfg.fid_samples
    n_reference = cfg.fid_reference or None
    single = args.single_image or cfg.fid_single_image
    if args.reference_self == bool(args.checkpoint):
        raise UsageError("give exactly one of --checkpoint or --reference-self")
    if args.reference_self:
        reference = load_images(manifest.by_domain("jiehua"))
        report = eval_protocol(
            lambda n, rng: reference, reference, repeats, Rng(cfg.seed).child("eval"), len(reference), None, single
        )
        report.config.update(kind="reference", seed=cfg.seed)
    else:
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        report = evaluate_checkpoint(
            args.checkpoint, manifest, cfg.seed, repeats, n_samples, n_reference, single, cfg.guidance_scale
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(report.to_text())
    tmp.replace(out)
    print(f"mean {report.mean!r}")
    if args.emit_plots:
        from .plots import plot_fid

        print(f"plot {plot_fid(report, out.with_suffix('.png'))}")
    return 0


COMMANDS = {"prep-data": cmd_prep_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command (prep-data, train, sample, eval, print-config)")
        cfg = resolve_config(args)
        if args.print_config or args.command == "print-config":
            sys.stdout.write(cfg.to_text())
            return 0
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error[usage]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("error[runtime]: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error[runtime]: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
