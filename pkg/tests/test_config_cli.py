import subprocess
import sys
from pathlib import Path

import pytest

from jiehua.cli import main
from jiehua.config import ConfigError, RunConfig, load_config, parse_text
from jiehua.fid import FIDReport
from jiehua.training import MetricLog, make_trainer
from jiehua.vision.data import EVAL_PROMPT_TEMPLATE, DatasetManifest

TINY = ["--set", "resolution=16", "--set", "base_channels=4", "--set", "groups=2", "--set", "text_dim=8"]


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_defaults_match_table():
    cfg = RunConfig()
    assert (cfg.learning_rate, cfg.lr_scheduler, cfg.lr_warmup_steps) == (5e-6, "cosine_with_restarts", 100)
    assert (cfg.gradient_accumulation_steps, cfg.resolution, cfg.use_ema) == (5, 64, False)
    assert cfg.fid_repeats == 10


def test_print_config_emits_defaults(capsys):
    code, out, _ = run_cli(capsys, "print-config")
    assert code == 0
    assert parse_text(out) == RunConfig()
    assert "learning_rate=5e-06" in out.replace(" ", "")


def test_flags_override_file(tmp_path, capsys):
    conf = tmp_path / "run.cfg"
    conf.write_text("# comment\nseed = 3\nlr_warmup_steps=7\n")
    code, out, _ = run_cli(capsys, "print-config", "--config", str(conf), "--set", "seed=4", "--seed", "9")
    cfg = parse_text(out)
    assert code == 0 and cfg.seed == 9 and cfg.lr_warmup_steps == 7
    assert load_config(conf, {"seed": "4"}).seed == 4


@pytest.mark.parametrize(
    "text,match",
    [("nope=1", "unknown"), ("seed=1\nseed=2", "duplicate"), ("seed", "key=value"), ("seed=x", "bad value"),
     ("use_ema=true", "EMA"), ("lr_scheduler=linear", "cosine"), ("resolution=18", "divisible")],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_text(text)


def test_run_id_ignores_paths():
    a, b = RunConfig(run_dir="x"), RunConfig(run_dir="y")
    assert a.run_id() == b.run_id() and a.run_id() != RunConfig(seed=1).run_id()


def test_usage_errors_exit_one(capsys):
    code, _, err = run_cli(capsys, "print-config", "--set", "bogus=1")
    assert code == 1 and err.startswith("error[usage]:") and err.count("\n") == 1
    code, _, err = run_cli(capsys)
    assert code == 1 and err.startswith("error[usage]:")
    code, _, err = run_cli(capsys, "train", "diffusion-base")
    assert code == 1 and "--manifest" in err


def test_missing_input_dir_exits_two(tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "prep-data", "--out", str(tmp_path / "o"), "--input-dir", str(tmp_path / "absent"), "--artist", "*=x"
    )
    assert code == 2 and err.startswith("error[runtime]:") and err.count("\n") == 1


def test_missing_checkpoint_exits_two(tmp_path, capsys):
    code, _, err = run_cli(capsys, "sample", "--checkpoint", str(tmp_path / "none.ckpt"), "--out-dir", str(tmp_path))
    assert code == 2 and "not found" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "jiehua", "print-config"], capture_output=True, text=True)
    assert proc.returncode == 0 and "seed=0" in proc.stdout.replace(" ", "")


def test_eval_prompt_template():
    assert EVAL_PROMPT_TEMPLATE.format(artist="X") == "Green grasslands, Grey sky, People in bright colours, X style"


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["prep-data", "--out", str(root / "data"), "--synthetic", "--per-style", "44", *TINY]) == 0
    return root


def test_prep_data_synthetic(tiny_data, tmp_path):
    m = DatasetManifest.read(tiny_data / "data" / "manifest.tsv")
    assert len(m.by_domain("jiehua")) == 44 and m.resolution == 16
    assert main(["prep-data", "--out", str(tmp_path / "again"), "--synthetic", "--per-style", "44", *TINY]) == 0
    for f in sorted((tiny_data / "data").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(tiny_data / "data")).read_bytes()


def test_controlnet_needs_base(tiny_data, capsys):
    code, _, err = run_cli(
        capsys, "train", "controlnet", "--manifest", str(tiny_data / "data" / "manifest.tsv"),
        "--run-dir", str(tiny_data / "nobase"), *TINY,
    )
    assert code == 2 and "diffusion-base" in err


@pytest.fixture(scope="module")
def tiny_runs(tiny_data):
    manifest = str(tiny_data / "data" / "manifest.tsv")
    fast = [*TINY, "--set", "gradient_accumulation_steps=1", "--set", "checkpoint_every=50", "--set", "diffusion_T=10"]
    base = tiny_data / "base"
    assert main(["train", "diffusion-base", "--manifest", manifest, "--run-dir", str(base),
                 "--set", "total_steps=120", *fast, "--emit-plots"]) == 0
    cn = tiny_data / "cn"
    assert main(["train", "controlnet", "--manifest", manifest, "--run-dir", str(cn), "--set", "total_steps=20",
                 "--base-checkpoint", str(base / "checkpoints" / "final.ckpt"), *fast]) == 0
    cg = tiny_data / "cg"
    assert main(["train", "cyclegan", "--manifest", manifest, "--run-dir", str(cg), "--set", "total_steps=5",
                 "--set", "cyclegan_channels=4", "--set", "cyclegan_res_blocks=1", *fast]) == 0
    return {"manifest": manifest, "base": base, "cn": cn, "cg": cg, "fast": fast}


def test_metric_log_and_checkpoints(tiny_runs):
    rows = MetricLog.read(tiny_runs["base"] / "metrics.tsv")
    assert [r["step"] for r in rows] == list(range(120))
    assert rows[0]["lr"] == 0.0
    assert rows[100]["lr"] == pytest.approx(5e-6, rel=1e-12)
    ckpts = sorted(p.name for p in (tiny_runs["base"] / "checkpoints").iterdir())
    assert ckpts == ["final.ckpt", "step_000000.ckpt", "step_000050.ckpt", "step_000100.ckpt"]
    assert (tiny_runs["base"] / "run_manifest.json").is_file()
    assert (tiny_runs["base"] / "plots" / "loss.png").is_file()
    cg_rows = MetricLog.read(tiny_runs["cg"] / "metrics.tsv")
    assert {"disc_X", "disc_Y", "cycle", "gen_total"} <= set(cg_rows[0])


@pytest.mark.parametrize("which", ["base", "cn", "cg"])
def test_sample_counts_names_and_seed(tiny_runs, tmp_path, which):
    ckpt = str(tiny_runs[which] / "checkpoints" / "final.ckpt")
    outs = []
    for k in range(2):
        d = tmp_path / f"s{k}"
        argv = ["sample", "--checkpoint", ckpt, "--out-dir", str(d), "--n", "10", "--seed", "5",
                "--manifest", tiny_runs["manifest"], *tiny_runs["fast"]]
        assert main(argv) == 0
        outs.append(sorted(d.iterdir()))
    assert len(outs[0]) == 10
    assert all(p.name.startswith("sample_seed5_step") for p in outs[0])
    assert [p.read_bytes() for p in outs[0]] == [p.read_bytes() for p in outs[1]]


def test_sample_controlnet_needs_edges(tiny_runs, tmp_path, capsys):
    code, _, err = run_cli(capsys, "sample", "--checkpoint", str(tiny_runs["cn"] / "checkpoints" / "final.ckpt"),
                           "--out-dir", str(tmp_path), *tiny_runs["fast"])
    assert code == 1 and "--edge" in err


def test_eval_report_and_reference_self(tiny_runs, tmp_path, capsys):
    out = tmp_path / "r.txt"
    code, stdout, _ = run_cli(capsys, "eval", "--checkpoint", str(tiny_runs["cg"] / "checkpoints" / "final.ckpt"),
                              "--manifest", tiny_runs["manifest"], "--out", str(out), "--samples", "4",
                              *tiny_runs["fast"])
    assert code == 0
    report = FIDReport.from_text(out.read_text())
    assert len(report.scores) == 10
    assert stdout.strip() == f"mean {report.mean!r}"
    self_out = tmp_path / "self.txt"
    assert main(["eval", "--reference-self", "--manifest", tiny_runs["manifest"], "--out", str(self_out),
                 *tiny_runs["fast"]]) == 0
    assert FIDReport.from_text(self_out.read_text()).mean <= 1e-3


def test_eval_is_deterministic(tiny_runs, tmp_path):
    texts = []
    for k in range(2):
        out = tmp_path / f"r{k}.txt"
        assert main(["eval", "--checkpoint", str(tiny_runs["cn"] / "checkpoints" / "final.ckpt"),
                     "--manifest", tiny_runs["manifest"], "--out", str(out), "--samples", "3", "--repeats", "2",
                     "--seed", "1", *tiny_runs["fast"]]) == 0
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]


def test_resume_matches_uninterrupted_run(tiny_data, tmp_path):
    manifest = DatasetManifest.read(tiny_data / "data" / "manifest.tsv")
    cfg = RunConfig(resolution=16, base_channels=4, groups=2, text_dim=8, gradient_accumulation_steps=1,
                    total_steps=200, checkpoint_every=50, diffusion_T=10)
    straight = make_trainer("diffusion-base", cfg, manifest, tmp_path / "a").run()
    make_trainer("diffusion-base", cfg, manifest, tmp_path / "b").run(stop_after=120)
    resumed = make_trainer("diffusion-base", cfg, manifest, tmp_path / "b").run(resume=True)
    assert Path(straight).read_bytes() == Path(resumed).read_bytes()
    assert (tmp_path / "a" / "metrics.tsv").read_bytes() == (tmp_path / "b" / "metrics.tsv").read_bytes()
