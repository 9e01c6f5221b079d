import csv
import json
import subprocess
import sys

import pytest

from mofusion.cli import build_parser, inloop_start, main
from mofusion.footskate import skate_ratio
from mofusion.motion import load_motion
from mofusion.sampling import SamplerConfig
from mofusion.schedule import linear_beta_schedule, schedule_karras
from mofusion.skeleton import default_skeleton

from .helpers import TINY_CLI_CONFIG, tree_digest


@pytest.fixture(scope="module")
def work(tmp_path_factory, monkeypatch_module):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY_CLI_CONFIG))
    monkeypatch_module.setenv("MOFUSION_CACHE_DIR", str(root / "cache"))
    cfg = str(root / "tiny.json")
    assert main(["synth", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["synth", "--config", cfg, "--seed", "1", "--out", str(root / "held")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "ckpt")]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def test_synth_layout(work):
    root, _ = work
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["count"] == 40 and len(manifest["files"]) == 40
    assert (root / "data" / "skeleton.json").is_file() and (root / "data" / "run_config.json").is_file()
    m = load_motion(root / "data" / manifest["files"][0]["file"])
    assert m.label == ("walk", "forward")


def test_synth_repeatable(work, tmp_path):
    root, cfg = work
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(root / "data")


def test_synth_bad_class_exits_2(work, tmp_path, capsys):
    _, cfg = work
    assert main(["synth", "--config", cfg, "--classes", "walk_forward,moonwalk", "--out", str(tmp_path)]) == 2
    assert "synth.classes" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"sampler": {"stepz": 3}}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "sampler.stepz" in capsys.readouterr().err


def test_train_outputs_and_missing_data(work, tmp_path):
    root, cfg = work
    names = {p.name for p in (root / "ckpt").iterdir()}
    assert {"config.json", "manifest.json", "params.bin", "ema.bin", "metrics.jsonl", "run_config.json"} <= names
    lines = (root / "ckpt" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 20 and set(json.loads(lines[0])) == {"iteration", "loss", "lr", "grad_norm", "wall_ms"}
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_resume_is_bitwise(work, tmp_path):
    root, cfg = work
    data = str(root / "data")
    assert main(["train", "--config", cfg, "--data", data, "--iterations", "8", "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--resume", str(tmp_path / "a"),
                 "--out", str(tmp_path / "b")]) == 0
    for name in ("params.bin", "ema.bin", "optimizer.bin", "config.json", "manifest.json"):
        assert (tmp_path / "b" / name).read_bytes() == (root / "ckpt" / name).read_bytes(), name
    resumed = [json.loads(l)["loss"] for l in (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()]
    full = [json.loads(l)["loss"] for l in (root / "ckpt" / "metrics.jsonl").read_text().splitlines()]
    assert resumed == full[8:]


def test_sample_defaults_and_repeatability(work, tmp_path):
    root, cfg = work
    args = ["sample", "--config", cfg, "--checkpoint", str(root / "ckpt"), "--prompt", "wave arm", "--frames", "30"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "sample.mot").read_bytes() == (tmp_path / "b" / "sample.mot").read_bytes()
    timing = json.loads((tmp_path / "a" / "timing.json").read_text())
    assert timing["steps"] == 10 and timing["sampler"] == "dpmpp_2m_sde"
    run = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert run["config"]["sampler"]["guidance_scale"] == 2.5 and run["config"]["sampler"]["precision"] == "full"
    assert load_motion(tmp_path / "a" / "sample.mot").n_frames == 30


def test_sample_ddpm_full_loop(work, tmp_path):
    root, cfg = work
    base = ["sample", "--config", cfg, "--checkpoint", str(root / "ckpt"), "--prompt", "walk", "--frames", "8",
            "--sampler", "ddpm"]
    assert main(base + ["--steps", "1000", "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "timing.json").read_text())["denoiser_calls"] == 1000
    assert main(base + ["--steps", "50", "--out", str(tmp_path / "b")]) == 2


def test_sample_inloop_and_unknown_word(work, tmp_path):
    root, cfg = work
    base = ["sample", "--config", cfg, "--checkpoint", str(root / "ckpt"), "--frames", "30"]
    assert main(base + ["--prompt", "walk forward", "--footskate-inloop", "--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--prompt", "fly away", "--out", str(tmp_path / "b")]) == 2


def test_inloop_start_covers_last_steps():
    s = linear_beta_schedule()
    ts = schedule_karras(s, 10).timesteps
    t0 = inloop_start(SamplerConfig(), s, 0.3)
    assert [t < t0 for t in ts] == [False] * 7 + [True] * 3
    assert inloop_start(SamplerConfig(), s, 0.0) == 0.0
    assert all(t < inloop_start(SamplerConfig(), s, 1.0) for t in ts)


def test_cleanup_command(work, tmp_path):
    from mofusion.dataset import save_dataset
    from mofusion.synth import SynthConfig, default_vocabulary, synth_dataset

    _, cfg = work
    skel = default_skeleton()
    motions = synth_dataset(SynthConfig(("walk_forward_skate", "squat"), 1, (48, 48), seed=0))
    save_dataset(motions, tmp_path / "in", default_vocabulary(), skel)
    assert main(["cleanup", "--motion", str(tmp_path / "in" / "00000.mot"), "--out", str(tmp_path / "a")]) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["segments"] and report["skate_ratio_after"] < 0.1 * report["skate_ratio_before"]
    assert set(report) >= {"segments", "loss_curve", "skate_ratio_before", "skate_ratio_after", "max_pose_deviation_m"}
    fixed = load_motion(tmp_path / "a" / "corrected.mot")
    pos = fixed.valid_features().reshape(48, 15, 3)
    assert skate_ratio(pos, skel, 20.0) == pytest.approx(report["skate_ratio_after"])
    # clean input: byte-identical output, no segments
    assert main(["cleanup", "--motion", str(tmp_path / "in" / "00001.mot"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "corrected.mot").read_bytes() == (tmp_path / "in" / "00001.mot").read_bytes()
    assert json.loads((tmp_path / "b" / "report.json").read_text())["segments"] == []
    assert main(["cleanup", "--motion", str(tmp_path / "in" / "00000.mot"), "--weights", "0,0,0,0",
                 "--out", str(tmp_path / "c")]) == 2
    assert main(["cleanup", "--motion", str(tmp_path / "in" / "00000.mot"), "--weights", "1,2",
                 "--out", str(tmp_path / "c")]) == 2


def test_eval_command(work, tmp_path):
    root, cfg = work
    base = ["eval", "--config", cfg, "--checkpoint", str(root / "ckpt"), "--data", str(root / "held"),
            "--encoder-data", str(root / "data")]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    report = json.loads((tmp_path / "a" / "metrics.json").read_text())
    for k in ("fid", "r_precision_top1", "r_precision_top2", "r_precision_top3", "diversity", "multimodality",
              "aits_seconds", "skate_ratio"):
        assert k in report["values"] and k in report["ci95"]
    assert (tmp_path / "a" / "metrics.csv").read_text().startswith("metric,value,ci95")
    assert main(base + ["--reps", "1", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "metrics.csv").read_text().splitlines()[0] == "metric,value"
    assert tree_digest(tmp_path / "a")["metrics.json"] != tree_digest(tmp_path / "b")["metrics.json"]


def test_eval_compare_warns_on_encoder_mismatch(work, tmp_path):
    root, cfg = work
    base = ["eval", "--config", cfg, "--checkpoint", str(root / "ckpt"), "--data", str(root / "held"),
            "--reps", "1"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    with pytest.warns(RuntimeWarning, match="encoder version"):
        assert main(base + ["--set", "eval.encoder_iterations=31", "--compare", str(tmp_path / "a" / "metrics.json"),
                            "--out", str(tmp_path / "b")]) == 0


def test_bench_command(work, tmp_path):
    root, cfg = work
    assert main(["bench", "--config", cfg, "--checkpoint", str(root / "ckpt"), "--prompt", "walk forward",
                 "--frames", "16", "--out", str(tmp_path / "a")]) == 0
    rows = list(csv.DictReader((tmp_path / "a" / "bench.csv").open()))
    assert [r["row"] for r in rows] == ["ddpm1000", "+solver10", "+cache", "+parallel-cfg", "+reduced"]
    assert [int(r["steps"]) for r in rows] == [1000, 10, 10, 10, 10]
    assert [int(r["encoder_calls"]) for r in rows] == [1000, 10, 1, 1, 1]
    assert [int(r["network_calls"]) for r in rows] == [2000, 20, 20, 10, 10]


def test_parser_lists_all_commands():
    text = build_parser().format_help()
    for cmd in ("synth", "train", "sample", "cleanup", "eval", "bench"):
        assert cmd in text


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mofusion", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "bench" in out.stdout
