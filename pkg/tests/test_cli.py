import shutil
import subprocess

import filelock
import numpy as np
import pytest

from sketchmotion import cli
from sketchmotion.formats import read_csv, read_pgm, read_pgm_frames
from sketchmotion.metrics import AblationTable
from sketchmotion.sketch import parse_animated_svg

TINY = """\
resolution=16
d_model=16
frames=4
pretrain_steps=6
pretrain_pool=4
stage_steps=3
batch_size=2
eval_draws=8
sds_iterations=4
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One tiny end-to-end run shared by the tests below; they must not modify it."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    out = root / "run"
    clip = root / "clip"
    common = ["--config", str(root / "tiny.cfg")]
    assert cli.run(["synth", *common, "--out", str(clip)]) == 0
    assert cli.run(["pretrain", *common, "--out", str(out)]) == 0
    assert cli.run(["stage1", *common, "--out", str(out), "--sketch", str(clip / "car.svg"),
                    "--prompt", "a sketch of a car"]) == 0
    assert cli.run(["stage2", *common, "--out", str(out), "--video-dir", str(clip),
                    "--prompt", "a square is sliding"]) == 0
    assert cli.run(["stage3", *common, "--out", str(out), "--snapshot-every", "2"]) == 0
    assert cli.run(["eval", *common, "--out", str(out)]) == 0
    return root


def copy_run(run_dir, tmp_path):
    dst = tmp_path / "run"
    shutil.copytree(run_dir / "run", dst)
    return dst


def test_pipeline_artifacts(run_dir):
    out = run_dir / "run"
    for name in ("base.skwt", "A.skad", "A_prime.skad", "M.skad", "sketch.svg", "animation.svg",
                 "diagnostics.csv", "report.csv", "report.txt", "tracks.png", "losses.png", "filmstrip.png",
                 "reference_track.csv"):
        assert (out / name).exists(), name
    assert read_pgm_frames(out / "frames").shape == (4, 16, 16)
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == ["iter_00002", "iter_00004"]
    anim = parse_animated_svg((out / "animation.svg").read_text())
    assert anim.points.shape[0] == 4


def test_synth_outputs(run_dir):
    clip = run_dir / "clip"
    video = read_pgm_frames(clip)
    header, rows = read_csv(clip / "track.csv")
    assert video.shape == (4, 16, 16)
    assert header == ["frame", "x", "y"] and len(rows) == 4


def test_eval_report_round_trips(run_dir):
    table = AblationTable.from_csv((run_dir / "run" / "report.csv").read_text())
    assert [r.label for r in table.reports] == ["full", "w/o A-LoRA", "w/o M-LoRA"]
    assert all(np.isfinite(r.row()[k]) for r in table.reports for k in ("appearance", "motion", "temporal"))
    assert "d w/o M-LoRA" in (run_dir / "run" / "report.txt").read_text()


def test_stage_outputs_are_deterministic(run_dir, tmp_path):
    common = ["--config", str(run_dir / "tiny.cfg"), "--out", str(tmp_path)]
    shutil.copy(run_dir / "run" / "base.skwt", tmp_path / "base.skwt")
    assert cli.run(["stage2", *common, "--video-dir", str(run_dir / "clip"), "--prompt", "a square is sliding"]) == 0
    assert (tmp_path / "M.skad").read_bytes() == (run_dir / "run" / "M.skad").read_bytes()
    assert (tmp_path / "A_prime.skad").read_bytes() == (run_dir / "run" / "A_prime.skad").read_bytes()


def test_render_static_and_animated(run_dir, tmp_path):
    common = ["--config", str(run_dir / "tiny.cfg")]
    assert cli.run(["render", *common, "--sketch", str(run_dir / "clip" / "car.svg"),
                    "--out", str(tmp_path / "car.pgm")]) == 0
    assert read_pgm(tmp_path / "car.pgm").shape == (16, 16)
    assert cli.run(["render", *common, "--sketch", str(run_dir / "run" / "animation.svg"),
                    "--out", str(tmp_path / "anim")]) == 0
    assert read_pgm_frames(tmp_path / "anim").shape == (4, 16, 16)


def test_unknown_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed=1\nlearning_rate=3\n")
    assert cli.run(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_steps_flag_not_meaningful_for_synth(tmp_path):
    assert cli.run(["synth", "--steps", "3", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_bad_resolution_exits_2(tmp_path):
    assert cli.run(["synth", "--resolution", "30", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_stage3_without_motion_adapter_exits_3(run_dir, tmp_path, capsys):
    out = copy_run(run_dir, tmp_path)
    (out / "M.skad").unlink()
    assert cli.run(["stage3", "--config", str(run_dir / "tiny.cfg"), "--out", str(out)]) == cli.EXIT_MISSING
    assert "M.skad" in capsys.readouterr().err


def test_stage1_without_base_exits_3(run_dir, tmp_path, capsys):
    code = cli.run(["stage1", "--config", str(run_dir / "tiny.cfg"), "--out", str(tmp_path),
                    "--sketch", str(run_dir / "clip" / "car.svg")])
    assert code == cli.EXIT_MISSING
    assert "base.skwt" in capsys.readouterr().err


def test_eval_without_animation_exits_3(run_dir, tmp_path):
    out = copy_run(run_dir, tmp_path)
    (out / "animation.svg").unlink()
    assert cli.run(["eval", "--config", str(run_dir / "tiny.cfg"), "--out", str(out)]) == cli.EXIT_MISSING


def test_resolution_mismatch_with_base_exits_2(run_dir, tmp_path):
    out = copy_run(run_dir, tmp_path)
    code = cli.run(["stage3", "--config", str(run_dir / "tiny.cfg"), "--out", str(out), "--resolution", "32"])
    assert code == cli.EXIT_CONFIG


def test_non_finite_loss_exits_4(run_dir, tmp_path):
    out = copy_run(run_dir, tmp_path)
    cfg = tmp_path / "nan.cfg"
    cfg.write_text(TINY + "stage_lr=1e30\n")
    code = cli.run(["stage2", "--config", str(cfg), "--out", str(out), "--video-dir", str(run_dir / "clip"),
                    "--steps", "3"])
    assert code == cli.EXIT_NUMERIC


def test_locked_output_dir_exits_2(tmp_path, capsys):
    lock = filelock.FileLock(str(tmp_path / ".sketchmotion.lock"))
    with lock:
        assert cli.run(["synth", "--out", str(tmp_path), "--resolution", "16"]) == cli.EXIT_CONFIG
    assert "locked" in capsys.readouterr().err
    assert cli.run(["synth", "--out", str(tmp_path), "--resolution", "16"]) == cli.EXIT_OK


def test_console_script_runs(tmp_path):
    exe = shutil.which("sketchmotion")
    if exe is None:
        pytest.skip("console script not installed")
    done = subprocess.run([exe, "synth", "--out", str(tmp_path), "--resolution", "16", "--frames", "3"],
                          capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    assert len(list(tmp_path.glob("*.pgm"))) == 3
