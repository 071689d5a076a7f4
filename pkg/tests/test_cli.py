import shutil
import subprocess

import numpy as np
import pytest

from sparsefusion.cli import EXIT_ERROR, EXIT_OK, EXIT_POOL_EXHAUSTED, EXIT_TRACKING_LOST, main
from sparsefusion.io import pose_to_row, read_pfm, read_trajectory

BASE = """
[grid]
N = 16
M = 8
pool_capacity = 4096
[camera]
width = 120
height = 90
[input]
orbit_frames = 3
orbit_arc_deg = 20
orbit_alternate = false
[filters]
trials = 4
steps = 60
[memory]
sweep = 4x8, 8x4
"""


@pytest.fixture
def ini(tmp_path):
    def make(extra=""):
        p = tmp_path / "run.ini"
        p.write_text(BASE + extra)
        return str(p)
    return make


def test_run_ok(ini, tmp_path, capsys):
    assert main(["run", "--config", ini(), "--output", str(tmp_path / "o")]) == EXIT_OK
    assert "status = ok" in capsys.readouterr().out
    assert (tmp_path / "o" / "mesh.ply").is_file()


def test_run_zero_frames(ini, tmp_path):
    assert main(["run", "--config", ini(), "--frames", "0", "--output", str(tmp_path / "z")]) == EXIT_OK
    assert (tmp_path / "z" / "mesh.ply").is_file()


def test_run_tracking_lost(ini, capsys):
    assert main(["run", "--config", ini("[match]\nmin_matches = 100000000\n")]) == EXIT_TRACKING_LOST


def test_run_pool_exhausted(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(BASE.replace("pool_capacity = 4096", "pool_capacity = 2"))
    assert main(["run", "--config", str(p)]) == EXIT_POOL_EXHAUSTED


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == EXIT_ERROR
    p = tmp_path / "bad.ini"
    p.write_text("[fusion]\nmode = median\n")
    assert main(["run", "--config", str(p)]) == EXIT_ERROR
    assert "error:" in capsys.readouterr().err


def test_bad_arguments_exit_2_from_argparse():
    with pytest.raises(SystemExit) as e:
        main(["run"])
    assert e.value.code == 2


def test_experiments(ini, tmp_path, capsys):
    cfg = ini()
    assert main(["experiment", "filters", "--config", cfg, "--output", str(tmp_path / "f")]) == EXIT_OK
    assert (tmp_path / "f" / "filters.csv").is_file()
    assert main(["experiment", "memory", "--config", cfg, "--frames", "1",
                 "--sweep", "2x8", "--output", str(tmp_path / "m")]) == EXIT_OK
    lines = (tmp_path / "m" / "memory.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("2,8,16,ok")
    assert main(["experiment", "memory", "--config", cfg, "--sweep", "bogus"]) == EXIT_ERROR


def test_render_snapshot(ini, tmp_path, capsys):
    cfg = ini("[run]\ntracking = ground_truth\n")
    assert main(["run", "--config", cfg, "--output", str(tmp_path / "o")]) == EXIT_OK
    pose = read_trajectory(tmp_path / "o" / "trajectory.csv")[0]
    row = " ".join(str(x) for x in pose_to_row(0, pose))
    out = tmp_path / "d.pfm"
    assert main(["render", "--grid", str(tmp_path / "o" / "grid.stsg"), "--pose", row,
                 "--config", cfg, "--output", str(out)]) == EXIT_OK
    depth = read_pfm(out)
    assert depth.shape == (90, 120)
    hit = depth > 0
    assert hit.mean() > 0.2 and np.all(np.abs(depth[hit] - 0.6) < 0.35)
    assert main(["render", "--grid", str(tmp_path / "nope.stsg"), "--pose", row]) == EXIT_ERROR
    assert main(["render", "--grid", str(tmp_path / "o" / "grid.stsg"), "--pose", "1 2 3"]) == EXIT_ERROR


@pytest.mark.skipif(shutil.which("sparsefusion") is None, reason="console script not installed")
def test_console_script(ini, tmp_path):
    r = subprocess.run(["sparsefusion", "run", "--config", ini(), "--frames", "1",
                        "--output", str(tmp_path / "c")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run(["python3", "-m", "sparsefusion", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "experiment" in r.stdout
