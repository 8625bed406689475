import subprocess
import sys
from pathlib import Path

import pytest

from crosstalk_mtl.cli import main
from crosstalk_mtl.config import load_kv


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("CROSSTALK_MTL_OUTPUT", str(root))
    return root


def write_cfg(path, **kv):
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
    return path


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


MOTOR_GEN = dict(benchmark="motor", sample_rate=2048, duration=0.25, counts=",".join(["3"] * 36),
                 **{f"ibr.{k}": 1.0 for k in ("irf", "orf", "misalignment", "unbalance", "compound")})


def test_gen_twice_is_byte_identical(tmp_path, out_root, capsys):
    cfg = write_cfg(tmp_path / "motor.cfg", **MOTOR_GEN)
    assert main(["gen", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(a) == 108 + 2 and a == b
    # each invocation got its own run directory with the resolved config
    runs = sorted(out_root.iterdir())
    assert len(runs) == 2 and runs[0] != runs[1]
    assert load_kv(runs[0] / "resolved.cfg")["seed"] == "7"


def test_usage_errors_exit_2(tmp_path, out_root, capsys):
    assert main(["gen", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    cfg = write_cfg(tmp_path / "bad.cfg", benchmark="motor", colour="red")
    assert main(["gen", "--config", str(cfg)]) == 2
    assert "colour" in capsys.readouterr().err
    assert main(["train", "--set", "oops"]) == 2


def test_module_entry_point_exit_code():
    r = subprocess.run([sys.executable, "-m", "crosstalk_mtl", "sweep", "--nope"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage error" in r.stderr


def test_gradcheck_layers(out_root, capsys):
    assert main(["gradcheck", "--layers"]) == 0
    out = capsys.readouterr().out
    assert "PASS conv2d" in out and "FAIL" not in out


def _train_cfg(tmp_path, manifest, **kw):
    base = dict(manifest=manifest, n_fft=64, hop=64, channels="4,6,6", epochs=1, batch_size=16)
    return write_cfg(tmp_path / "train.cfg", **{**base, **kw})


def test_train_then_eval(tmp_path, tiny_motor, out_root, capsys):
    cfg = _train_cfg(tmp_path, tiny_motor)
    assert main(["train", "--config", str(cfg), "--kind", "rndr", "--seed", "3"]) == 0
    run = next(out_root.glob("train-*"))
    assert load_kv(run / "resolved.cfg")["seeds"] == "3"
    dump = run / "rndr_seed3" / "predictions.csv"
    assert dump.exists() and (run / "rndr_seed3" / "checkpoint.ctlw").exists()
    capsys.readouterr()
    assert main(["eval", "--dump", str(dump), "--manifest", str(tiny_motor)]) == 0
    out = capsys.readouterr().out
    assert "f1.compound = " in out and "macro_f1 = " in out
    assert main(["eval", "--dump", str(tmp_path / "missing.csv"), "--manifest", str(tiny_motor)]) == 1


def test_sweep_and_report(tmp_path, tiny_motor, tiny_drone, out_root, capsys):
    motor = _train_cfg(tmp_path, tiny_motor)
    assert main(["sweep", "--config", str(motor), "--architectures", "stl,rndr", "--seeds", "0,1",
                 "--setting", "motor_simo"]) == 0
    drone = write_cfg(tmp_path / "drone.cfg", manifest=tiny_drone, n_fft=128, hop=64, channels="4,6,6",
                      epochs=1, batch_size=16)
    assert main(["sweep", "--config", str(drone), "--architectures", "stl,cs,rndr", "--seeds", "0",
                 "--setting", "drone", "--jobs", "2"]) == 0
    sweeps = sorted(out_root.glob("sweep-*"))
    assert len(sweeps) == 2
    m = next(s for s in sweeps if (s / "motor_simo_scores.csv").exists())
    assert (m / "motor_simo_ranks.csv").exists()
    assert len(list((m / "cells").iterdir())) == 4
    capsys.readouterr()
    report_dir = tmp_path / "report"
    assert main(["report", *map(str, sweeps), "--out", str(report_dir)]) == 0
    names = {p.name for p in report_dir.iterdir()}
    assert {"headline_macro_f1.png", "motor_simo_components.png", "rank_summary.csv",
            "drone_ranks.csv", "motor_simo_means.csv"} <= names
    assert (report_dir / "headline_macro_f1.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "1. " in capsys.readouterr().out


def test_failed_cell_exit_1(tmp_path, tiny_drone, out_root, capsys):
    cfg = write_cfg(tmp_path / "d.cfg", manifest=tiny_drone, n_fft=128, hop=64, channels="4,6,6",
                    epochs=2, lr=1e30, batch_size=16)
    assert main(["sweep", "--config", str(cfg), "--architectures", "stl", "--seeds", "0"]) == 1
    assert "FAILED cell stl/seed0" in capsys.readouterr().err


def test_run_dirs_never_overwrite(tmp_path, out_root):
    from crosstalk_mtl.cli import make_run_dir

    a = make_run_dir("x", {"k": "v"})
    b = make_run_dir("x", {"k": "v"})
    assert a != b and a.exists() and b.exists()
    assert a.name.startswith("x-") and b.name.startswith(a.name)
