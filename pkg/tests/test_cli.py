import csv
import re

import pytest
import yaml

from raceavoid import cli
from raceavoid.policy import init_policy, load_checkpoint, save_checkpoint

FAST_EVAL = {"scenario": {"trials": 1, "timeout": 3.0, "directions": ["h2h"]}}
FAST_TRAIN = {"env": {"n_obstacles": 2, "episode_cap": 300}}


def write_config(tmp_path, data):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_config_error_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"scene": "missing/track.json", "workers": 0})
    rc = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert rc == 2
    assert str(tmp_path / "missing" / "track.json") in err and "workers" in err


def test_train_total_steps_reversed(tmp_path, capsys, monkeypatch):
    seen = {}
    real = cli.train

    def spy(tc, out, seed, mode=None, **kw):
        seen["mode"], seen["env_mode"] = mode, tc.env.mode
        return real(tc, out, seed, mode=mode, **kw)

    monkeypatch.setattr(cli, "train", spy)
    out = tmp_path / "t"
    rc = cli.main(["train", "--config", write_config(tmp_path, FAST_TRAIN), "--seed", "1", "--mode", "reversed",
                   "--total-steps", "4096", "--out", str(out)])
    assert rc == 0
    assert seen == {"mode": "reversed", "env_mode": "reversed"}
    progress = [l for l in capsys.readouterr().out.splitlines() if l.startswith("step")]
    assert len(progress) == 2
    assert yaml.safe_load((out / "config.yaml").read_text())["mode"] == "reversed"
    assert (out / "curve.csv").exists() and (out / "curve.svg").exists()
    assert sorted(p.name for p in out.glob("*.kevd")) == ["ckpt_000000000000.kevd", "ckpt_000000004096.kevd"]


def test_eval_mpc_and_checkpoint_combined(tmp_path, capsys):
    ckpt = tmp_path / "p.kevd"
    save_checkpoint(init_policy(0), None, ckpt)
    out = tmp_path / "e"
    argv = ["eval", "--config", write_config(tmp_path, FAST_EVAL), "--out", str(out),
            "--controller", "mpc-apf", "--controller", f"ckpt:{ckpt}=Random"]
    assert cli.main(argv) == 0
    assert (out / "telemetry_h2h.csv").exists()
    header = next(csv.reader(open(out / "telemetry_h2h.csv")))
    assert "iterations" in header
    rows = list(csv.reader(open(out / "table.csv")))
    assert [r[0] for r in rows[1:3]] == ["MPC-APF", "Random"]
    assert rows[1][2] == "" and rows[1][4] == ""
    assert (out / "table.txt").exists() and (out / "config.yaml").exists()
    assert len(list((out / "plots").glob("*.svg"))) == 2
    first = (out / "table.csv").read_text()
    assert cli.main(argv) == 0
    assert (out / "table.csv").read_text() == first


def test_eval_corrupt_checkpoint_surfaces_error(tmp_path, capsys):
    ckpt = tmp_path / "bad.kevd"
    save_checkpoint(init_policy(0), None, ckpt)
    data = bytearray(ckpt.read_bytes())
    data[40] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    with pytest.raises(Exception) as exc:
        load_checkpoint(ckpt)
    rc = cli.main(["eval", "--config", write_config(tmp_path, FAST_EVAL), "--out", str(tmp_path / "e"),
                   "--controller", f"ckpt:{ckpt}"])
    assert rc == 1
    assert str(exc.value) in capsys.readouterr().err


def test_unknown_controller(tmp_path):
    assert cli.main(["eval", "--out", str(tmp_path / "e"), "--controller", "joystick"]) == 2


def test_bench_report(tmp_path, capsys):
    out = tmp_path / "b"
    cfg = write_config(tmp_path, {"bench": {"mpc_reps": 20}})
    assert cli.main(["bench", "--config", cfg, "--reps", "1500", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "30,466" in text and "published FLOPS" in text
    n = int(re.search(r"samples: policy (\d+)", text).group(1))
    assert n >= 1500
    rows = {r["method"]: r for r in csv.DictReader(open(out / "bench.csv"))}
    assert rows["DRL ANN"]["flops"] == "30466" and rows["MPC-APF"]["published_flops"] == "960000"


def test_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["bench", "--seed", "4", "--reps", "10", "--config",
                     write_config(tmp_path, {"bench": {"mpc_reps": 5}})]) == 0
    assert (tmp_path / "results" / "bench-seed4" / "bench.csv").exists()
