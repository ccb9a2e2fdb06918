import csv
import os
import subprocess
import sys

import pytest

from shapepu import cli
from shapepu import config as cfgmod
from shapepu.config import ConfigError, RunConfig, from_mapping, load_config, parse_text

TINY = ["--set", "phantom.size=80", "--set", "n_train=3", "--set", "n_val=2", "--set", "n_test=2"]
TRAIN = ["--set", "epochs=2", "--set", "warmup_epochs=1", "--set", "batch_size=2", "--set", "lr=0.001"]


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(root / "d")] + TINY) == 0
    return root / "d"


# ---------------------------------------------------------------- config


def test_config_roundtrip_and_hash(tmp_path):
    cfg = RunConfig(seed=3, lr=0.01)
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    back = load_config(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert RunConfig(run_dir="elsewhere").hash() == RunConfig().hash()
    assert RunConfig(seed=1).hash() != RunConfig().hash()


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        from_mapping({"learning_rate": "1"})
    with pytest.raises(ConfigError, match="unknown key"):
        from_mapping({"phantom.seed": "1"})
    with pytest.raises(ConfigError):
        from_mapping({"epochs": "many"})
    with pytest.raises(ConfigError):
        from_mapping({"warmup_epochs": "500"})
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("seed=1\nseed=2\n")
    with pytest.raises(ConfigError):
        parse_text("just words\n")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.txt")


def test_config_parsing_types():
    vals = parse_text("# header\nmarginal_background = off  # trailing\nphantom.lv_radius=8,12\n")
    cfg = from_mapping(vals)
    assert cfg.marginal_background is False
    assert cfg.phantom.lv_radius == (8.0, 12.0)


def test_thread_limit_env(monkeypatch):
    monkeypatch.setenv("SHAPEPU_THREADS", "0")
    with pytest.raises(ConfigError):
        cfgmod.thread_limit()
    monkeypatch.setenv("SHAPEPU_THREADS", "1")
    with cfgmod.thread_limit():
        pass


# ---------------------------------------------------------------- exit codes


def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["eval"]) == 1
    assert cli.main(["gradcheck", "--set", "bogus=1"]) == 1
    assert cli.main(["gradcheck", "--set", "novalue"]) == 1


def test_runtime_errors_exit_2(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "missing")]) == 2
    assert cli.main(["eval", "--data", str(tmp_path), "--checkpoint", "x.ckpt"]) == 2


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    assert cli.main(["gradcheck", "--seeds", "1", "--corrupt", "softmax"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_console_script_module_entry():
    out = subprocess.run([sys.executable, "-m", "shapepu.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout


# ---------------------------------------------------------------- commands


def test_gen_data_layout_and_force(data_dir):
    for split, n in (("train", 3), ("val", 2), ("test", 2)):
        assert len(list((data_dir / split).glob("img_*.pgm"))) == n
    assert (data_dir / "manifest.txt").is_file() and (data_dir / "config.txt").is_file()
    assert cli.main(["gen-data", "--out", str(data_dir)] + TINY) == 2
    assert cli.main(["gen-data", "--out", str(data_dir), "--force"] + TINY) == 0


def test_estimate_alpha_oracle_csv(data_dir, tmp_path):
    out = tmp_path / "alpha"
    assert cli.main(["estimate-alpha", "--data", str(data_dir), "--oracle", "--trajectories", "--out", str(out)] + TINY) == 0
    rows = _csv(out / "alpha_test.csv")
    assert rows[0][:2] == ["image_id", "alpha_est_0"] and rows[0][-1] == "config_hash"
    assert len(rows) == 3
    for r in rows[1:]:
        est = [float(x) for x in r[1:5]]
        assert abs(sum(est) - 1) < 1e-9
    assert (out / "alpha_test.csv").read_bytes().count(b"\r\n") == 3
    traj = _csv(out / "alpha_test_trajectories.csv")
    assert traj[0] == ["image_id", "iter", "alpha_0", "alpha_1", "alpha_2", "alpha_3"]


def test_train_eval_resume(data_dir, tmp_path, monkeypatch):
    full = tmp_path / "full"
    args = ["train", "--data", str(data_dir)] + TINY + TRAIN
    assert cli.main(args + ["--out", str(full)]) == 0
    hist = _csv(full / "history.csv")
    assert hist[0][:6] == ["epoch", "phase", "L+", "L-", "L_global", "total"]
    assert [r[1] for r in hist[1:]] == ["warmup", "full"]
    assert hist[1][3] == ""  # negative loss not computed during warm-up
    # a second run into the same directory is refused
    assert cli.main(args + ["--out", str(full)]) == 2

    # interrupt a second run after epoch 0, then resume
    part = tmp_path / "part"
    real_save = cli.save_checkpoint
    calls = {"last": 0}

    def flaky_save(path, ck):
        if str(path).endswith("last.ckpt"):
            calls["last"] += 1
            if calls["last"] == 2:
                raise KeyboardInterrupt
        real_save(path, ck)

    monkeypatch.setattr(cli, "save_checkpoint", flaky_save)
    with pytest.raises(KeyboardInterrupt):
        cli.main(args + ["--out", str(part)])
    monkeypatch.setattr(cli, "save_checkpoint", real_save)
    assert cli.main(args + ["--out", str(part), "--resume"]) == 0
    for name in ("last.ckpt", "best.ckpt", "history.csv"):
        assert (part / name).read_bytes() == (full / name).read_bytes(), name
    # resuming under a different config is refused
    assert cli.main(args + ["--out", str(part), "--resume", "--set", "lambda2=0.1"]) == 2

    ev = tmp_path / "eval"
    assert cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(full / "best.ckpt"), "--out", str(ev)] + TINY) == 0
    rows = _csv(ev / "eval_test.csv")
    assert rows[0] == ["image_id", "class", "dice", "hd"]
    body = rows[1:-1]
    assert len(body) == 2 * 3
    dices = [float(r[2]) for r in body]
    assert rows[-1][:2] == ["mean", "all"]
    assert float(rows[-1][2]) == pytest.approx(sum(dices) / len(dices), abs=1e-12)
    assert len(list((ev / "predictions").glob("pred_*.pgm"))) == 2


def test_seed_flag_position_independent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--seed", "5", "gen-data", "--out", str(a)] + TINY) == 0
    assert cli.main(["gen-data", "--seed", "5", "--out", str(b)] + TINY) == 0
    assert (a / "test" / "img_5.pgm").read_bytes() == (b / "test" / "img_5.pgm").read_bytes()
    assert "seed=5" in (a / "config.txt").read_text()


def test_threads_env_respected(tmp_path):
    env = dict(os.environ, SHAPEPU_THREADS="1")
    out = subprocess.run(
        [sys.executable, "-m", "shapepu.cli", "gen-data", "--out", str(tmp_path / "d")] + TINY,
        capture_output=True, text=True, env=env,
    )
    assert out.returncode == 0, out.stderr
