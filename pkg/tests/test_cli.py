import json

import pytest

from hcrn.cli import main

TRAIN = """\
n_clips = 5
clip_len = 5
d = 8
d_in = 6
min_segment = 2
n_train = 16
n_val = 8
n_test = 8
epochs = 1
batch_size = 8
"""


def test_train_eval_gen_data_and_bench(tmp_path, capsys):
    (tmp_path / "data.txt").write_text("n_clips = 5\nclip_len = 5\nd_in = 6\nmin_segment = 2\nn_train = 16\nn_val = 8\nn_test = 8\n")
    assert main(["gen-data", "--spec", str(tmp_path / "data.txt"), "--out", str(tmp_path / "data")]) == 0
    assert "oracle accuracy" in capsys.readouterr().out

    (tmp_path / "run.txt").write_text(TRAIN + f"dataset = {tmp_path / 'data'}\n")
    assert main(["train", "--config", str(tmp_path / "run.txt"), "--seed", "3", "--out", str(tmp_path / "run")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert (tmp_path / "run" / "metrics.jsonl").exists()

    assert main(["eval", "--checkpoint", summary["checkpoint"], "--dataset", str(tmp_path / "data")]) == 0
    assert json.loads(capsys.readouterr().out) == summary["test"]

    (tmp_path / "bench.txt").write_text("n_clips = 8\nd = 4\n")
    assert main(["bench", "--config", str(tmp_path / "bench.txt")]) == 0
    assert capsys.readouterr().out.startswith("config_id,level,predicted,measured,wallclock_ms")


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("learning_rate = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "bad.txt")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
