import json

import numpy as np
import pytest

from essnet import cli
from essnet.cli import ConfigError, main, parse_config
from essnet.trainer import NumericError

TINY = {"height": 32, "width": 32, "n_a_train": 3, "n_a_val": 2, "n_b_train": 3, "n_b_val": 2, "n_b_test": 3,
        "gen_width": 4, "gen_blocks": 1, "disc_width": 4, "epochs": 1, "pool_size": 2, "seed": 5}


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_empty_file_gives_desk_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    cfg = parse_config(path, "desk")
    assert (cfg["height"], cfg["width"], cfg["gen_width"], cfg["gen_blocks"]) == (64, 64, 16, 3)
    assert cfg["lambda_cycle_a"] == 10.0 and cfg["lr_g"] == 1e-4 and cfg["lr_d"] == 2e-4


def test_parity_preset():
    cfg = parse_config(preset="paper-parity")
    assert (cfg["height"], cfg["gen_width"], cfg["gen_blocks"], cfg["disc_width"]) == (256, 64, 9, 64)


def test_flag_beats_file_beats_preset(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lambda_seg": 1.0, "epochs": 7}))
    cfg = parse_config(path, "desk", {"lambda_seg": 2.0})
    assert cfg["lambda_seg"] == 2.0 and cfg["epochs"] == 7


def test_unknown_key_named(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lamda_5": 1}))
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    assert exc.value.key == "lamda_5"


@pytest.mark.parametrize("values,key", [({"epochs": "ten"}, "epochs"), ({"seed": 1.5}, "seed"),
                                        ({"paper_protocol": 1}, "paper_protocol"), ({"lr_g": True}, "lr_g"),
                                        ({"mode": "gan"}, "mode"), ({"lambda_seg": -1}, "lambda_seg")])
def test_type_errors_named(tmp_path, values, key):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(values))
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    assert exc.value.key == key


def test_int_accepted_for_float():
    assert parse_config(overrides={"lr_g": 1})["lr_g"] == 1.0


def test_cli_unknown_key_exit_code(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lamda_5": 1}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    err = _error(capsys)
    assert err["key"] == "lamda_5" and err["exit"] == 2


def test_cli_data_error_exit_code(tmp_path, capsys):
    assert main(["segment", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 3
    assert _error(capsys)["error"] == "data"


def test_cli_io_error_exit_code(tmp_path, tiny_file, capsys):
    args = ["segment", "--config", str(tiny_file), "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path)]
    assert main(args) == 5
    assert _error(capsys)["error"] == "io"


def test_cli_numeric_error_exit_code(tmp_path, tiny_file, capsys, monkeypatch):
    def boom(*_, **__):
        raise NumericError("non-finite loss at step 0")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--config", str(tiny_file), "--out", str(tmp_path / "o")]) == 4
    assert _error(capsys)["error"] == "numeric"


def test_cli_end_to_end(tmp_path, tiny_file, capsys):
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(tiny_file), "--out", str(tmp_path / "d")]) == 0
    data = str(tmp_path / "d" / "data")
    assert main(["train", "--config", str(tiny_file), "--data", data, "--lambda-seg", "2", "--out", str(out)]) == 0
    capsys.readouterr()
    resolved = json.loads((out / "resolved.json").read_text())
    assert resolved["lambda_seg"] == 2.0 and resolved["data_dir"] == data
    ckpt = str(out / "last")
    for cmd in ("translate", "segment", "evaluate", "montage"):
        assert main([cmd, "--config", str(tiny_file), "--data", data, "--checkpoint", ckpt,
                     "--out", str(tmp_path / cmd)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[2])
    assert 0 <= summary["spleen_median"] <= 1
    assert len(list((tmp_path / "translate" / "translated").glob("*.png"))) == TINY["n_a_val"]
    seg = np.fromfile(next((tmp_path / "segment" / "segmented").glob("*.u8")), np.uint8)
    assert seg.size == 32 * 32 and seg.max() < 7
    assert (tmp_path / "montage" / "montage.png").exists()


def test_resolved_json_reproduces_run(tmp_path, tiny_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(tiny_file), "--out", str(a)]) == 0
    resolved = json.loads((a / "resolved.json").read_text())
    resolved["out"] = str(b)
    (tmp_path / "again.json").write_text(json.dumps(resolved))
    assert main(["train", "--config", str(tmp_path / "again.json")]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_segmenting_b_train_is_fine_but_scoring_it_is_not(tmp_path, tiny_file, capsys):
    out = tmp_path / "r"
    main(["train", "--config", str(tiny_file), "--out", str(out)])
    args = ["--config", str(tiny_file), "--checkpoint", str(out / "last"), "--split", "B_train"]
    assert main(["segment", *args, "--out", str(tmp_path / "s")]) == 0
    assert main(["evaluate", *args, "--out", str(tmp_path / "e")]) == 2
    assert _error(capsys)["key"] == "split"


def test_grad_check_command(tmp_path, capsys):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"gc_samples": 20, "gc_h": 1e-5}))
    assert main(["grad-check", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "gradcheck.json").read_text())
    assert summary["samples"] == 20 and summary["fraction_within"] == 1.0
