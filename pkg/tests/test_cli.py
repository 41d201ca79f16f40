import json

import pytest

from adarand.harness.cli import main
from adarand.harness.config import dump_config
from adarand.harness.data import generate_synthetic, save_csv_dataset
from adarand.numerics import RngStream


@pytest.fixture
def cfg_file(tiny_cfg, tmp_path):
    path = tmp_path / "cfg.json"
    dump_config(tiny_cfg, path)
    return path


def _ok(capsys):
    record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert record["status"] == "ok"
    return record


def test_pretrain_finetune_diag(cfg_file, tiny_cfg, tmp_path, capsys):
    assert main(["pretrain", "--config", str(cfg_file), "--out", str(tmp_path / "pre")]) == 0
    ckpt = _ok(capsys)["checkpoint"]
    assert main(["finetune", "--config", str(cfg_file), "--pretrained", ckpt, "--out", str(tmp_path / "ft")]) == 0
    assert 0.0 <= _ok(capsys)["test_acc"] <= 1.0

    test = generate_synthetic(tiny_cfg.dataset, RngStream(tiny_cfg.seeds.data, "data")).test
    save_csv_dataset(test, tmp_path / "test.csv")
    rc = main(["diag", "--checkpoint", str(tmp_path / "ft" / "model.json"), "--data", str(tmp_path / "test.csv"),
               "--out", str(tmp_path / "diag")])
    assert rc == 0 and _ok(capsys)["n"] == len(test)
    report = json.loads((tmp_path / "diag" / "diagnostics.json").read_text())
    assert set(report) == {"mean_feature_norm", "entropy", "cond_entropy", "mutual_info", "mean_ce_grad_norm"}
    assert report["mutual_info"] == report["entropy"] - report["cond_entropy"]
    assert (tmp_path / "diag" / "pca.csv").read_text().startswith("pc1,pc2,label\n")


def test_sweep_command(cfg_file, tmp_path, capsys):
    rc = main(["sweep", "--config", str(cfg_file), "--axis", "kind", "--values", "FT,AdaRand",
               "--seeds", "2", "--out", str(tmp_path / "sw")])
    assert rc == 0
    record = _ok(capsys)
    assert record["cells"] == 2 and record["failed"] == 0
    assert (tmp_path / "sw" / "summary.csv").exists()


def test_failure_prints_error_record(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"reg": {"kind": "Nope"}}))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and err["command"] == "pretrain" and err["error"] == "ValidationError"


def test_missing_file_is_an_error(tmp_path, capsys):
    rc = main(["diag", "--checkpoint", str(tmp_path / "none.json"), "--data", "x.csv", "--out", str(tmp_path)])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_malformed_csv_reports_the_line(cfg_file, tmp_path, capsys):
    main(["pretrain", "--config", str(cfg_file), "--out", str(tmp_path / "pre")])
    capsys.readouterr()
    (tmp_path / "d.csv").write_text("f0,label\n1,0\n2\n")
    rc = main(["diag", "--checkpoint", str(tmp_path / "pre" / "pretrained.json"), "--data",
               str(tmp_path / "d.csv"), "--out", str(tmp_path / "diag")])
    err = json.loads(capsys.readouterr().err)
    assert rc == 1 and err["error"] == "CsvFormatError" and ":3:" in err["message"]


@pytest.mark.parametrize("argv", [[], ["train"], ["sweep", "--config", "c.json"],
                                  ["sweep", "--config", "c", "--axis", "beta", "--values", "1", "--out", "o"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
