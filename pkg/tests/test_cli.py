import dataclasses
import json

import pytest

from effowt.cli import main
from effowt.experiment.config import dumps_config


@pytest.fixture(scope="module")
def cli_cfg(tiny_cfg, tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(dumps_config(tiny_cfg.replace(optimizer=dataclasses.replace(tiny_cfg.optimizer, steps=3))))
    return str(path)


def _run(argv):
    return main(["--quiet", *argv])


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(cli_cfg, tmp_path_factory):
    runs = []
    for tag in ("a", "b"):
        root = tmp_path_factory.mktemp(f"pipe_{tag}")
        assert _run(["--config", cli_cfg, "--out", str(root / "data"), "gen-data"]) == 0
        assert _run(["train", "--config", cli_cfg, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
        assert _run(["infer", "--config", cli_cfg, "--data", str(root / "data"), "--checkpoint", str(root / "run"),
                     "--out", str(root / "pred.jsonl")]) == 0
        for split in ("known", "unknown", "all"):
            assert _run(["eval", "owta", "--gt", str(root / "data/eval/gt.jsonl"), "--pred", str(root / "pred.jsonl"),
                         "--known", "square,circle", "--split", split, "--out", str(root / "metrics")]) == 0
        runs.append(root)
    return runs


def test_pipeline_outputs(pipeline):
    root = pipeline[0]
    for rel in ("data/meta.json", "run/model.bin", "run/loss_curve.png", "pred.jsonl",
                "metrics/owta_known.json", "metrics/owta_unknown.json", "metrics/owta_all.png"):
        assert (root / rel).exists(), rel
    res = json.loads((root / "metrics/owta_unknown.json").read_text())
    assert res["split"] == "unknown" and 0.0 <= res["owta"] <= 1.0 and len(res["per_alpha"]) == 19


def test_pipeline_byte_identical(pipeline):
    a, b = pipeline
    assert _files(a) == _files(b)


def test_report_params_and_memory(cli_cfg, tmp_path):
    for tag in ("a", "b"):
        assert _run(["report", "params", "--config", "reference", "--out", str(tmp_path / tag)]) == 0
        assert _run(["report", "memory", "--config", cli_cfg, "--strategy", "side,zero_shot",
                     "--iterations", "1", "--out", str(tmp_path / tag)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"params.json", "params.csv", "params.png", "memory.json", "memory.csv", "memory.png"}
    assert a == b
    assert a["params.csv"].decode().splitlines()[0] == "strategy,trainable_params,param_ratio,peak_bytes,memory_ratio"


def test_probe_exit_codes(tmp_path, capsys):
    assert _run(["probe", "receptive-field", "--grid", "8x8", "--layers", "2", "--out", str(tmp_path / "p2")]) == 0
    assert json.loads((tmp_path / "p2/receptive_field.json").read_text())["full_coverage"] is True
    assert (tmp_path / "p2/receptive_field.pgm").read_bytes().startswith(b"P5")
    assert _run(["probe", "receptive-field", "--grid", "8x8", "--layers", "1", "--out", str(tmp_path / "p1")]) == 0
    one = json.loads((tmp_path / "p1/receptive_field.json").read_text())
    assert one["matches_line_union"] is True and one["min_coverage"] == one["max_coverage"] == 28
    assert _run(["probe", "receptive-field", "--grid", "4x4", "--layers", "1", "--dense",
                 "--out", str(tmp_path / "pd")]) == 0
    assert json.loads((tmp_path / "pd/receptive_field.json").read_text())["full_coverage"] is True


def test_probe_rerun_identical(tmp_path):
    for tag in ("a", "b"):
        _run(["probe", "receptive-field", "--grid", "6x6", "--layers", "1", "--out", str(tmp_path / tag)])
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"data": {"bogus": 1}}')
    assert _run(["--config", str(bad), "gen-data", "--out", str(tmp_path / "d")]) == 2
    assert "unknown config key(s): data.bogus" in capsys.readouterr().err
    assert _run(["probe", "receptive-field", "--grid", "3by3"]) == 2
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert _run(["eval", "owta", "--gt", str(empty), "--pred", str(empty), "--out", str(tmp_path / "m")]) == 2
    assert "undefined" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as ei:
        main([])
    assert ei.value.code == 2
