import json

import pytest

from gradlab.cli import PRESETS, main

TINY = {
    "corpus": {"num_speakers": 3, "utterances_per_speaker": 7},
    "embedder": {"steps": 10},
    "schedule": {"samplings": 4, "max_iterations": 20, "log_every": 10},
    "max_targets": 2,
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_full_pipeline(tmp_path, cfg_path, capsys):
    assert main(["gen-corpus", "--config", str(cfg_path), "--out", str(tmp_path / "corpus")]) == 0
    assert (tmp_path / "corpus" / "manifest.csv").exists()
    assert main(["train-embedder", "--config", str(cfg_path), "--corpus", str(tmp_path / "corpus"),
                 "--out", str(tmp_path / "enc.json")]) == 0
    capsys.readouterr()
    args = ["attack", "--config", str(cfg_path), "--set", f'corpus_dir="{tmp_path / "corpus"}"',
            "--set", f'embedder_path="{tmp_path / "enc.json"}"', "--out", str(tmp_path / "run")]
    assert main(args) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["aggregate"]["n_rows"] == 2
    assert main(["report", str(tmp_path / "run")]) == 0
    assert json.loads(capsys.readouterr().out)["aggregate"] == out["aggregate"]


def test_loaded_corpus_gives_same_report(tmp_path, cfg_path):
    main(["gen-corpus", "--config", str(cfg_path), "--out", str(tmp_path / "corpus")])
    main(["attack", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
    main(["attack", "--config", str(cfg_path), "--set", f'corpus_dir="{tmp_path / "corpus"}"',
          "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "report.csv").read_text().splitlines()[1:]
    b = (tmp_path / "b" / "report.csv").read_text().splitlines()[1:]
    assert a == b


def test_sweep_preset(tmp_path, cfg_path):
    assert main(["sweep", "--config", str(cfg_path), "--preset", "dpsgd", "--out", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "summary.csv").read_text().splitlines()
    assert len(rows) == 1 + len(PRESETS["dpsgd"])


def test_sweep_grid_file(tmp_path, cfg_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([{"defense.kind": "dropout", "defense.rate": 0.1}]))
    assert main(["sweep", "--config", str(cfg_path), "--grid", str(grid), "--out", str(tmp_path / "s")]) == 0


def test_errors_are_machine_readable(tmp_path, cfg_path, capsys):
    assert main(["attack", "--config", str(tmp_path / "missing.json")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and err["command"] == "attack"
    assert main(["attack", "--config", str(cfg_path), "--set", "mode.kind=teleport"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    assert main(["attack", "--config", str(cfg_path), "--set", "nonsense"]) == 1


def test_report_detects_tampering(tmp_path, cfg_path, capsys):
    main(["attack", "--config", str(cfg_path), "--out", str(tmp_path / "r")])
    agg = tmp_path / "r" / "aggregate.json"
    data = json.loads(agg.read_text())
    data["top1"] = 0.123
    agg.write_text(json.dumps(data))
    capsys.readouterr()
    assert main(["report", str(tmp_path / "r")]) == 1
    assert "does not match" in json.loads(capsys.readouterr().err)["message"]


def test_usage_error_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code != 0
