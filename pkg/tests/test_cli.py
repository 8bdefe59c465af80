import csv
import json

import pytest

from cloth import cli


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 0, "dataset": {"kind": "gaussian_shift", "n": 120}, "iters": 20,
                                "batch_size": 16, "log_interval": 10, "out": str(tmp_path / "out")}))
    return path


def test_train_writes_bundle(config, tmp_path):
    assert cli.main(["train", "--config", str(config)]) == 0
    out = tmp_path / "out"
    for name in ("metrics.csv", "model.json", "summary.json", "config.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and "oracle" in summary


def test_print_config_needs_no_file(capsys):
    assert cli.main(["train", "--print-config", "--seed", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 4


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "none.json")]) == 2
    assert cli.main(["train"]) == 2


def test_numeric_failure_exits_3(config, monkeypatch, tmp_path):
    from cloth import engine
    from cloth.errors import TrainingError

    def boom(*a, **k):
        raise TrainingError("non-finite L_C")

    monkeypatch.setattr(engine, "generator_step", boom)
    assert cli.main(["train", "--config", str(config)]) == 3
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["status"] == "numeric_failure"
    assert (tmp_path / "out" / "checkpoint_last_good.json").exists()


def test_verify_failure_exits_4(monkeypatch, capsys):
    from cloth import verify
    monkeypatch.setattr(verify, "run", lambda suite, seed: [verify.Check("x", "y", False, "inputs=[1]")])
    assert cli.main(["verify", "--suite", "entropy"]) == 4
    assert "[FAIL] x/y inputs=[1]" in capsys.readouterr().out


def test_verify_entropy_passes():
    assert cli.main(["verify", "--suite", "entropy"]) == 0


def test_sweep_q_rejects_duplicates(config):
    assert cli.main(["sweep-q", "--config", str(config), "--q", "2,2"]) == 2


def test_sweep_q_rows(config, tmp_path):
    assert cli.main(["sweep-q", "--config", str(config), "--q", "1,3"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "sweep_q.csv")))
    assert [r["q"] for r in rows] == ["1", "3"]


def test_ablate_rows(config, tmp_path):
    assert cli.main(["ablate", "--config", str(config), "--rows", "1,7"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "ablation.csv")))
    assert [r["row"] for r in rows] == ["1", "7"]


def test_bench_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--p", "2,16", "--q", "1,3", "--repeats", "1", "--batch", "32", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert list(rows[0]) == ["method", "p", "q", "time_per_batch_ms", "total_ms"]
    assert len(rows) == 8


def test_compare_ot_on_saved_model(config, tmp_path):
    assert cli.main(["train", "--config", str(config)]) == 0
    assert cli.main(["compare-ot", "--config", str(config), "--model", str(tmp_path / "out" / "model.json")]) == 0
    rep = json.loads((tmp_path / "out" / "compare_ot.json").read_text())
    assert rep["amortized_ge_exact"]


def test_export_plot(config, tmp_path):
    cli.main(["train", "--config", str(config)])
    metrics = str(tmp_path / "out" / "metrics.csv")
    svg = tmp_path / "p.svg"
    assert cli.main(["export-plot", "--csv", metrics, "--columns", "L_C,W_est", "--out", str(svg)]) == 0
    assert svg.read_text().count('class="series"') == 2
    assert cli.main(["export-plot", "--csv", metrics, "--columns", "nope", "--out", str(svg)]) == 2
