import csv
import json
import math

import pytest

from atlpinn import cli, harness


def write_config(tmp_path, **extra):
    cfg = {
        "problem": "diffreact",
        "modes": ["single", "hard"],
        "task_count": 2,
        "iterations": 2,
        "sampling": {"n_collocation": 20, "n_boundary_per_edge": 5, "n_initial": 5},
        "architecture": {"width": 4, "single_layers": 2, "expert_layers": 2, "tower_layers": 1},
        "resolution": [16, 8],
        "output_dir": str(tmp_path / "runs"),
    }
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_generate(tmp_path):
    out = tmp_path / "tasks"
    code = cli.main(["generate", "--problem", "burgers", "--tasks", "3", "--seed", "4",
                     "--out", str(out), "--resolution", "32", "8"])
    assert code == 0
    assert len(list(out.glob("task_*.grid"))) == 3
    kind, tasks = harness.read_tasks(out)
    assert kind == "burgers" and [t.task_id for t in tasks] == [0, 1, 2]
    assert tasks[0].grid.dims == (32, 8)


def test_train_single_mode(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--mode", "hard", "--cosine", "--task-id", "1"]) == 0
    (r,) = harness.read_reports(tmp_path / "runs")
    assert (r.task_id, r.mode, r.variant) == (1, "hard", "cos")


def test_train_all_modes_from_config(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "other"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert {(r.mode, r.variant) for r in harness.read_reports(out)} == {("single", "none"), ("hard", "org")}


def test_compare_then_report(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["compare", "--config", str(cfg)]) == 0
    rows = list(csv.DictReader((tmp_path / "runs" / "aggregate.csv").open()))
    assert [(r["mode"], r["variant"]) for r in rows] == [("single", "none"), ("hard", "cos"), ("hard", "org")]
    assert all(int(r["tasks"]) == 2 for r in rows)
    out = tmp_path / "loss"
    assert cli.main(["report", "--in", str(tmp_path / "runs"), "--out", str(out), "--smooth-sigma", "1.5"]) == 0
    files = sorted(out.glob("loss_*.csv"))
    assert len(files) == 6
    assert len(list(csv.reader(files[0].open()))) == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--config", "{cfg}", "--mode", "single", "--cosine"],
        ["train", "--config", "{cfg}", "--task-id", "7"],
        ["train", "--config", "{missing}"],
        ["compare", "--config", "{bad}"],
        ["report", "--in", "{empty}", "--out", "{tmp}/o"],
    ],
)
def test_config_errors_exit_one(tmp_path, argv):
    cfg = write_config(tmp_path)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"problem": "burgers", "bogus": 1}))
    (tmp_path / "empty").mkdir()
    names = {"cfg": cfg, "missing": tmp_path / "nope.json", "bad": bad, "empty": tmp_path / "empty", "tmp": tmp_path}
    assert cli.main([a.format(**names) for a in argv]) == 1


def test_failed_runs_exit_two(tmp_path, monkeypatch):
    real = harness.assemble_loss

    def broken(*args, **kw):
        loss = real(*args, **kw)
        loss.total = math.nan
        return loss

    monkeypatch.setattr(harness, "assemble_loss", broken)
    cfg = write_config(tmp_path, modes=["single"])
    assert cli.main(["compare", "--config", str(cfg)]) == 2
    reports = harness.read_reports(tmp_path / "runs")
    assert len(reports) == 2 and all(r.failed for r in reports)
    assert (tmp_path / "runs" / "aggregate.csv").exists()


def test_parser_rejects_unknown_problem():
    with pytest.raises(SystemExit):
        cli.main(["generate", "--problem", "heat", "--tasks", "2", "--out", "x"])
