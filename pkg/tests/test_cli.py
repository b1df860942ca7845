"""End-to-end tests for the c4 command-line interface."""

import json
import statistics

import pytest

from c4td.cli import main, render_metric_svg
from c4td.train import METRIC_COLUMNS, metrics_from_csv


def _write_config(tmp_path, **extra):
    cfg = {
        "out_dir": str(tmp_path / "out"),
        "dataset": str(tmp_path / "data.jsonl"),
        "env": {"n_modes": 3},
        "data": {"n_trajectories": 4, "seed": 0},
        "train": {"steps": 60, "hidden": [8, 8], "refresh_period": 25,
                  "batch_size": 16, "n_clusters": 2, "em_max_iters": 10,
                  "em_warm_iters": 3, "evaluate": False, "seed": 1},
    }
    cfg.update(extra)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


def _gen(tmp_path, config):
    assert main(["gen-data", "--config", str(config),
                 "--out", str(tmp_path / "data.jsonl")]) == 0


def test_gen_data_writes_dataset_and_summary(tmp_path, capsys):
    config, _ = _write_config(tmp_path)
    out = tmp_path / "data.jsonl"
    assert main(["gen-data", "--config", str(config), "--out", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info == {"path": str(out), "n_transitions": 160, "ds": 2, "da": 2,
                    "modes": 3, "seed": 0}
    assert out.read_text().count("\n") == 161  # header plus one line per row


def test_gen_data_is_deterministic(tmp_path):
    config, _ = _write_config(tmp_path)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen-data", "--config", str(config), "--out", str(a)]) == 0
    assert main(["gen-data", "--config", str(config), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_writes_artifacts_and_reruns_identically(tmp_path, capsys):
    config, cfg = _write_config(tmp_path)
    _gen(tmp_path, config)
    assert main(["train", "--config", str(config)]) == 0
    info = json.loads(capsys.readouterr().out.splitlines()[-1])
    out_dir = tmp_path / "out"
    assert info["steps"] == 60
    metrics = out_dir / "metrics.csv"
    critic = out_dir / "critic.json"
    assert metrics.is_file() and critic.is_file()
    refreshes = sorted(p.name for p in (out_dir / "mixtures").iterdir())
    assert refreshes == ["refresh_000000.json", "refresh_000025.json",
                         "refresh_000050.json"]
    first = metrics.read_bytes()

    other = _write_config(tmp_path, out_dir=str(tmp_path / "out2"))[0]
    assert main(["train", "--config", str(other)]) == 0
    assert (tmp_path / "out2" / "metrics.csv").read_bytes() == first


def test_train_baseline_suffixes_artifacts(tmp_path, capsys):
    config, _ = _write_config(tmp_path)
    _gen(tmp_path, config)
    assert main(["train", "--config", str(config), "--baseline"]) == 0
    out_dir = tmp_path / "out"
    assert (out_dir / "metrics_baseline.csv").is_file()
    assert (out_dir / "critic_baseline.json").is_file()
    assert not (out_dir / "mixtures").exists()


def test_train_set_override_reaches_the_trainer(tmp_path):
    config, _ = _write_config(tmp_path)
    _gen(tmp_path, config)
    assert main(["train", "--config", str(config),
                 "--set", "train.steps=0"]) == 0
    metrics = tmp_path / "out" / "metrics.csv"
    assert metrics.read_text().strip() == ",".join(METRIC_COLUMNS)


def test_unknown_keys_are_rejected_at_every_level(tmp_path, capsys):
    config, _ = _write_config(tmp_path)
    _gen(tmp_path, config)
    for assignment, fragment in (("bogus=1", "'bogus'"),
                                 ("env.warp=2", "'env.warp'"),
                                 ("data.rate=3", "'data.rate'"),
                                 ("train.moment=4", "'train.moment'")):
        assert main(["train", "--config", str(config),
                     "--set", assignment]) == 2
        err = capsys.readouterr().err
        assert "unknown config key" in err and fragment in err


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    assert "not valid JSON" in capsys.readouterr().err

    listroot = tmp_path / "list.json"
    listroot.write_text("[1, 2]")
    assert main(["train", "--config", str(listroot)]) == 2
    assert "root must be a JSON object" in capsys.readouterr().err

    config, _ = _write_config(tmp_path)
    assert main(["train", "--config", str(config)]) == 2  # dataset not generated
    assert "dataset not found" in capsys.readouterr().err

    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing)]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_steps_is_a_config_error(tmp_path, capsys):
    config, cfg = _write_config(tmp_path)
    _gen(tmp_path, config)
    del cfg["train"]["steps"]
    config.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(config)]) == 2
    assert "train.steps" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["report", "--out", "somewhere"]) == 2
    assert main(["verify", "--suite", "nonsense"]) == 2
    capsys.readouterr()


def test_thread_cap_validation(tmp_path, capsys, monkeypatch):
    config, _ = _write_config(tmp_path)
    monkeypatch.setenv("C4_THREADS", "banana")
    assert main(["gen-data", "--config", str(config),
                 "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "C4_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("C4_THREADS", "0")
    assert main(["gen-data", "--config", str(config),
                 "--out", str(tmp_path / "x.jsonl")]) == 2
    monkeypatch.setenv("C4_THREADS", "1")
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    assert main(["gen-data", "--config", str(config),
                 "--out", str(tmp_path / "x.jsonl")]) == 0
    import os
    assert os.environ["OMP_NUM_THREADS"] == "1"
    capsys.readouterr()


def test_verify_suite_passes_and_prints_json(capsys):
    assert main(["verify", "--suite", "gmm"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is True
    assert report["suite"] == "gmm"


def test_report_builds_plots_and_summary(tmp_path, capsys):
    config, cfg = _write_config(tmp_path)
    _gen(tmp_path, config)
    cfg["train"]["evaluate"] = True
    cfg["train"]["eval_every"] = 20
    cfg["train"]["eval_episodes"] = 1
    config.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(config)]) == 0
    assert main(["train", "--config", str(config), "--baseline"]) == 0
    out_dir = tmp_path / "out"
    capsys.readouterr()

    report_dir = tmp_path / "report"
    csvs = [str(out_dir / "metrics.csv"), str(out_dir / "metrics_baseline.csv")]
    assert main(["report", *csvs, "--out", str(report_dir)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["plots"] == ["td_loss.svg", "tr_n_sample_convention.svg",
                             "eval_return.svg"]

    svg = (report_dir / "td_loss.svg").read_text()
    assert svg.count("<polyline") == 2
    assert "metrics<" in svg and "metrics_baseline<" in svg

    summary = json.loads((report_dir / "summary.json").read_text())
    assert set(summary) == {"metrics", "metrics_baseline"}
    rows = metrics_from_csv(out_dir / "metrics.csv")
    td = [row["td_loss"] for row in rows]
    evals = [row["eval_return"] for row in rows if row["eval_return"] is not None]
    got = summary["metrics"]
    assert got["td_loss"]["final"] == td[-1]
    assert got["td_loss"]["median"] == statistics.median(td)
    assert got["eval_return"]["final"] == evals[-1]
    assert got["eval_return"]["median"] == statistics.median(evals)


def test_report_deduplicates_run_labels(tmp_path, capsys):
    config, cfg = _write_config(tmp_path)
    _gen(tmp_path, config)
    assert main(["train", "--config", str(config)]) == 0
    path = str(tmp_path / "out" / "metrics.csv")
    capsys.readouterr()
    assert main(["report", path, path, "--out", str(tmp_path / "rep")]) == 0
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert set(summary) == {"metrics", "metrics-2"}
    capsys.readouterr()


def test_report_rejects_malformed_csv_with_file_and_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text(",".join(METRIC_COLUMNS) + "\n"
                   + "1,0.5,0.1,0.6,0.01,0,0.0,\n"
                   + "2,x,0.1,0.6,0.01,0,0.0,\n")
    assert main(["report", str(bad), "--out", str(tmp_path / "rep")]) == 2
    err = capsys.readouterr().err
    assert "bad.csv" in err and "line 3" in err


def test_svg_renderer_handles_empty_and_constant_series():
    empty = render_metric_svg("eval_return", [("run", [])])
    assert "no data" in empty and "<polyline" not in empty
    rows = [{"step": 1, "td_loss": 2.0}, {"step": 5, "td_loss": 2.0}]
    flat = render_metric_svg("td_loss", [("run", rows)])
    assert flat.count("<polyline") == 1


def test_svg_renderer_thins_long_series():
    rows = [{"step": i, "td_loss": float(i % 7)} for i in range(10001)]
    svg = render_metric_svg("td_loss", [("run", rows)])
    line = next(part for part in svg.splitlines() if "<polyline" in part)
    coords = line.split('points="')[1].split('"')[0].split()
    assert len(coords) <= 2001
    # the last step must survive thinning; it lands on the right plot edge
    assert coords[-1].startswith("560.00,")
    rows_short = [{"step": i, "td_loss": 1.0 * i} for i in range(50)]
    svg_short = render_metric_svg("td_loss", [("run", rows_short)])
    short_line = next(p for p in svg_short.splitlines() if "<polyline" in p)
    short_coords = short_line.split('points="')[1].split('"')[0].split()
    assert len(short_coords) == 50
