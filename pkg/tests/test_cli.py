import filecmp
import json

import numpy as np
import pytest

from leakimpact.cli import load_run_config, main
from leakimpact.errors import ConfigError
from leakimpact.eventlog import EventLog, load_events, save_events

SMALL = {
    "synthetic": {"num_users": 300, "num_items": 120, "days": 20, "events_per_day": 500},
    "split": {"train_end_day": 12, "eval_days": 2},
    "lis": {"n_boot": 30},
    "align": {"period_a_end_day": 8, "period_b_start_day": 13, "b_train_end_day": 17,
              "b_eval_days": 2, "n_boot": 20, "hyper": {"min_updates": 5, "recall_k": 5}},
    "leaks": [{"kind": "next_click"}, {"kind": "future_embedding", "horizon_n_days": 7},
              {"kind": "similar_items", "k": 5}],
}


def _config(tmp_path, extra=None):
    d = json.loads(json.dumps(SMALL))
    d.update(extra or {})
    p = tmp_path / "run.json"
    p.write_text(json.dumps(d))
    return p


def _pipeline(cfg, out):
    for cmd in ("gen", "split", "train", "lis", "align", "report"):
        assert main([cmd, "--config", str(cfg), "--out", str(out)]) == 0, cmd


def _tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    _pipeline(cfg, tmp / "a")
    _pipeline(cfg, tmp / "b")
    return tmp / "a", tmp / "b"


class TestPipeline:
    def test_manifest_counts_lines(self, two_runs):
        out = two_runs[0]
        m = json.loads((out / "manifest.json").read_text())
        n_lines = len((out / "events.jsonl").read_text().splitlines())
        assert m["n_events"] == m["n_lines"] == n_lines == 10_000

    def test_three_leaks_three_reports(self, two_runs):
        lis = two_runs[0] / "lis"
        names = sorted(p.name for p in lis.glob("*.json"))
        assert names == ["future_embedding_n7.json", "next_click.json", "similar_items_k5.json"]
        summary = (lis / "summary.txt").read_text().splitlines()
        assert summary[0].startswith("# config")
        assert len(summary) == 1 + 1 + 3
        rows = (lis / "summary.csv").read_text().splitlines()
        assert rows[0] == "leak,auc_base,auc_leak,lis,ci_low,ci_high,significant"
        assert len(rows) == 4

    def test_report_is_exact_difference(self, two_runs):
        for p in (two_runs[0] / "lis").glob("*.json"):
            r = json.loads(p.read_text())
            assert r["lis"] == r["auc_leak"] - r["auc_base"]
            assert "config_hash" in r["metadata"]

    def test_report_sections_and_figures(self, two_runs):
        out = two_runs[0]
        text = (out / "report.txt").read_text()
        for s in ("train", "lis", "align", "end"):
            assert f"===== {s} =====" in text
        for f in ("lis.png", "recall.png", "downstream.png"):
            assert (out / "figures" / f).stat().st_size > 0
        assert json.loads((out / "align" / "downstream.json").read_text())["delta_raw"] == 0.0

    def test_byte_identical_reruns(self, two_runs):
        a, b = two_runs
        assert _tree(a) == _tree(b)
        _, mismatch, errors = filecmp.cmpfiles(a, b, [str(p) for p in _tree(a)], shallow=False)
        assert mismatch == [] and errors == []


class TestErrors:
    def test_single_class_eval(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        log = load_events(tmp_path / "events.jsonl")
        y = log.label.copy()
        y[log.timestamp >= 12 * 86400] = 1
        save_events(EventLog(log.user_id, log.item_id, log.timestamp, y), tmp_path / "events.jsonl")
        capsys.readouterr()
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path)])
        assert code != 0
        assert "AUC undefined" in capsys.readouterr().err

    def test_missing_events(self, tmp_path, capsys):
        assert main(["split", "--out", str(tmp_path)]) == 2
        assert "event file not found" in capsys.readouterr().err

    def test_unknown_section_field(self, tmp_path):
        cfg = _config(tmp_path, {"train": {"epochz": 3}})
        assert main(["split", "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_bad_json(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        assert main(["gen", "--config", str(p), "--out", str(tmp_path)]) == 1
        assert "invalid JSON" in capsys.readouterr().err

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 1

    def test_oracle_without_truth(self, tmp_path):
        cfg = _config(tmp_path, {"leaks": [{"kind": "oracle"}]})
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        (tmp_path / "truth.npz").unlink()
        assert main(["lis", "--config", str(cfg), "--out", str(tmp_path)]) == 1


class TestConfig:
    def test_seed_overrides_all(self):
        cfg = load_run_config(seed=7)
        assert cfg.synthetic.seed == cfg.train.seed == cfg.align.hyper.seed == 7

    def test_set_override(self):
        cfg = load_run_config(overrides=["train.epochs=3", "align.hyper.hidden=16"])
        assert cfg.train.epochs == 3 and cfg.align.hyper.hidden == 16

    def test_hash_changes_with_config(self):
        assert load_run_config().hash() != load_run_config(overrides=["lis.n_boot=10"]).hash()

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides=["nonsense"])

    def test_round_trip_dict(self, tmp_path):
        cfg = load_run_config(overrides=["train.epochs=3"])
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert load_run_config(p) == cfg

    def test_seed_changes_outputs(self, tmp_path):
        cfg = _config(tmp_path)
        for s in (1, 2):
            assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / str(s)), "--seed", str(s)]) == 0
        a = (tmp_path / "1" / "events.jsonl").read_bytes()
        b = (tmp_path / "2" / "events.jsonl").read_bytes()
        assert a != b
        assert np.all(load_events(tmp_path / "1" / "events.jsonl").timestamp >= 0)
