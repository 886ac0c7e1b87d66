import json
import subprocess
import sys

import pytest

from chainscale.chains import Span, write_spans
from chainscale.cli import main
from chainscale.rl import ExperiencePool, QTable, RLState, Transition

SYNTH = ["--synth-pattern", "sinusoid", "--synth-params", '{"base": 50, "amplitude": 30, "period": 40}', "--horizon", "80"]


def test_run_prints_summary(tmp_path, capsys):
    rc = main(["run", "--policy", "threshold", *SYNTH, "--periods", "40", "80", "--output-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "mean_rps" in out and (tmp_path / "metrics.csv").exists()


def test_run_from_config_file_with_override(tmp_path, capsys):
    cfg = {"policy": "none", "synth": {"pattern": "constant", "params": {"rate": 10}}, "horizon": 30, "periods": [30]}
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    rc = main(["run", "--config", str(tmp_path / "exp.json"), "--policy", "hybrid", "--output-dir", str(tmp_path / "o")])
    assert rc == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["policy"] == "hybrid"


def test_run_reports_config_errors(tmp_path, capsys):
    rc = main(["run", "--policy", "none", "--output-dir", str(tmp_path)])
    assert rc == 2
    assert "trace_file" in capsys.readouterr().err
    rc = main(["run", "--policy", "none", *SYNTH, "--topology", str(tmp_path / "missing.json"), "--output-dir", str(tmp_path)])
    assert rc == 2


def test_agent_flags(tmp_path):
    rc = main(["run", "--policy", "chainsformer", *SYNTH, "--agent", "episodes=1", "--agent", "rt_max=30",
               "--output-dir", str(tmp_path)])
    assert rc == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["agent"] == {"episodes": 1, "rt_max": 30}
    assert (tmp_path / "qtable.csv").exists()


def test_compare_command(tmp_path, capsys):
    rc = main(["compare", "--policies", "threshold", "hybrid", *SYNTH, "--periods", "80", "--output-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "threshold" in out and "hybrid" in out
    assert (tmp_path / "comparison.csv").exists()
    assert main(["compare", "--policies", "threshold", *SYNTH, "--output-dir", str(tmp_path)]) == 2


def test_train_command(tmp_path, capsys):
    s, s2 = RLState(1, 0, 0), RLState(2, 0, 1)
    ExperiencePool(10, [Transition(s, 0, 1.0, s2, 1)]).save(tmp_path / "pool.csv")
    rc = main(["train", "--pool", str(tmp_path / "pool.csv"), "--out", str(tmp_path / "q.csv"), "--alpha", "0.5", "--epochs", "2",
               "--n-actions", "3"])
    assert rc == 0
    q = QTable.load(tmp_path / "q.csv")
    assert q.n_actions == 3 and q[s, 0] == pytest.approx(0.75)


def test_train_rejects_bad_pool(tmp_path, capsys):
    (tmp_path / "pool.csv").write_text("not a pool\n")
    assert main(["train", "--pool", str(tmp_path / "pool.csv"), "--out", str(tmp_path / "q.csv")]) == 1
    assert "bad header" in capsys.readouterr().err


def test_analyze_command(tmp_path, capsys):
    spans = [Span("1", None, "A", 1), Span("1", "A", "B", 5), Span("1", "B", "D", 1), Span("1", "A", "C", 2), Span("1", "C", "D", 2)]
    write_spans(spans, tmp_path / "spans.csv")
    assert main(["analyze", str(tmp_path / "spans.csv")]) == 0
    out = capsys.readouterr().out
    assert "A -> B -> D" in out and "6.000 ms" in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "chainscale.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "analyze" in proc.stdout
