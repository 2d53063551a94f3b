import json
import os
import subprocess

import pytest

CLI = os.environ.get("METASEG_CLI")
pytestmark = pytest.mark.skipif(not CLI, reason="METASEG_CLI not set")

TINY = {
    "task": {"height": 16, "width": 16},
    "trainer": {"iterations": 2, "checkpoint_interval": 2},
    "seeds": [0],
    "eval_samples": 2,
}


def cli(*args):
    return subprocess.run([CLI, *map(str, args)], capture_output=True, text=True)


def write_config(tmp_path, config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def test_config_prints_resolved_json_and_hash(tmp_path):
    r = cli("config", "--config", write_config(tmp_path, TINY), "--mode", "no_meta")
    assert r.returncode == 0
    body, _, last = r.stdout.rstrip().rpartition("\n")
    assert json.loads(body)["mode"] == "no_meta"
    assert last.startswith("hash ") and len(last) == len("hash ") + 16


def test_usage_and_config_errors_exit_2(tmp_path):
    assert cli("run", "--mode", "fulll").returncode == 2
    assert cli().returncode == 2
    r = cli("config", "--config", write_config(tmp_path, {"trainer": {"alhpa": 1}}))
    assert r.returncode == 2
    assert "alhpa" in r.stderr


def test_bad_checkpoint_exits_1(tmp_path):
    ckpt = tmp_path / "bad.ckpt"
    ckpt.write_text("not a checkpoint")
    assert cli("eval", "--checkpoint", ckpt).returncode == 1


def test_divergence_exits_3(tmp_path):
    config = dict(TINY, trainer={"iterations": 3, "alpha": 1e300, "max_aborted_streak": 1})
    r = cli("run", "--config", write_config(tmp_path, config), "--out", tmp_path / "out")
    assert r.returncode == 3


def test_run_eval_plot_and_gen_data(tmp_path):
    config = write_config(tmp_path, TINY)
    out = tmp_path / "out"
    assert cli("run", "--config", config, "--out", out, "--mode", "baseline").returncode == 0
    cell = out / "baseline" / "seed-0"
    ckpt = cell / "checkpoints" / "iter-000002.ckpt"
    assert ckpt.exists()

    report = tmp_path / "report.json"
    r = cli("eval", "--checkpoint", ckpt, "--config", config, "--samples", 2,
            "--out", report, "--confusion", tmp_path / "cm.csv")
    assert r.returncode == 0
    assert json.loads(report.read_text())["domain_id"] == "domain-3"
    assert (tmp_path / "cm.csv").read_text().startswith("truth\\pred")

    svg = tmp_path / "curves.svg"
    assert cli("plot", cell / "metrics.jsonl", "--out", svg).returncode == 0
    assert svg.read_text().startswith("<svg")

    data = tmp_path / "data"
    r = cli("gen-data", "--config", config, "--domain", "domain-1", "--count", 2, "--out", data)
    assert r.returncode == 0
    assert sorted(p.name for p in (data / "domain-1").iterdir()) == [
        "sample-0_image.png", "sample-0_label.png", "sample-1_image.png", "sample-1_label.png"]
