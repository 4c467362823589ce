import json
import subprocess
import sys
from pathlib import Path

import pytest

from decentflow import cli
from decentflow import pipeline as pl
from decentflow.checkpoint import CheckpointError
from decentflow.datafile import read_data_header

GOLDEN = Path(__file__).parent / "golden"
SMALL = {"hidden_dim": 16, "depth": 1, "heads": 2, "time_freq_dim": 16, "in_channels": 2, "height": 4, "width": 4}
TINY = {
    "data": {"shape": [2, 4, 4], "samples": 128, "components": 4},
    "partition": {"m_fine": 16, "k": 4},
    "expert": {"overrides": SMALL, "train": {"steps": 10, "batch_size": 8}},
    "router": {"overrides": SMALL, "train": {"steps": 10, "batch_size": 8}},
    "sample": {"n": 16, "steps": 4},
    "evaluate": {"held_out": 32, "validation": 8, "projections": 16},
}


def _run(*args) -> int:
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    w = root / "w"
    for cmd in ("make-data", "cluster", "shard"):
        assert _run(cmd, "--config", root / "tiny.json", "--out", w) == 0
    return w


def test_stages_write_their_artifacts(work):
    assert read_data_header(work / "data.bin")["count"] == 128
    assert (work / "partition.tsv").exists()
    assert json.loads((work / "shards" / "manifest.json").read_text())["K"] == 4


def test_cluster_out_of_range_names_valid_range(work, capsys):
    assert _run("train-expert", "--cluster", 9, "--out", work) == 1
    assert "0..3" in capsys.readouterr().err


def test_unknown_flag_prints_usage_and_exits_1(work, capsys):
    with pytest.raises(SystemExit) as e:
        _run("sample", "--no-such-flag", "--out", work)
    assert e.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_subcommand_exits_1():
    with pytest.raises(SystemExit) as e:
        _run("frobnicate")
    assert e.value.code == 1


def test_bad_config_key_is_a_contract_error(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"data": {"colour": "red"}}))
    assert _run("make-data", "--config", tmp_path / "bad.json", "--out", tmp_path / "w") == 1
    assert "colour" in capsys.readouterr().err


def test_missing_input_is_an_io_error(tmp_path):
    assert _run("cluster", "--out", tmp_path / "empty") == 2


def test_missing_checkpoint_is_named(tmp_path, work, capsys):
    assert _run("sample", "--strategy", "top2", "--out", work) in (0, 2)
    fresh = tmp_path / "w"
    for name in ("data.bin", "config.json", "partition.tsv", "partition.tsv.centroids.npy"):
        (fresh / name).parent.mkdir(parents=True, exist_ok=True)
        (fresh / name).write_bytes((work / name).read_bytes())
    capsys.readouterr()
    assert _run("evaluate", "--strategies", "monolithic", "--out", fresh) == 2
    assert "monolithic" in capsys.readouterr().err
    with pytest.raises(CheckpointError, match="expert_0"):
        pl.load_ensemble(fresh, pl.resolve_config(fresh), pl.sp.FusionStrategy.parse("top1"))


@pytest.fixture(scope="module")
def trained(work):
    assert _run("run-decentralized", "--out", work) == 0
    return work


def test_audit_passes_after_clean_run(trained, capsys):
    assert _run("audit", "--out", trained) == 0
    assert "audit pass" in capsys.readouterr().out


def test_sample_digest_is_reproducible(trained, capsys):
    digests = []
    for _ in range(2):
        assert _run("sample", "--strategy", "top2", "--n", 8, "--steps", 3, "--out", trained) == 0
        digests.append(read_data_header(trained / "samples" / "top2.bin")["digest"])
    assert digests[0] == digests[1]
    assert _run("sample", "--strategy", "top2", "--n", 8, "--steps", 3, "--seed", 5, "--out", trained) == 0
    assert read_data_header(trained / "samples" / "top2.bin")["digest"] != digests[0]


def test_evaluate_writes_table_and_metrics(trained):
    assert _run("evaluate", "--out", trained) == 0
    table = (trained / "eval" / "table.txt").read_text().splitlines()
    assert table[0].split() == ["strategy", "sliced_w2", "velocity_mse", "mse_ratio", "experts_used"]
    assert [r.split()[0] for r in table[2:]] == ["oracle", "monolithic", "top1", "top2", "full"]
    metrics = dict(line.split("=", 1) for line in (trained / "eval" / "metrics.txt").read_text().splitlines())
    for strategy in ("top1", "top2", "full"):
        usage = sum(float(v) for k, v in metrics.items() if k.startswith(f"usage.{strategy}."))
        assert usage == pytest.approx(1.0)
    assert float(metrics["velocity_mse.oracle"]) == 0.0
    assert "router.kl_oracle" in metrics and "router.accuracy.t0.1" in metrics
    first = (trained / "eval" / "metrics.txt").read_text()
    assert _run("evaluate", "--out", trained) == 0
    assert (trained / "eval" / "metrics.txt").read_text() == first


def test_oracle_check_reports_max_residual(capsys):
    assert _run("oracle-check", "--trials", 50) == 0
    assert "max decomposition residual" in capsys.readouterr().out


def test_table_format_matches_golden():
    rows = [
        {"strategy": "oracle", "sliced_w2": 0.09, "velocity_mse": 0.0, "mse_ratio": 0.0, "experts_used": None},
        {"strategy": "top2", "sliced_w2": 0.26214, "velocity_mse": 12.5, "mse_ratio": 0.0213, "experts_used": 8},
        {"strategy": "full", "sliced_w2": 0.39, "velocity_mse": 101.25, "mse_ratio": 0.1725, "experts_used": 8},
    ]
    cols = ["strategy", "sliced_w2", "velocity_mse", "mse_ratio", "experts_used"]
    assert pl.format_table(rows, cols) == (GOLDEN / "eval_table.txt").read_text()
    metrics = {"w2.top2": 0.26214, "router.kl_oracle": 1 / 3, "usage.top2.expert_0": 0.5}
    assert pl.format_metrics(metrics) == (GOLDEN / "eval_metrics.txt").read_text()


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "decentflow.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "oracle-check" in r.stdout
