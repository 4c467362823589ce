import json
import shutil

import numpy as np
import pytest

from decentflow import datasets as D
from decentflow import denoiser as dn
from decentflow import orchestrator as O
from decentflow import partition as P
from decentflow import router as rt
from decentflow.checkpoint import load_checkpoint
from decentflow.datafile import read_samples, sample_digests, write_samples
from decentflow.numeric import RngStream

MODEL = dn.preset("dit-nano", hidden_dim=32, depth=2, heads=2, time_freq_dim=32)
TRAIN = {"steps": 12, "batch_size": 8}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("orch")
    ss = D.make_dataset(D.ToySpec(components=4, samples=96, seed=3))
    part = P.hierarchical_partition(P.embed(ss.samples), 12, 4, 50, RngStream.from_label(0, "km"))
    write_samples(ss, root / "data.bin")
    part.save(root / "partition.tsv")
    O.shard_dataset(ss, part, root / "shards")
    return root


def _manifest(data_dir, out, train=TRAIN, **kw):
    shards = [str(p) for p in O.shard_paths(data_dir / "shards")]
    return O.RunManifest("test", 4, shards, str(out), MODEL.to_dict(), train,
                         data=str(data_dir / "data.bin"), labels=str(data_dir / "partition.tsv"), **kw)


def _ckpt_bytes(report, names):
    return {w["name"]: open(w["checkpoint"], "rb").read() for w in report["workers"] if w["name"] in names}


@pytest.fixture(scope="module")
def concurrent(data_dir, tmp_path_factory):
    return O.run_decentralized(_manifest(data_dir, tmp_path_factory.mktemp("conc")))


EXPERTS = [f"expert_{k}" for k in range(4)]


def test_shards_conserve_the_dataset(data_dir, tmp_path):
    ss = read_samples(data_dir / "data.bin")
    man = json.loads((data_dir / "shards" / "manifest.json").read_text())
    assert sum(s["count"] for s in man["shards"]) == len(ss)
    union = []
    for p in O.shard_paths(data_dir / "shards"):
        shard = read_samples(p)
        union += sample_digests(shard.samples)
        assert shard.meta["cluster"] == int(p.stem.split("_")[1])
    assert sorted(union) == sorted(sample_digests(ss.samples))
    # re-sharding is deterministic
    part = P.Partition.load(data_dir / "partition.tsv")
    again = O.shard_dataset(ss, part, tmp_path / "again")
    assert [s["digest"] for s in again["shards"]] == [s["digest"] for s in man["shards"]]


def test_manifest_invariants(data_dir, tmp_path):
    m = _manifest(data_dir, tmp_path)
    with pytest.raises(O.ConfigError):
        O.RunManifest("x", 3, m.shards, str(tmp_path), {}, {})
    with pytest.raises(O.ConfigError):
        O.RunManifest("x", 2, [m.shards[0], m.shards[0]], str(tmp_path), {}, {})
    with pytest.raises(O.ConfigError):
        _manifest(data_dir, tmp_path, straggler=[1, 1, 0.5, 1])
    m.save(tmp_path / "m.json")
    assert O.RunManifest.load(tmp_path / "m.json") == m


def test_concurrent_run_passes_audit(concurrent):
    assert concurrent["failed"] == []
    assert concurrent["audit"]["status"] == "pass"
    assert concurrent["audit"]["violations"] == []
    for w in concurrent["workers"]:
        assert load_checkpoint(w["checkpoint"]).step == TRAIN["steps"]
        assert len(open(w["log"]).read().splitlines()) == TRAIN["steps"]


def test_sequential_matches_concurrent_bitwise(data_dir, concurrent, tmp_path):
    seq = O.run_decentralized(_manifest(data_dir, tmp_path, mode="sequential"))
    assert _ckpt_bytes(seq, EXPERTS) == _ckpt_bytes(concurrent, EXPERTS)
    assert seq["audit"]["status"] == "pass"


def test_leaking_worker_fails_audit(data_dir, tmp_path):
    foreign = str(O.shard_paths(data_dir / "shards")[2])
    rep = O.run_decentralized(_manifest(data_dir, tmp_path, fixtures={"leak_read": {"1": foreign}}))
    assert rep["audit"]["status"] == "fail"
    assert any("expert_1" in v and foreign in v for v in rep["audit"]["violations"])


def test_missing_audit_log_is_inconclusive(concurrent, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(concurrent["workers"][0]["log"].rsplit("/workers/", 1)[0], run)
    assert O.communication_audit(run).status == "pass"
    (run / "workers" / "expert_2" / "audit.jsonl").unlink()
    v = O.communication_audit(run)
    assert v.status == "inconclusive" and v.missing == ["expert_2"]
    assert O.communication_audit(tmp_path / "nothing").status == "inconclusive"


def test_crash_is_isolated(data_dir, concurrent, tmp_path):
    rep = O.run_decentralized(_manifest(data_dir, tmp_path, fixtures={"crash_at_step": {"2": 5}}))
    assert rep["failed"] == ["expert_2"]
    assert not (tmp_path / "checkpoints" / "expert_2.ckpt").exists()
    survivors = [n for n in EXPERTS if n != "expert_2"]
    assert _ckpt_bytes(rep, survivors) == _ckpt_bytes(concurrent, survivors)


def test_straggler_only_slows_itself(data_dir, concurrent, tmp_path):
    rep = O.run_decentralized(_manifest(data_dir, tmp_path, straggler=[1, 1, 1, 10]))
    assert rep["failed"] == []
    assert _ckpt_bytes(rep, EXPERTS) == _ckpt_bytes(concurrent, EXPERTS)
    base = {w["name"]: w["wallclock_s"] for w in concurrent["workers"]}
    slow = {w["name"]: w for w in rep["workers"]}
    for name in EXPERTS[:3]:
        # one shared core: the sleeping straggler frees CPU, so peers may only get faster
        assert slow[name]["wallclock_s"] <= 1.25 * base[name] + 0.5
        assert slow[name]["finished_at_s"] < slow["expert_3"]["finished_at_s"]
    # makespan is set by the slowest worker, not by K times anything
    assert rep["makespan_s"] <= slow["expert_3"]["wallclock_s"] + 3.0
    # with a per-step barrier every step would wait for the straggler
    steps = [O.step_durations(slow[n]["log"]) for n in EXPERTS]
    assert O.allreduce_makespan(steps) >= 0.9 * sum(steps[3])


def test_router_and_monolithic_have_documented_exceptions(data_dir, tmp_path):
    rcfg = rt.RouterConfig(dn.preset("router-nano"), 4)
    m = _manifest(data_dir, tmp_path, router_model=rcfg.to_dict(), router_train={"steps": 3, "batch_size": 8},
                  monolithic=True, train={"steps": 2, "batch_size": 8})
    rep = O.run_decentralized(m)
    assert rep["failed"] == []
    assert rep["audit"]["status"] == "pass"
    assert any(e.startswith("router:") for e in rep["audit"]["exceptions"])
    assert load_checkpoint(tmp_path / "checkpoints" / "router.ckpt").owner == "router"
    assert load_checkpoint(tmp_path / "checkpoints" / "monolithic.ckpt").model_kind == "monolithic"


def test_missing_shard_is_an_io_error(data_dir, tmp_path):
    m = _manifest(data_dir, tmp_path)
    m.shards[0] = str(tmp_path / "nope.bin")
    with pytest.raises(FileNotFoundError, match="nope.bin"):
        O.run_decentralized(m)


def test_allreduce_makespan_formula():
    assert O.allreduce_makespan([[1, 1, 1], [1, 5, 1]]) == 7
