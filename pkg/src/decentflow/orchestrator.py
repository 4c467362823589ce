"""Zero-communication run controller.

The controller shards the data, writes one job file per worker, launches the
workers as separate processes (all at once, or one after another), waits for
them with no intermediate barrier, and audits their access logs afterwards.
Workers only ever meet through files they are allowed to touch.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datafile import SampleSet, write_samples
from .partition import Partition


class ConfigError(ValueError):
    pass


WORKER_ENV = {"OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1", "PYTHONHASHSEED": "0"}


# -- sharding ---------------------------------------------------------------


def shard_dataset(dataset: SampleSet, partition: Partition, out_dir) -> dict:
    """One sample file per cluster plus ``manifest.json`` with counts and digests."""
    out = Path(out_dir)
    if len(partition.assignments) != len(dataset):
        raise ConfigError(f"partition covers {len(partition.assignments)} samples, dataset has {len(dataset)}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        shards = []
        for k in range(partition.n_clusters):
            sub = dataset.subset(partition.members(k))
            sub.meta = {"cluster": k, "n_clusters": partition.n_clusters}
            name = f"shard_{k}.bin"
            digest = write_samples(sub, out / name)
            shards.append({"cluster": k, "path": name, "count": len(sub), "digest": digest})
        manifest = {"K": partition.n_clusters, "total": len(dataset), "shards": shards}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise OSError(f"sharding into {out} failed: {exc}") from exc
    return manifest


def shard_paths(shard_dir) -> list[Path]:
    shard_dir = Path(shard_dir)
    m = json.loads((shard_dir / "manifest.json").read_text())
    return [shard_dir / s["path"] for s in sorted(m["shards"], key=lambda s: s["cluster"])]


# -- manifest ---------------------------------------------------------------


@dataclass
class RunManifest:
    """Keys of the run manifest document (JSON)."""

    run_id: str
    n_experts: int
    shards: list[str]
    out_dir: str
    expert_model: dict
    expert_train: dict
    data: str | None = None
    labels: str | None = None
    router_model: dict | None = None
    router_train: dict | None = None
    seeds: dict = field(default_factory=dict)
    straggler: list[float] | None = None
    mode: str = "concurrent"
    monolithic: bool = False
    fixtures: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.shards) != self.n_experts:
            raise ConfigError(f"manifest lists {len(self.shards)} shards for K={self.n_experts}")
        resolved = [os.path.realpath(s) for s in self.shards]
        if len(set(resolved)) != len(resolved):
            raise ConfigError("shard paths must be pairwise distinct")
        if self.straggler is None:
            self.straggler = [1.0] * self.n_experts
        if len(self.straggler) != self.n_experts or min(self.straggler) < 1.0:
            raise ConfigError("straggler profile needs one multiplier >= 1 per expert")
        if self.mode not in ("concurrent", "sequential"):
            raise ConfigError(f"mode must be 'concurrent' or 'sequential', got {self.mode!r}")
        if (self.router_model is not None or self.monolithic) and (self.data is None or self.labels is None):
            raise ConfigError("router / monolithic jobs need the full dataset and partition paths")

    def expert_seed(self, k: int) -> int:
        seeds = self.seeds.get("experts")
        return int(seeds[k]) if seeds is not None else int(self.seeds.get("base", 0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _train_with_seed(train: dict, seed: int) -> dict:
    d = dict(train)
    d["seed"] = seed
    return d


def plan_jobs(m: RunManifest) -> list[dict]:
    out = Path(m.out_dir).resolve()
    roots = {str(out)} | {str(Path(s).resolve().parent) for s in m.shards}
    if m.data:
        roots |= {str(Path(m.data).resolve().parent), str(Path(m.labels).resolve().parent)}
    roots = sorted(roots)

    def job(name: str, kind: str, reads: list[str], **kw) -> dict:
        wdir = out / "workers" / name
        return {
            "name": name, "kind": kind, "dir": str(wdir),
            "checkpoint": str(out / "checkpoints" / f"{name}.ckpt"),
            "log": str(wdir / "train.log"), "audit": str(wdir / "audit.jsonl"), "status": str(wdir / "status.json"),
            "audit_roots": roots, "allowed_reads": [str(Path(r).resolve()) for r in reads], **kw,
        }

    jobs = []
    for k, shard in enumerate(m.shards):
        j = job(f"expert_{k}", "expert", [shard], cluster=k, data=str(Path(shard).resolve()),
                model=m.expert_model, train=_train_with_seed(m.expert_train, m.expert_seed(k)),
                slowdown=float(m.straggler[k]))
        fx = m.fixtures
        if str(k) in fx.get("crash_at_step", {}):
            j["crash_at_step"] = int(fx["crash_at_step"][str(k)])
        if str(k) in fx.get("leak_read", {}):
            j["leak_read"] = str(Path(fx["leak_read"][str(k)]).resolve())
        jobs.append(j)
    full = [m.data, m.labels] if m.data else []
    if m.router_model is not None:
        jobs.append(job("router", "router", full, data=str(Path(m.data).resolve()), labels=str(Path(m.labels).resolve()),
                        model=m.router_model, train=_train_with_seed(m.router_train or m.expert_train, int(m.seeds.get("router", 0))),
                        exception="router reads the full labelled dataset by design"))
    if m.monolithic:
        jobs.append(job("monolithic", "monolithic", full, data=str(Path(m.data).resolve()), labels=str(Path(m.labels).resolve()),
                        model=m.expert_model, train=_train_with_seed(m.expert_train, int(m.seeds.get("monolithic", 0))),
                        exception="monolithic baseline reads the full dataset by design"))
    return jobs


# -- launching --------------------------------------------------------------


def _prepare(job: dict) -> Path:
    wdir = Path(job["dir"])
    if wdir.exists():
        shutil.rmtree(wdir)
    wdir.mkdir(parents=True)
    Path(job["checkpoint"]).parent.mkdir(parents=True, exist_ok=True)
    Path(job["checkpoint"]).unlink(missing_ok=True)
    path = wdir / "job.json"
    path.write_text(json.dumps(job, indent=1, sort_keys=True))
    return path


def _launch(job_path: Path, cwd: str) -> subprocess.Popen:
    env = dict(os.environ)
    env.update(WORKER_ENV)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.Popen([sys.executable, "-m", "decentflow.worker", "--job", str(job_path)], cwd=cwd, env=env,
                            stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)


def step_durations(log_path) -> list[float]:
    """Per-step seconds recovered from a training log's cumulative wallclock column."""
    p = Path(log_path)
    if not p.exists():
        return []
    ms = [float(line.split("\t")[3]) for line in p.read_text().splitlines() if line]
    return list(np.diff([0.0] + ms) / 1e3)


def allreduce_makespan(step_times: list[list[float]]) -> float:
    """Makespan if every step ended in a global barrier: the sum of per-step maxima."""
    n = min(len(s) for s in step_times)
    return float(sum(max(s[i] for s in step_times) for i in range(n)))


def run_decentralized(m: RunManifest, timeout: float | None = None) -> dict:
    for s in m.shards:
        if not Path(s).exists():
            raise FileNotFoundError(f"shard not found: {s}")
    out = Path(m.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m.save(out / "manifest.json")
    jobs = plan_jobs(m)
    paths = [_prepare(j) for j in jobs]
    t0 = time.perf_counter()
    finished: dict[str, float] = {}
    codes: dict[str, int] = {}
    errors: dict[str, str] = {}

    def reap(job, proc):
        try:
            _, err = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            _, err = proc.communicate()
        finished[job["name"]] = time.perf_counter() - t0
        codes[job["name"]] = proc.returncode
        if proc.returncode != 0 and err:
            errors[job["name"]] = err.decode(errors="replace")[-2000:]

    if m.mode == "sequential":
        for job, path in zip(jobs, paths):
            reap(job, _launch(path, job["dir"]))
    else:
        procs = [(job, _launch(path, job["dir"])) for job, path in zip(jobs, paths)]
        pending = list(procs)
        while pending:
            for item in list(pending):
                if item[1].poll() is not None:
                    reap(*item)
                    pending.remove(item)
            time.sleep(0.01)
    makespan = time.perf_counter() - t0

    workers = []
    for job in jobs:
        st_path = Path(job["status"])
        status = json.loads(st_path.read_text()) if st_path.exists() else {}
        ok = codes[job["name"]] == 0 and status.get("ok", False) and Path(job["checkpoint"]).exists()
        workers.append({
            "name": job["name"], "kind": job["kind"], "ok": ok, "exit_code": codes[job["name"]], "steps": status.get("steps"),
            "wallclock_s": status.get("wallclock_s"), "finished_at_s": finished[job["name"]],
            "checkpoint": job["checkpoint"] if ok else None, "digest": status.get("digest"),
            "log": job["log"], "slowdown": job.get("slowdown", 1.0),
            "error": status.get("error") or errors.get(job["name"]),
        })
    expert_steps = [step_durations(j["log"]) for j in jobs if j["kind"] == "expert"]
    expert_steps = [s for s in expert_steps if s]
    report = {
        "run_id": m.run_id, "mode": m.mode, "makespan_s": makespan, "workers": workers,
        "failed": [w["name"] for w in workers if not w["ok"]],
        "allreduce_makespan_s": allreduce_makespan(expert_steps) if expert_steps else None,
        "audit": communication_audit(out).to_dict(),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


# -- audit ------------------------------------------------------------------


@dataclass
class AuditVerdict:
    status: str
    violations: list[str] = field(default_factory=list)
    exceptions: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return asdict(self)


def _audit_worker(job: dict, log: Path) -> tuple[list[str], bool]:
    if not log.exists():
        return [], False
    own_dir = os.path.realpath(job["dir"]) + os.sep
    ckpt = os.path.realpath(job["checkpoint"])
    reads = set(job["allowed_reads"])
    bad = []
    for line in log.read_text().splitlines():
        rec = json.loads(line)
        if rec["event"] != "open":
            bad.append(f"{job['name']}: channel operation {rec['event']} {rec.get('args', '')}")
            continue
        path = rec["path"]
        if path.startswith(own_dir) or path == ckpt or path == ckpt + ".tmp":
            continue
        if rec["mode"] == "r" and path in reads:
            continue
        verb = "wrote" if rec["mode"] == "w" else "read"
        bad.append(f"{job['name']}: {verb} foreign path {path}")
    return bad, True


def communication_audit(run_dir) -> AuditVerdict:
    """pass: every worker touched only its allowance; fail: violations; inconclusive: a log is missing."""
    job_files = sorted(Path(run_dir).glob("workers/*/job.json"))
    if not job_files:
        return AuditVerdict("inconclusive", missing=["no worker job files"])
    v = AuditVerdict("pass")
    for path in job_files:
        job = json.loads(path.read_text())
        bad, present = _audit_worker(job, path.parent / Path(job["audit"]).name)
        v.violations += bad
        if not present:
            v.missing.append(job["name"])
        if job.get("exception"):
            v.exceptions.append(f"{job['name']}: {job['exception']}")
    if v.violations:
        v.status = "fail"
    elif v.missing:
        v.status = "inconclusive"
    return v


def checkpoint_paths(run_dir, n_experts: int) -> dict:
    ck = Path(run_dir) / "checkpoints"
    return {"experts": [ck / f"expert_{k}.ckpt" for k in range(n_experts)],
            "router": ck / "router.ckpt", "monolithic": ck / "monolithic.ckpt"}
