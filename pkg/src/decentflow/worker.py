"""Training worker process: ``python -m decentflow.worker --job job.json``.

Installs an audit hook before touching any data, records every file open and
every socket / process-spawning event to an append-only JSON-lines log, runs
one training job, writes its checkpoint and a status file, and exits.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

_CHANNEL_EVENTS = ("socket.", "subprocess.", "os.fork", "os.forkpty", "os.posix_spawn", "os.spawn",
                   "os.exec", "os.system", "os.kill", "mmap.")


class AuditLog:
    def __init__(self, path: Path, roots: list[str]):
        self.fh = open(path, "a", buffering=1)
        self.roots = tuple(os.path.realpath(r) + os.sep for r in roots)
        self._busy = False

    def hook(self, event: str, args) -> None:
        if self._busy:
            return
        if event == "open":
            path, mode, flags = args[0], args[1], args[2]
            if not isinstance(path, (str, bytes, os.PathLike)):
                return
            real = os.path.realpath(os.fsdecode(path))
            if not real.startswith(self.roots):
                return
            if mode is None:
                write = bool(flags & (os.O_WRONLY | os.O_RDWR | os.O_CREAT))
            else:
                write = any(c in str(mode) for c in "wax+")
            self._emit({"event": "open", "path": real, "mode": "w" if write else "r"})
        elif event.startswith(_CHANNEL_EVENTS):
            self._emit({"event": event, "args": repr(args)[:200]})

    def _emit(self, rec: dict) -> None:
        self._busy = True
        try:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        finally:
            self._busy = False


def run_job(job: dict) -> dict:
    import numpy as np

    from . import denoiser as dn
    from . import router as rt
    from . import trainer as tr
    from .checkpoint import store_checkpoint
    from .datafile import read_samples
    from .partition import read_assignments

    slowdown = float(job.get("slowdown", 1.0))
    crash_at = job.get("crash_at_step")

    def on_step(step: int, seconds: float) -> None:
        if crash_at is not None and step >= int(crash_at):
            os._exit(3)
        if slowdown > 1.0:
            time.sleep((slowdown - 1.0) * seconds)

    if job.get("leak_read"):
        # test fixture: a misbehaving worker peeking at another shard
        Path(job["leak_read"]).read_bytes()

    config = tr.TrainConfig.from_dict(job["train"])
    data = read_samples(job["data"])
    if job["kind"] == "expert":
        model = dn.DenoiserConfig.from_dict(job["model"])
        ck = tr.train_expert(data, model, config, int(job["cluster"]), job["log"], on_step=on_step)
    elif job["kind"] == "monolithic":
        model = dn.DenoiserConfig.from_dict(job["model"])
        data.meta.pop("cluster", None)
        ck = tr.train_expert(data, model, config, 0, job["log"], on_step=on_step)
        ck.model_kind, ck.owner = "monolithic", "monolithic"
    elif job["kind"] == "router":
        _, labels = read_assignments(job["labels"])
        ck = tr.train_router(data, labels, rt.RouterConfig.from_dict(job["model"]), config, job["log"], on_step=on_step)
    else:
        raise ValueError(f"unknown job kind {job['kind']!r}")
    digest = store_checkpoint(ck, job["checkpoint"])
    return {"steps": ck.step, "digest": digest, "params_finite": bool(all(np.all(np.isfinite(v)) for v in ck.params.values()))}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="decentflow-worker")
    ap.add_argument("--job", required=True)
    args = ap.parse_args(argv)
    job = json.loads(Path(args.job).read_text())
    status_path = Path(job["status"])
    if job.get("audit"):
        log = AuditLog(Path(job["audit"]), job["audit_roots"])
        sys.addaudithook(log.hook)
    start = time.perf_counter()
    status = {"name": job["name"], "ok": False}
    try:
        status.update(run_job(job))
        status["ok"] = True
        code = 0
    except Exception as exc:  # reported through the status file
        status["error"] = f"{type(exc).__name__}: {exc}"
        code = 1
    status["wallclock_s"] = time.perf_counter() - start
    status_path.write_text(json.dumps(status, sort_keys=True, indent=1))
    return code


if __name__ == "__main__":
    sys.exit(main())
