"""Command-line entry point: ``decentflow <subcommand> [--seed N] [--config FILE] [--out DIR]``.

Exit codes: 0 success, 1 contract / configuration error (including bad flags),
2 I/O error (missing or corrupt files).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline as pl


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _cmd_make_data(a, cfg):
    ss = pl.make_data(a.out, cfg)
    print(f"wrote {a.out / 'data.bin'}: {len(ss.samples)} samples of shape {tuple(ss.sample_shape)}")


def _cmd_cluster(a, cfg):
    part = pl.cluster(a.out, cfg)
    print(f"K={part.n_clusters} sizes={part.sizes.tolist()} inertia={part.inertia:.6g}")


def _cmd_shard(a, cfg):
    man = pl.shard(a.out, cfg)
    for s in man["shards"]:
        print(f"shard {s['cluster']}: {s['count']} samples  {s['digest']}")


def _cmd_train_expert(a, cfg):
    print(f"wrote {pl.train_one_expert(a.out, cfg, a.cluster)}")


def _cmd_train_router(a, cfg):
    print(f"wrote {pl.train_router_stage(a.out, cfg)}")


def _cmd_run(a, cfg):
    report = pl.run(a.out, cfg)
    for w in report["workers"]:
        print(f"{w['name']:<12} ok={w['ok']} steps={w.get('steps')} wallclock={w.get('wallclock_s') or 0.0:.2f}s")
    print(f"makespan {report['makespan_s']:.2f}s  audit {report['audit']['status']}")
    return 1 if report["failed"] else 0


def _cmd_sample(a, cfg):
    x, _, digest = pl.sample(a.out, cfg, a.strategy, a.n, a.steps)
    print(f"{len(x)} samples -> {a.out / 'samples' / (a.strategy + '.bin')}  digest={digest}")


def _cmd_evaluate(a, cfg):
    table, metrics = pl.evaluate(a.out, cfg, a.strategies)
    print(table, end="")
    for k in sorted(m for m in metrics if m.startswith("router.")):
        print(f"{k}={metrics[k]:.6g}")


def _cmd_oracle_check(a, cfg):
    worst, far = pl.oracle_check(a.trials, cfg["seed"])
    print(f"max decomposition residual {worst:.3e} over {a.trials} trials (far-field {far:.3e})")
    return 0 if max(worst, far) <= 1e-8 else 1


def _cmd_audit(a, cfg):
    from .orchestrator import communication_audit

    verdict = communication_audit(a.out / "run")
    print(f"audit {verdict.status}")
    for line in verdict.violations:
        print(f"  violation: {line}")
    for line in verdict.exceptions:
        print(f"  exception: {line}")
    for line in verdict.missing:
        print(f"  missing: {line}")
    return 0 if verdict.status == "pass" else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (default: config value, else 0)")
    common.add_argument("--config", type=Path, default=None, help="JSON config with data/partition/expert/router/run/sample sections")
    common.add_argument("--out", type=Path, default=Path("work"), help="work directory (default: ./work)")
    ap = _Parser(prog="decentflow", description="Decentralized flow-matching toy pipeline.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    add("make-data", _cmd_make_data, "draw the toy training set")
    add("cluster", _cmd_cluster, "learn the hierarchical k-means partition")
    add("shard", _cmd_shard, "write one data shard per cluster")
    add("train-expert", _cmd_train_expert, "train one expert in-process").add_argument("--cluster", type=int, required=True)
    add("train-router", _cmd_train_router, "train the router in-process")
    add("run-decentralized", _cmd_run, "train all experts (and router) as isolated worker processes")
    p = add("sample", _cmd_sample, "generate samples with a fusion strategy")
    p.add_argument("--strategy", default="top1", help="top1, top<k>, full, oracle or monolithic")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    add("evaluate", _cmd_evaluate, "metrics table for each strategy").add_argument(
        "--strategies", nargs="+", default=None)
    add("oracle-check", _cmd_oracle_check, "check the exact-oracle decomposition identity").add_argument(
        "--trials", type=int, default=1000)
    add("audit", _cmd_audit, "communication audit of a finished run")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        cfg = pl.resolve_config(a.out, a.config, a.seed)
        code = a.fn(a, cfg)
    except OSError as exc:
        # CheckpointError and DataFileError are IOError subclasses
        print(f"decentflow {a.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as exc:
        print(f"decentflow {a.command}: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
