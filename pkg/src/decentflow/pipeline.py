"""End-to-end toy pipeline over a work directory.

Layout under the work directory::

    config.json                  resolved configuration (written by make-data)
    data.bin                     training samples with ground-truth labels
    partition.tsv                learned cluster assignments (+ .centroids.npy)
    shards/shard_<k>.bin         one file per cluster, plus manifest.json
    run/                         worker dirs, checkpoints/, report.json
    samples/<strategy>.bin       generated samples (+ .trace.jsonl)
    eval/table.txt, eval/metrics.txt
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from . import datasets as D
from . import denoiser as dn
from . import metrics as M
from . import oracle as orc
from . import orchestrator as O
from . import partition as P
from . import router as rt
from . import sampler as sp
from . import trainer as tr
from .checkpoint import store_checkpoint
from .datafile import SampleSet, read_samples, write_samples
from .flow import forward_noise
from .numeric.rng import RngStream, normal

DEFAULTS: dict = {
    "seed": 0,
    "data": {"kind": "gaussian-mixture", "components": 8, "shape": [4, 8, 8], "samples": 1024, "spread": 0.2},
    "partition": {"embedder": "identity", "m_fine": 64, "k": 8, "iters": 100},
    "expert": {"preset": "dit-nano", "overrides": {}, "train": {"steps": 1000, "batch_size": 32, "lr": 1e-3}},
    "router": {"preset": "router-nano", "overrides": {},
               "train": {"steps": 1500, "batch_size": 32, "lr": 2e-3, "schedule": "cosine"}},
    "run": {"mode": "concurrent", "straggler": None, "monolithic": True, "router": True},
    "sample": {"n": 256, "steps": 32, "t_min": 1e-3, "use_ema": True},
    "evaluate": {"strategies": ["oracle", "monolithic", "top1", "top2", "full"], "held_out": 512,
                 "projections": 128, "validation": 128, "router_t": [0.1, 0.999]},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("overrides", "train"):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        elif k == "train" and isinstance(v, dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def resolve_config(work: Path, config_path=None, seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    saved = work / "config.json"
    if saved.exists():
        cfg = _merge(cfg, json.loads(saved.read_text()))
    if config_path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(config_path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: not valid JSON ({exc})") from None
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def toy_spec(cfg: dict) -> D.ToySpec:
    return D.ToySpec.from_dict({**cfg["data"], "seed": cfg["seed"]})


def expert_model(cfg: dict) -> dn.DenoiserConfig:
    return dn.preset(cfg["expert"]["preset"], **cfg["expert"]["overrides"])


def router_model(cfg: dict, k: int) -> rt.RouterConfig:
    return rt.RouterConfig(dn.preset(cfg["router"]["preset"], **cfg["router"]["overrides"]), k)


def train_config(cfg: dict, which: str) -> tr.TrainConfig:
    return tr.TrainConfig.from_dict({**cfg[which]["train"], "seed": cfg["seed"]})


# -- stages -----------------------------------------------------------------


def make_data(work: Path, cfg: dict) -> SampleSet:
    work.mkdir(parents=True, exist_ok=True)
    ss = D.make_dataset(toy_spec(cfg))
    write_samples(ss, work / "data.bin")
    (work / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return ss


def cluster(work: Path, cfg: dict) -> P.Partition:
    ss = read_samples(work / "data.bin")
    pc = cfg["partition"]
    feats = P.embed(ss.samples, pc["embedder"])
    part = P.hierarchical_partition(feats, pc["m_fine"], pc["k"], pc["iters"],
                                    RngStream.from_label(cfg["seed"], "partition"))
    part.save(work / "partition.tsv")
    return part


def _partition(work: Path) -> P.Partition:
    path = work / "partition.tsv"
    if not path.exists():
        raise FileNotFoundError(f"missing partition file {path}; run 'cluster' first")
    return P.Partition.load(path)


def shard(work: Path, cfg: dict) -> dict:
    return O.shard_dataset(read_samples(work / "data.bin"), _partition(work), work / "shards")


def n_clusters(work: Path) -> int:
    man = work / "shards" / "manifest.json"
    if man.exists():
        return int(json.loads(man.read_text())["K"])
    return _partition(work).n_clusters


def checkpoint_dir(work: Path) -> Path:
    return work / "run" / "checkpoints"


def train_one_expert(work: Path, cfg: dict, k: int) -> Path:
    K = n_clusters(work)
    if not 0 <= k < K:
        raise ConfigError(f"cluster {k} out of range; valid clusters are 0..{K - 1}")
    data = read_samples(work / "shards" / f"shard_{k}.bin")
    out = checkpoint_dir(work)
    out.mkdir(parents=True, exist_ok=True)
    log = work / "run" / f"expert_{k}.train.log"
    log.unlink(missing_ok=True)
    ck = tr.train_expert(data, expert_model(cfg), train_config(cfg, "expert"), k, log)
    store_checkpoint(ck, out / f"expert_{k}.ckpt")
    return out / f"expert_{k}.ckpt"


def train_router_stage(work: Path, cfg: dict) -> Path:
    part = _partition(work)
    data = read_samples(work / "data.bin")
    out = checkpoint_dir(work)
    out.mkdir(parents=True, exist_ok=True)
    log = work / "run" / "router.train.log"
    log.unlink(missing_ok=True)
    ck = tr.train_router(data, part.assignments, router_model(cfg, part.n_clusters), train_config(cfg, "router"), log)
    store_checkpoint(ck, out / "router.ckpt")
    return out / "router.ckpt"


def manifest(work: Path, cfg: dict) -> O.RunManifest:
    K = n_clusters(work)
    rc = cfg["run"]
    return O.RunManifest(
        run_id=f"toy-seed{cfg['seed']}", n_experts=K,
        shards=[str(p) for p in O.shard_paths(work / "shards")], out_dir=str(work / "run"),
        expert_model=expert_model(cfg).to_dict(), expert_train=train_config(cfg, "expert").to_dict(),
        data=str(work / "data.bin"), labels=str(work / "partition.tsv"),
        router_model=router_model(cfg, K).to_dict() if rc["router"] else None,
        router_train=train_config(cfg, "router").to_dict(),
        seeds={"base": cfg["seed"], "router": cfg["seed"], "monolithic": cfg["seed"]},
        straggler=rc["straggler"], mode=rc["mode"], monolithic=rc["monolithic"])


def run(work: Path, cfg: dict) -> dict:
    return O.run_decentralized(manifest(work, cfg))


def oracle_dataset(work: Path) -> orc.DiscreteDataset:
    ss = read_samples(work / "data.bin")
    labels = _partition(work).assignments if (work / "partition.tsv").exists() else None
    return orc.DiscreteDataset(ss.samples, labels=labels)


def checkpoint_set(work: Path) -> sp.CheckpointSet:
    ck = checkpoint_dir(work)
    return sp.CheckpointSet([ck / f"expert_{k}.ckpt" for k in range(n_clusters(work))], ck / "router.ckpt",
                            ck / "monolithic.ckpt")


def load_ensemble(work: Path, cfg: dict, strategy: sp.FusionStrategy) -> sp.Ensemble:
    ds = oracle_dataset(work) if strategy.kind == "oracle" else None
    return checkpoint_set(work).load(strategy, ds, cfg["sample"]["use_ema"])


def sample(work: Path, cfg: dict, strategy_name: str, n: int | None = None, steps: int | None = None):
    sc = cfg["sample"]
    n = sc["n"] if n is None else n
    steps = sc["steps"] if steps is None else steps
    strategy = sp.FusionStrategy.parse(strategy_name)
    ens = load_ensemble(work, cfg, strategy)
    shape = tuple(read_samples(work / "data.bin").sample_shape)
    x, trace = sp.generate(ens, n, steps, strategy, RngStream.from_label(cfg["seed"], "generate"), shape, sc["t_min"])
    out = work / "samples"
    out.mkdir(parents=True, exist_ok=True)
    digest = write_samples(SampleSet(x, seed=cfg["seed"], meta={"strategy": strategy.name, "steps": steps}),
                           out / f"{strategy.name}.bin")
    sp.write_trace(trace, out / f"{strategy.name}.trace.jsonl")
    return x, trace, digest


# -- evaluation -------------------------------------------------------------


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table; floats with 4 decimals, missing entries as '-'."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(columns, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def format_metrics(metrics: dict) -> str:
    out = []
    for k in sorted(metrics):
        v = metrics[k]
        out.append(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(out) + "\n"


def evaluate(work: Path, cfg: dict, strategies: list[str] | None = None) -> tuple[str, dict]:
    ec = cfg["evaluate"]
    strategies = strategies or ec["strategies"]
    seed = cfg["seed"]
    spec = toy_spec(cfg)
    held, _ = D.sample(spec, ec["held_out"], "held-out")
    ds = oracle_dataset(work)
    part = _partition(work)
    vx, vt = M.validation_states(ds, ec["validation"], RngStream.from_label(seed, "eval/validation"))
    metrics: dict = {}
    rows = []
    parsed = [sp.FusionStrategy.parse(s) for s in strategies]
    for strategy in parsed:
        x, trace, _ = sample(work, cfg, strategy.name)
        ens = load_ensemble(work, cfg, strategy)
        mse, zero = M.velocity_mse(lambda xt, t: sp.fuse_velocities(xt, t, ens, strategy)[0], ds, vx, vt)
        w2 = M.wasserstein2_1d_sliced(x, held, ec["projections"], RngStream.from_label(seed, "eval/w2"))
        usage = sp.expert_usage_report(trace)["overall"]
        total = sum(usage)
        name = strategy.name
        metrics[f"w2.{name}"] = w2
        metrics[f"velocity_mse.{name}"] = mse
        metrics[f"velocity_mse_ratio.{name}"] = mse / zero
        if strategy.kind not in ("oracle", "monolithic"):
            for k, c in enumerate(usage):
                metrics[f"usage.{name}.expert_{k}"] = c / total
        rows.append({"strategy": name, "sliced_w2": w2, "velocity_mse": mse, "mse_ratio": mse / zero,
                     "experts_used": sum(1 for c in usage if c) if strategy.kind not in ("oracle", "monolithic") else None})
    if any(s.kind not in ("oracle", "monolithic") for s in parsed):
        cs = checkpoint_set(work)
        for k, path in enumerate(cs.experts):
            sub = ds.restrict(k)
            kx, kt = M.validation_states(sub, ec["validation"], RngStream.from_label(seed, f"eval/validation/{k}"))
            mse, zero = M.velocity_mse(sp.load_expert(path, k, cfg["sample"]["use_ema"]), sub, kx, kt)
            metrics[f"velocity_mse_ratio.expert_{k}"] = mse / zero
        router = sp.load_router(cs.router, cfg["sample"]["use_ema"])
        # held-out labels need the partition's feature space, reproducible only for identity features
        held_labels = P.assign(P.embed(held), part) if cfg["partition"]["embedder"] == "identity" else None
        noise = normal(RngStream.from_label(seed, "eval/router"), held.shape)
        for t in ec["router_t"]:
            xt = forward_noise(held, noise, t)
            probs = router(xt, np.full(len(xt), t))
            if held_labels is not None:
                metrics[f"router.accuracy.t{t:g}"] = M.router_accuracy(probs, held_labels)
            metrics[f"router.tv_uniform.t{t:g}"] = M.total_variation(probs.mean(axis=0), np.full(probs.shape[1], 1 / probs.shape[1]))
        post = np.stack([orc.cluster_posterior(x, s, ds) for x, s in zip(vx, vt)])
        probs = router(vx.reshape((-1,) + ds.sample_shape), vt)
        metrics["router.kl_oracle"] = M.mean_kl(post, probs)
    table = format_table(rows, ["strategy", "sliced_w2", "velocity_mse", "mse_ratio", "experts_used"])
    out = work / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table)
    (out / "metrics.txt").write_text(format_metrics(metrics))
    return table, metrics


def _finite(r: float) -> float:
    # max() would silently drop a NaN
    return float(r) if np.isfinite(r) else float("inf")


def oracle_check(trials: int, seed: int) -> tuple[float, float]:
    """Max decomposition residual over random instances, and the max far-field residual."""
    stream = RngStream.from_label(seed, "oracle-check")
    worst = 0.0
    for _ in range(trials):
        ds, xt, t = orc.random_instance(stream)
        worst = max(worst, _finite(orc.decomposition_residual(xt, t, ds)))
    far = 0.0
    for _ in range(max(1, trials // 100)):
        ds, xt, _ = orc.random_instance(stream)
        xt = 100.0 * xt / np.linalg.norm(xt)
        far = max(far, _finite(orc.decomposition_residual(xt, 0.1, ds)))
    return worst, far
