"""Exit criteria, each at its stated tolerance and time budget.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the terminal summary: one PASS/FAIL line per criterion.
"""

import statistics
import time

import numpy as np
import pytest

from decentflow import cli
from decentflow import datasets as D
from decentflow import denoiser as dn
from decentflow import metrics as M
from decentflow import oracle as orc
from decentflow import orchestrator as O
from decentflow import partition as P
from decentflow import router as rt
from decentflow import sampler as sp
from decentflow import trainer as tr
from decentflow.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    read_header,
    store_checkpoint,
)
from decentflow.datafile import write_samples
from decentflow.flow import forward_noise
from decentflow.numeric import RngStream, Tensor, mean_sq, normal, uniform
from decentflow.numeric.gradcheck import directional_check

pytestmark = [pytest.mark.acceptance]


def _arrays(params):
    return {k: v.data for k, v in params.items()}


def _clock():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start


# -- 1 ----------------------------------------------------------------------


@pytest.mark.criterion(1, "decomposition identity, 1000 random instances")
def test_decomposition_identity(capsys, detail):
    elapsed = _clock()
    code = cli.main(["oracle-check", "--trials", "1000", "--seed", "0"])
    out = capsys.readouterr().out
    seconds = elapsed()
    detail(f"{out.strip()}; {seconds:.1f}s")
    assert code == 0, out
    assert seconds <= 30.0


# -- 2 ----------------------------------------------------------------------


def _batch(shape, b, seed):
    s = RngStream.from_label(seed, "acceptance/grad")
    return normal(s, (b,) + shape), uniform(s, b, 1e-3, 1.0), normal(s, (b,) + shape)


@pytest.mark.criterion(2, "finite-difference gradients, DiT-nano denoiser and router")
def test_gradients(detail):
    elapsed = _clock()
    worst = {}
    for mode in ("per-block", "single"):
        cfg = dn.preset("dit-nano", adaln_mode=mode)
        p = dn.init_params(cfg, RngStream.from_label(1, mode), zero_init=False)
        x, t, target = _batch(cfg.input_shape, 2, 1)
        for rep in range(2):
            errs = directional_check(lambda: mean_sq(dn.forward(p, cfg, x, t) - Tensor(target)), p,
                                     RngStream.from_label(rep, f"dir/{mode}"))
            worst.update({f"denoiser[{mode}].{k}": max(v, worst.get(f"denoiser[{mode}].{k}", 0.0)) for k, v in errs.items()})
    for backbone in ("dit-nano", "router-nano"):
        rcfg = rt.RouterConfig(dn.preset(backbone), 8)
        p = rt.init_router(rcfg, RngStream.from_label(2, backbone), zero_init=False)
        x, t, eps = _batch(rcfg.backbone.input_shape, 4, 2)
        labels = np.array([0, 3, 5, 7])
        for rep in range(2):
            errs = directional_check(lambda: tr.router_loss(p, rcfg, x, labels, t, eps), p,
                                     RngStream.from_label(rep, f"dir/{backbone}"))
            worst.update({f"router[{backbone}].{k}": max(v, worst.get(f"router[{backbone}].{k}", 0.0)) for k, v in errs.items()})
    name, err = max(worst.items(), key=lambda kv: kv[1])
    seconds = elapsed()
    detail(f"{len(worst)} groups, worst {err:.2e} ({name}); {seconds:.1f}s")
    assert err <= 1e-5
    assert seconds <= 120.0


# -- 3 ----------------------------------------------------------------------


@pytest.mark.criterion(3, "oracle sampling recovers a 2-point dataset")
def test_oracle_two_points(detail):
    elapsed = _clock()
    pts = np.array([[-1.0, 0.5], [1.0, -0.5]])
    ds = orc.DiscreteDataset(pts)
    x, _ = sp.generate(sp.Ensemble(oracle=sp.MarginalOracle(ds)), 64, 64, sp.FusionStrategy.parse("oracle"),
                       RngStream.from_label(0, "two-point"), (2,))
    d = np.linalg.norm(x[:, None, :] - pts[None], axis=2)
    near, hits = d.min(axis=1), np.bincount(d.argmin(axis=1), minlength=2)
    seconds = elapsed()
    detail(f"max distance {near.max():.2e}, hits {hits.tolist()}; {seconds:.2f}s")
    assert np.all(near <= 0.05)
    assert np.all(hits > 0)
    assert seconds <= 5.0


# -- 4 ----------------------------------------------------------------------


@pytest.mark.criterion(4, "DiT-nano expert convergence, 2000 steps")
def test_expert_convergence(detail):
    elapsed = _clock()
    spec = D.ToySpec(components=1, samples=1024, seed=0)
    data = D.make_dataset(spec)
    cfg = dn.preset("dit-nano")
    ck = tr.train_expert(data, cfg, tr.TrainConfig(steps=2000, lr=1e-3, seed=0), 0)
    ds = orc.DiscreteDataset(data.samples)
    xt, t = M.validation_states(ds, 256, RngStream.from_label(99, "acceptance/validation"))
    ratio = {}
    for which in ("params", "ema"):
        mse, zero = M.velocity_mse(sp.NetworkExpert(getattr(ck, which), cfg), ds, xt, t)
        ratio[which] = mse / zero
    seconds = elapsed()
    detail(f"MSE/zero-baseline {ratio['params']:.4f} (EMA shadow {ratio['ema']:.4f}); {seconds:.0f}s")
    assert ratio["params"] <= 0.1
    assert seconds <= 600.0


# -- 5 ----------------------------------------------------------------------


@pytest.mark.criterion(5, "router fidelity on the 8-blob toy set")
def test_router_fidelity(detail):
    elapsed = _clock()
    spec = D.ToySpec(components=8, samples=1024, seed=0)
    data = D.make_dataset(spec)
    part = P.hierarchical_partition(P.embed(data.samples), 64, 8, 50, RngStream.from_label(0, "partition"))
    rcfg = rt.RouterConfig(dn.preset("router-nano"), 8)
    ck = tr.train_router(data, part.assignments, rcfg,
                         tr.TrainConfig(steps=1500, batch_size=32, lr=2e-3, schedule="cosine", seed=0))
    router = sp.NetworkRouter(ck.ema, rcfg)
    held, _ = D.sample(spec, 512, "held-out")
    labels = P.assign(P.embed(held), part)
    eps = normal(RngStream.from_label(1, "acceptance/router"), held.shape)
    probs = {t: router(forward_noise(held, eps, t), np.full(len(held), t)) for t in (0.1, 0.999)}
    acc = M.router_accuracy(probs[0.1], labels)
    tv = M.total_variation(probs[0.999].mean(axis=0), np.full(8, 1 / 8))
    seconds = elapsed()
    detail(f"accuracy@0.1 {acc:.3f}, TV to uniform@0.999 {tv:.3f}; {seconds:.0f}s")
    assert acc >= 0.9
    assert tv <= 0.1
    assert seconds <= 600.0


# -- 6 ----------------------------------------------------------------------

TOY_EXPERT = dn.DenoiserConfig(in_channels=2, height=4, width=4, patch_size=2, hidden_dim=32, depth=2, heads=2, time_freq_dim=32)
TOY_ROUTER = dn.DenoiserConfig(in_channels=2, height=4, width=4, patch_size=2, hidden_dim=16, depth=2, heads=2, time_freq_dim=16)
STRATEGIES = ("oracle", "monolithic", "top1", "top2", "full")


def _toy_benchmark(seed: int, steps: int = 800) -> dict[str, float]:
    spec = D.ToySpec(components=8, shape=(2, 4, 4), samples=512, seed=seed)
    data = D.make_dataset(spec)
    part = P.hierarchical_partition(P.embed(data.samples), 64, 8, 50, RngStream.from_label(seed, "partition"))
    train = tr.TrainConfig(steps=steps, batch_size=32, lr=2e-3, seed=seed)
    experts = []
    for k in range(8):
        shard = data.subset(part.members(k))
        shard.meta = {"cluster": k}
        experts.append(sp.NetworkExpert(tr.train_expert(shard, TOY_EXPERT, train, k).ema, TOY_EXPERT))
    # the monolithic baseline gets the same per-model step budget as one expert
    mono = sp.NetworkExpert(tr.train_expert(data, TOY_EXPERT, train, 0).ema, TOY_EXPERT)
    rcfg = rt.RouterConfig(TOY_ROUTER, 8)
    router = tr.train_router(data, part.assignments, rcfg,
                             tr.TrainConfig(steps=steps, batch_size=32, lr=2e-3, schedule="cosine", seed=seed))
    ens = sp.Ensemble(experts, sp.NetworkRouter(router.ema, rcfg), mono,
                      sp.MarginalOracle(orc.DiscreteDataset(data.samples)))
    held, _ = D.sample(spec, 512, "held-out")
    out = {}
    for name in STRATEGIES:
        x, _ = sp.generate(ens, 512, 32, sp.FusionStrategy.parse(name), RngStream.from_label(seed, "generate"), spec.shape)
        out[name] = M.wasserstein2_1d_sliced(x, held, 128, RngStream.from_label(0, "sliced-w2"))
    return out


@pytest.mark.criterion(6, "top2 <= monolithic in sliced W2, 3 seeds")
def test_top2_beats_monolithic(detail):
    runs = [_toy_benchmark(seed) for seed in range(3)]
    median = {s: statistics.median(r[s] for r in runs) for s in STRATEGIES}
    per_seed = ", ".join(f"{r['top2']:.3f}/{r['monolithic']:.3f}" for r in runs)
    detail("median " + " ".join(f"{s}={median[s]:.3f}" for s in STRATEGIES) + f"; top2/mono per seed {per_seed}")
    assert all(r["top2"] <= r["monolithic"] for r in runs)


# -- 7 ----------------------------------------------------------------------


@pytest.mark.criterion(7, "fusion identities over 100 random states")
def test_fusion_identities(detail):
    K = 4
    small = dn.DenoiserConfig(in_channels=2, height=4, width=4, patch_size=2, hidden_dim=16, depth=1, heads=2, time_freq_dim=16)
    experts = [sp.NetworkExpert(_arrays(dn.init_params(small, RngStream.from_label(k, "e"), zero_init=False)), small)
               for k in range(K)]
    rcfg = rt.RouterConfig(small, K)
    ens = sp.Ensemble(experts, sp.NetworkRouter(_arrays(rt.init_router(rcfg, RngStream.from_label(0, "r"), zero_init=False)), rcfg))
    s = RngStream.from_label(7, "acceptance/states")
    x, t = normal(s, (100,) + small.input_shape), uniform(s, 100, 1e-3, 1.0)
    full, _ = sp.fuse_velocities(x, t, ens, sp.FusionStrategy.parse("full"))
    topK, _ = sp.fuse_velocities(x, t, ens, sp.FusionStrategy("topk", K))
    top1, _ = sp.fuse_velocities(x, t, ens, sp.FusionStrategy.parse("top1"))
    topk1, _ = sp.fuse_velocities(x, t, ens, sp.FusionStrategy("topk", 1))
    a, b = np.max(np.abs(full - topK)), np.max(np.abs(top1 - topk1))
    detail(f"|top{K} - full| {a:.1e}, |topk(1) - top1| {b:.1e}")
    assert a <= 1e-12 and b <= 1e-12


# -- 8 ----------------------------------------------------------------------


@pytest.mark.criterion(8, "zero-communication contract, K=4")
def test_zero_communication(tmp_path, detail):
    elapsed = _clock()
    data = D.make_dataset(D.ToySpec(components=4, samples=256, seed=8))
    part = P.hierarchical_partition(P.embed(data.samples), 16, 4, 50, RngStream.from_label(8, "partition"))
    write_samples(data, tmp_path / "data.bin")
    part.save(tmp_path / "partition.tsv")
    O.shard_dataset(data, part, tmp_path / "shards")
    shards = [str(p) for p in O.shard_paths(tmp_path / "shards")]
    experts = [f"expert_{k}" for k in range(4)]

    def run(name, **kw):
        m = O.RunManifest(name, 4, shards, str(tmp_path / name), dn.preset("dit-nano").to_dict(),
                          {"steps": 30, "batch_size": 16}, data=str(tmp_path / "data.bin"),
                          labels=str(tmp_path / "partition.tsv"), seeds={"base": 8}, **kw)
        return O.run_decentralized(m)

    def ckpts(rep):
        return {w["name"]: open(w["checkpoint"], "rb").read() for w in rep["workers"] if w["ok"]}

    conc = run("concurrent")
    seq = run("sequential", mode="sequential")
    leak = run("leak", fixtures={"leak_read": {"1": shards[2]}})
    slow = run("straggler", straggler=[1, 1, 1, 10])
    base_wall = {w["name"]: w["wallclock_s"] for w in conc["workers"]}
    slow_w = {w["name"]: w for w in slow["workers"]}
    ratio = max(slow_w[n]["wallclock_s"] / base_wall[n] for n in experts[:3])
    seconds = elapsed()
    detail(f"bitwise={ckpts(conc) == ckpts(seq)}, audit={conc['audit']['status']}, leak audit={leak['audit']['status']}, "
           f"peer wallclock ratio under straggler {ratio:.2f}; {seconds:.0f}s")
    assert conc["failed"] == [] and seq["failed"] == []
    assert ckpts(conc) == ckpts(seq) and set(ckpts(conc)) == set(experts)
    assert conc["audit"]["status"] == "pass" and seq["audit"]["status"] == "pass"
    assert leak["audit"]["status"] == "fail"
    assert any("expert_1" in v and shards[2] in v for v in leak["audit"]["violations"])
    assert slow["failed"] == [] and ckpts(slow) == ckpts(conc)
    for n in experts[:3]:
        # one shared core: peers can only speed up while the straggler sleeps
        assert slow_w[n]["wallclock_s"] <= 1.25 * base_wall[n] + 0.5
        assert slow_w[n]["finished_at_s"] < slow_w["expert_3"]["finished_at_s"]
    assert seconds <= 900.0


# -- 9 ----------------------------------------------------------------------


@pytest.mark.criterion(9, "forward-pass accounting for top1 and full")
def test_forward_counters(detail):
    K, n, steps = 4, 6, 5
    small = dn.DenoiserConfig(in_channels=2, height=4, width=4, patch_size=2, hidden_dim=16, depth=1, heads=2, time_freq_dim=16)
    rcfg = rt.RouterConfig(small, K)
    router = _arrays(rt.init_router(rcfg, RngStream.from_label(0, "r"), zero_init=False))
    counts = {}
    for name in ("top1", "full"):
        experts = [sp.NetworkExpert(_arrays(dn.init_params(small, RngStream.from_label(k, "e"), zero_init=False)), small)
                   for k in range(K)]
        ens = sp.Ensemble(experts, sp.NetworkRouter(router, rcfg))
        sp.generate(ens, n, steps, sp.FusionStrategy.parse(name), RngStream.from_label(0, "count"), small.input_shape)
        counts[name] = sum(e.forwards for e in experts)
    detail(f"per sample: top1 {counts['top1'] / n:g}, full {counts['full'] / n:g} (steps={steps}, K={K})")
    assert counts["top1"] == steps * n
    assert counts["full"] == K * steps * n


# -- 10 ---------------------------------------------------------------------


@pytest.mark.criterion(10, "checkpoint format")
def test_checkpoint_format(tmp_path, detail):
    cfg = dn.preset("dit-nano")
    params = _arrays(dn.init_params(cfg, RngStream.from_label(0, "ckpt"), zero_init=False))
    ck = Checkpoint("expert", 2, {"model": cfg.to_dict()}, 0, 2000, params, {k: 0.5 * v for k, v in params.items()})
    path = tmp_path / "a.ckpt"
    store_checkpoint(ck, path)
    blob = path.read_bytes()
    back = load_checkpoint(path)
    store_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "b.ckpt").read_bytes() == blob
    for k, v in ck.rounded().params.items():
        np.testing.assert_array_equal(back.params[k], v)
    # every position in the prefix and header, and a spread of payload positions
    head_end = 16 + int.from_bytes(blob[12:16], "little") + 32
    positions = list(range(head_end)) + list(range(head_end, len(blob), max(1, (len(blob) - head_end) // 2000)))
    missed = []
    for i in positions:
        bad = bytearray(blob)
        bad[i] ^= 0x10
        try:
            Checkpoint.from_bytes(bytes(bad))
            missed.append(i)
        except CheckpointError:
            pass
    (tmp_path / "head_only.ckpt").write_bytes(blob[:head_end])
    head = read_header(tmp_path / "head_only.ckpt")
    detail(f"{len(blob)} bytes, {len(positions)} single-byte flips, {len(missed)} undetected")
    assert missed == []
    assert head["step"] == 2000 and head["owner"] == 2
