"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py`` (or ``python
tests/test_acceptance.py``); the per-criterion lines appear in the terminal
summary.
"""

import json
import sys
import time
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest
from _data import anisotropic_set, gaussian_set, geometric_set, trailing_sum

from ipakit import config, io
from ipakit.adapters import FrozenLinear, forward, init_ipa, merge, set_param, vjp
from ipakit.analysis import (
    TaskVectors,
    asymmetry_study,
    compare_fixed_projector,
    non_increasing_within_band,
    off_diagonal,
    run_sweep,
    task_family,
    task_vectors,
)
from ipakit.cli import main
from ipakit.matcore import cosine, make_rng
from ipakit.nanomodel import (
    ModelConfig,
    TaskSpec,
    attach_adapters,
    make_dataset,
    model_forward_backward,
    pretrain_host,
)
from ipakit.nanomodel.transformer import forward as host_forward
from ipakit.pipeline import settings_from_config
from ipakit.projector import (
    exact_pca,
    gha_fit,
    ipca_fit,
    reconstruction_error,
    subspace_distance,
)
from ipakit.trainer import TrainConfig, train


class Clock:
    def __init__(self, limit):
        self.limit = limit
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def ok(self):
        return self.limit is None or self.elapsed < self.limit


def finish(record, clock, checks, detail):
    """Record the detail line, then assert every named check and the runtime."""
    failed = [name for name, ok in checks.items() if not ok]
    if not clock.ok():
        failed.append(f"runtime {clock.elapsed:.1f}s >= {clock.limit}s")
    record("detail", f"{detail}; {clock.elapsed:.1f}s" + (f"; failed: {failed}" if failed else ""))
    assert not failed, failed


# -- 1 ------------------------------------------------------------------------------------------


def test_criterion_1_pca_optimality(record_property):
    clock = Clock(5)
    worst = 0.0
    for seed in range(12):
        x = anisotropic_set(seed, n=400, d=12)
        d_h = 1 + seed % 8
        ref = trailing_sum(x, d_h)
        worst = max(worst, abs(reconstruction_error(exact_pca(x, d_h), x) - ref) / ref)
    finish(record_property, clock, {"rel err < 1e-9": worst < 1e-9},
           f"12 datasets, worst relative error {worst:.2e}")


# -- 2 ------------------------------------------------------------------------------------------


def test_criterion_2_ipca_oracle(record_property):
    clock = Clock(30)
    single = 0.0
    for seed in range(5):
        x = anisotropic_set(seed, n=300, d=10)
        p = ipca_fit(x, 4, batch_size=x.shape[0])
        single = max(single, subspace_distance(p.u, exact_pca(x, 4).u))
    multi = 0.0
    for seed in range(3):
        x = geometric_set(seed, n=2000, d=16, ratio=1.3)
        fits = {b: ipca_fit(x, 4, batch_size=b).u for b in (1, 10, x.shape[0])}
        exact = exact_pca(x, 4).u
        for a, b in combinations(fits, 2):
            multi = max(multi, subspace_distance(fits[a], fits[b]))
        multi = max(multi, max(subspace_distance(u, exact) for u in fits.values()))
    finish(record_property, clock, {"single batch < 1e-8": single < 1e-8,
                                    "multi batch < 0.05": multi < 0.05},
           f"single-batch angle {single:.2e}, batch 1/10/N worst angle {multi:.4f} rad")


# -- 3 ------------------------------------------------------------------------------------------


def test_criterion_3_gha_convergence(record_property):
    clock = Clock(60)
    x = gaussian_set(0)
    exact = exact_pca(x, 3)
    ipca = ipca_fit(x, 3, batch_size=50)
    converged, ordered, dists = 0, 0, []
    for seed in range(5):
        g = gha_fit(x, 3, 1e-3, 50, seed)
        d = subspace_distance(g.u, exact.u)
        dists.append(d)
        norms_ok = np.all(np.abs(np.linalg.norm(g.u, axis=1) - 1) < 0.05)
        converged += int(d < 0.1 and norms_ok)
        ordered += int(reconstruction_error(ipca, x) <= reconstruction_error(g, x) + 1e-6)
    finish(record_property, clock, {">= 4/5 converge": converged >= 4, "ipca <= gha": ordered == 5},
           f"{converged}/5 seeds converged (angles {' '.join(f'{d:.3f}' for d in dists)}), "
           f"ipca <= gha on {ordered}/5")


# -- 4 ------------------------------------------------------------------------------------------


def _layer_fd(variant, rng, trainable):
    d_in, d_out = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    r = int(rng.integers(1, min(d_in, d_out) + 1))
    w = FrozenLinear(rng.standard_normal((d_out, d_in)))
    alpha = float(rng.uniform(0.5, 4.0))
    if variant == "ipa":
        from ipakit.projector import Projector

        q, _ = np.linalg.qr(rng.standard_normal((d_in, r)))
        ad = init_ipa(w, Projector(u=q.T.copy(), algorithm="exact"), alpha, trainable)
    else:
        from ipakit.adapters import init_dora, init_lora

        ad = (init_lora if variant == "lora" else init_dora)(w, r, alpha, rng, trainable)
        if variant == "dora":
            ad.m = ad.m * rng.uniform(0.5, 1.5, size=ad.m.shape)
    ad.b = rng.standard_normal(ad.b.shape)
    x = rng.standard_normal((int(rng.integers(1, 4)), d_in))
    c = rng.standard_normal((x.shape[0], d_out))

    def loss():
        z, _ = forward(ad, w, x)
        return float(np.sum(c * z) + 0.05 * np.sum(z**4))

    z, cache = forward(ad, w, x)
    grads, _ = vjp(ad, w, cache, c + 0.2 * z**3)
    worst = 0.0
    for name in ad.trainable():
        p = ad.params()[name]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            vals = []
            for sign in (1, -1):
                q = p.copy()
                q[idx] += sign * 1e-6
                set_param(ad, name, q)
                vals.append(loss())
            set_param(ad, name, p)
            fd[idx] = (vals[0] - vals[1]) / 2e-6
        g = grads[name]
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd)))
    return worst


def _network_fd(model, variant, trainable, seed):
    rng = make_rng(seed)
    task = TaskSpec(intrinsic_dim=8, n_train=32, n_eval=0, seed=seed)
    projectors = None
    if variant == "ipa":
        from ipakit.projector import random_projector

        projectors = {n: random_projector(model.linears[n].d_in, 2, rng)
                      for n in model.config.target_names()}
    adapted = attach_adapters(model, variant, 2, float(rng.uniform(1, 4)), projectors, trainable,
                              seed=seed)
    for ad in adapted.adapters.values():
        for name, p in ad.params().items():
            if name == "b":
                set_param(ad, name, 0.3 * rng.standard_normal(p.shape))
            elif name == "m":
                set_param(ad, name, p * rng.uniform(0.5, 1.5, size=p.shape))
    data = make_dataset(task, model.config.vocab, model.config.seq_len, model.config.n_classes)
    batch = (data.train_x[:4], data.train_y[:4])
    _, grads = model_forward_backward(adapted, batch)
    num, ana = [], []
    for lname, ad in adapted.adapters.items():
        for pname in ad.trainable():
            value = ad.params()[pname]
            for flat in rng.choice(value.size, size=min(3, value.size), replace=False):
                idx = np.unravel_index(flat, value.shape)
                vals = []
                for sign in (1, -1):
                    q = value.copy()
                    q[idx] += sign * 1e-6
                    set_param(ad, pname, q)
                    vals.append(model_forward_backward(adapted, batch)[0])
                set_param(ad, pname, value)
                num.append((vals[0] - vals[1]) / 2e-6)
                ana.append(grads[lname][pname][idx])
    num, ana = np.array(num), np.array(ana)
    return np.linalg.norm(num - ana) / np.linalg.norm(ana)


def test_criterion_4_gradient_exactness(record_property):
    clock = Clock(60)
    layer = {}
    for seed, variant in enumerate(("lora", "ipa", "dora"), start=11):
        rng = make_rng(seed)
        layer[variant] = max(_layer_fd(variant, rng, bool(i % 2)) for i in range(50))
    small = ModelConfig(vocab=16, d_model=8, n_layers=1, n_heads=2, d_ff=16, seq_len=4)
    model = pretrain_host(small, train=TrainConfig(steps=20, batch_size=8, base_lr=3e-3,
                                                   warmup_steps=2))
    modes = [("lora", True), ("dora", True), ("ipa", True), ("ipa", False), ("lora", False),
             ("dora", False)]
    network = {}
    for i in range(54):
        variant, trainable = modes[i % len(modes)]
        key = f"{variant}{'' if trainable else '-frozen'}"
        network[key] = max(network.get(key, 0.0), _network_fd(model, variant, trainable, i))
    finish(record_property, clock,
           {"layer < 1e-5": max(layer.values()) < 1e-5,
            "network < 1e-4": max(network.values()) < 1e-4},
           "layer worst " + " ".join(f"{k} {v:.1e}" for k, v in layer.items())
           + "; network worst " + " ".join(f"{k} {v:.1e}" for k, v in network.items()))


# -- 5 ------------------------------------------------------------------------------------------


def test_criterion_5_structural_invariants(record_property, host):
    clock = Clock(10)
    task = TaskSpec()
    data = make_dataset(task, 64, 16, 4)
    x = data.eval_x[:32]
    frozen_logits = host_forward(host, x)[0]
    from ipakit.nanomodel import collect_features

    feats = collect_features(host, task)
    projs = {n: ipca_fit(fs, 4, 64) for n, fs in feats.items()}
    init_dev, merge_dev, rank_ok, linear_ok = 0.0, 0.0, True, True
    before = host.payload_bytes()
    for variant in ("lora", "dora", "ipa"):
        ad = attach_adapters(host, variant, 4, 2.0, projs if variant == "ipa" else None)
        init_dev = max(init_dev, np.max(np.abs(ad.forward(x) - frozen_logits)))
        rng = make_rng(1)
        for a in ad.adapters.values():
            a.b = 0.1 * rng.standard_normal(a.b.shape)
        for name, a in ad.adapters.items():
            w = host.linears[name]
            rows = rng.standard_normal((20, w.d_in))
            merge_dev = max(merge_dev, np.max(np.abs(rows @ merge(a, w).T - forward(a, w, rows)[0])))
            if variant != "dora":
                s = np.linalg.svd(merge(a, w) - w.w, compute_uv=False)
                rank_ok &= bool(np.all(s[4:] < 1e-10))
                d1 = a.delta(rows)
                a.alpha *= 2
                linear_ok &= bool(np.array_equal(a.delta(rows), 2 * d1))
                a.alpha /= 2
    ipa = attach_adapters(host, "ipa", 4, 1.0, projs)
    u_before = {n: a.proj.u.tobytes() for n, a in ipa.adapters.items()}
    trained, _ = train(ipa, task, TrainConfig(steps=40, base_lr=0.3, warmup_steps=4))
    w_frozen = trained.model.payload_bytes() == before == host.payload_bytes()
    u_frozen = all(a.proj.u.tobytes() == u_before[n] for n, a in trained.adapters.items())
    finish(record_property, clock,
           {"init 1e-12": init_dev <= 1e-12, "merge 1e-10": merge_dev < 1e-10,
            "frozen W": w_frozen, "frozen U": u_frozen, "alpha-linear": linear_ok,
            "rank <= d_h": rank_ok},
           f"init deviation {init_dev:.1e}, merge deviation {merge_dev:.1e}, W/U frozen "
           f"{w_frozen}/{u_frozen}, alpha-linearity exact {linear_ok}, rank bound {rank_ok}")


# -- 6 ------------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fixed_report():
    cfg = config.resolve("pkg:fixed_proj.json")
    start = time.perf_counter()
    model = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
    ads = {v: settings_from_config(cfg, v)[0] for v in ("lora", "ipa")}
    tcs = {v: config.train_config(cfg, v) for v in ("lora", "ipa")}
    _, proj = settings_from_config(cfg, "ipa")
    rep = compare_fixed_projector(model, config.task_spec(cfg), cfg["analysis"]["seeds"],
                                  cfg["adapter"]["rank"], ads, proj, tcs,
                                  cfg["analysis"]["control_rank"],
                                  cell_lr=cfg["analysis"]["cell_lr"])
    return rep, time.perf_counter() - start


def test_criterion_6_fixed_projector(record_property, fixed_report):
    rep, elapsed = fixed_report
    clock = Clock(300)
    clock.start -= elapsed
    gap, band = rep.gap(rep.rank)
    control_gap, control_band = rep.gap(rep.control_rank)
    finish(record_property, clock,
           {"ipa-frozen >= lora-frozen": gap >= 0, "control inside band": abs(control_gap) <= control_band,
            ">= 5 seeds": len(rep.seeds) >= 5},
           f"rank {rep.rank}: ipa-frozen {rep.mean('ipa', 'frozen', rep.rank):.4f} vs lora-frozen "
           f"{rep.mean('lora', 'frozen', rep.rank):.4f} (gap {gap:+.4f}, band {band:.4f}); "
           f"control rank {rep.control_rank} gap {control_gap:+.4f} within band {control_band:.4f}")


def test_fixed_projector_secondary_orderings(fixed_report):
    # directional companions of criterion 6: final loss and trainable-vs-frozen
    rep, _ = fixed_report
    r = rep.rank
    assert rep.mean("ipa", "frozen", r, "final_loss") <= rep.mean("lora", "frozen", r, "final_loss")
    for v in ("lora", "ipa"):
        assert rep.mean(v, "trainable", r) >= rep.mean(v, "frozen", r)


# -- 7 ------------------------------------------------------------------------------------------


def test_criterion_7_asymmetry(record_property, host):
    clock = Clock(300)
    cfg = config.resolve()
    adapter, projector = settings_from_config(cfg, "lora")
    adapter = replace(adapter, proj_ft=True)
    tasks = task_family(config.task_spec(cfg), 6)
    rep = asymmetry_study(host, tasks, adapter, projector, config.train_config(cfg, "lora"))
    init_cos = float(np.mean(rep.task_init_a))
    b_off = float(np.mean(np.abs(off_diagonal(rep.task_task_b))))
    # untrained control: A_T is A_0 for every task
    controls = []
    for _ in tasks:
        init = attach_adapters(host, "lora", adapter.rank, adapter.alpha, seed=adapter.seed)
        tv = task_vectors(init, init)
        controls.append(cosine(tv.theta_a, tv.theta_a_init))
    exact_one = all(c == 1.0 for c in controls)
    finish(record_property, clock,
           {"cos(A, A0) > 0.5": init_cos > 0.5, "cos(A, A0) > |cos B|": init_cos > b_off,
            "untrained == 1": exact_one},
           f"mean cos(A_j, A_0) {init_cos:.4f}, mean |offdiag cos B| {b_off:.4f}, "
           f"untrained control exactly 1: {exact_one}")
    assert isinstance(tv, TaskVectors)


# -- 8 ------------------------------------------------------------------------------------------


def test_criterion_8_sweeps(record_property, host):
    clock = Clock(300)
    cfg = config.resolve()
    adapter, projector = settings_from_config(cfg, "ipa")
    task = config.task_spec(cfg)
    tc = config.train_config(cfg, "ipa")
    seeds = [0, 1, 2]
    dims = run_sweep("hidden_dim", [2, 4, 8, 16], host, task, adapter, projector, tc, seeds)
    fracs = run_sweep("pretrain_fraction", [0.01, 0.1, 1.0], host, task, adapter, projector, tc,
                      seeds)
    monotone = non_increasing_within_band(fracs, "recon_error")
    means = " ".join(f"{p.setting}:{p.mean('recon_error'):.4f}" for p in fracs.points)
    finish(record_property, clock,
           {"hidden_dim complete": dims.complete(seeds) and len(dims.points) == 4,
            "fraction complete": fracs.complete(seeds) and len(fracs.points) == 3,
            "recon non-increasing": monotone},
           f"hidden_dim 4x3 and fraction 3x3 reports complete; recon error by fraction {means}")


# -- 9 ------------------------------------------------------------------------------------------

TINY = {
    "model": {"vocab": 16, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "seq_len": 4,
              "n_classes": 3, "target_set": "qkv_mlp", "seed": 0},
    "host_train": {"steps": 20, "batch_size": 8, "warmup_steps": 2},
    "task": {"intrinsic_dim": 6, "n_train": 64, "n_eval": 32, "teacher_hidden": 8},
    "adapter": {"rank": 2},
    "projector": {"fraction": 0.5, "batch_size": 16},
    "train": {"steps": 12, "batch_size": 8, "warmup_steps": 2},
    "analysis": {"seeds": [0, 1, 2], "n_tasks": 2, "settings": [1, 2], "control_rank": 6},
}


def _all_commands(root, cfg):
    host = root / "host.ipa"
    steps = [
        ["pretrain-host", "--config", cfg, "--out", host],
        ["collect", "--model", host, "--config", cfg, "--out", root / "feats"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0
    feats = sorted((root / "feats").glob("*.features.ipa"))
    for algo in ("exact", "ipca", "gha", "random"):
        assert main(["pretrain-projector", "--features", *map(str, feats), "--dh", "2",
                     "--algo", algo, "--epochs", "3", "--out", str(root / f"proj-{algo}")]) == 0
    rest = [
        ["adapt", "--model", host, "--config", cfg, "--variant", "ipa", "--projectors",
         root / "proj-ipca", "--out", root / "ipa"],
        ["adapt", "--model", host, "--config", cfg, "--variant", "ipa", "--projectors",
         root / "proj-gha", "--proj-ft", "on", "--out", root / "ipa-ft"],
        ["adapt", "--model", host, "--config", cfg, "--variant", "lora", "--out", root / "lora"],
        ["adapt", "--model", host, "--config", cfg, "--variant", "dora", "--out", root / "dora"],
        ["merge", "--model", host, "--adapter", root / "dora" / "adapter.ipa", "--out",
         root / "merged.ipa"],
        ["analyze", "similarity", "--config", cfg, "--model", host, "--variant", "lora",
         "--out", root / "sim"],
        ["analyze", "sweep", "--config", cfg, "--model", host, "--out", root / "sweep"],
        ["analyze", "fixed-proj", "--config", cfg, "--model", host, "--out", root / "fixed"],
    ]
    for argv in rest:
        assert main([str(a) for a in argv]) == 0


def test_criterion_9_bit_exact_reruns(record_property, tmp_path):
    clock = Clock(None)
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    trees = []
    for rep in ("first", "second"):
        _all_commands(tmp_path / rep, cfg)
        root = tmp_path / rep
        trees.append({p.relative_to(root).as_posix(): p.read_bytes()
                      for p in sorted(root.rglob("*")) if p.is_file()})
    a, b = trees
    # manifests of merge record their input paths, which differ between the two trees
    compared = [n for n in a if n.endswith((".ipa", ".csv")) or
                (n.endswith(".json") and not n.startswith("merged"))]
    differ = [n for n in compared if a[n] != b.get(n)]
    containers = sum(n.endswith(".ipa") for n in compared)
    csvs = sum(n.endswith(".csv") for n in compared)
    finish(record_property, clock, {"same file set": a.keys() == b.keys(), "identical": not differ},
           f"{containers} containers and {csvs} CSVs byte-identical across reruns"
           + (f"; differing: {differ}" if differ else ""))
    assert io.MAGIC == b"IPA1"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
