"""Acceptance suite.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion with the measured values. The smoke-sequence
criteria share one set of training runs built exactly as
``cdlab generate --fix-seed`` followed by ``cdlab run --fix-seed`` would build
them at seed 0, so the numbers can be reproduced from the command line.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from cdlab import autodiff as ad
from cdlab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cdlab.container import ContainerChecksumError
from cdlab.data import DatasetFile, build_st_graph, collate, default_delta, load_dataset, make_window, save_dataset
from cdlab.harness import (
    AdamW,
    TrainConfig,
    WindowConfig,
    average_forgetting,
    average_performance,
    binarization_study,
    elbo_loss,
    format_study,
    kl_diag_gaussian,
    prepare_system,
    run_sequence_all,
)
from cdlab.model import ModelConfig, forward
from cdlab.ode import integrate
from cdlab.seeding import derive_seed
from cdlab.simulate import SYSTEMS, generate_dataset, simulate
from cdlab.subnet import (
    MaskPool,
    MaskTriple,
    Strategy,
    init_backbone,
    init_scores,
    masked_forward,
    weights_from_masks,
    weights_from_scores,
)
from oracles import brute_force_edges, rel_err, spring_energy, toy_window

SEED = 0
SMOKE = ["S1", "C4", "S8"]
N_TRAJ = 100


# ---------------------------------------------------------------------------
# shared smoke-sequence runs


@pytest.fixture(scope="module")
def smoke_systems():
    rseed = derive_seed(SEED, "repeat", 0)
    out = []
    for name in SMOKE:
        cfg = SYSTEMS[name]
        sys_seed = derive_seed(SEED, "data", name)
        ds = DatasetFile(
            cfg,
            sys_seed,
            generate_dataset(cfg, N_TRAJ, derive_seed(sys_seed, "train")),
            generate_dataset(cfg, N_TRAJ, derive_seed(sys_seed, "test")),
        )
        out.append(prepare_system(ds, WindowConfig(), derive_seed(rseed, "windows", name)))
    return out, rseed


def _timed_run(systems, method, selections, seed):
    start = time.perf_counter()
    res = run_sequence_all(systems, method, selections, seed=seed)
    return res, time.perf_counter() - start


@pytest.fixture(scope="module")
def msgode(smoke_systems):
    systems, seed = smoke_systems
    return _timed_run(systems, "MSGODE", ("Oracle", "ModeSwitching"), seed)


@pytest.fixture(scope="module")
def finetune(smoke_systems):
    systems, seed = smoke_systems
    return _timed_run(systems, "FineTune", ("Oracle",), seed)[0].matrix


@pytest.fixture(scope="module")
def joint(smoke_systems):
    systems, seed = smoke_systems
    return _timed_run(systems, "Joint", ("Oracle",), seed)[0].matrix


def _fmt(x):
    return "-" if x is None else f"{x:.4f}"


# ---------------------------------------------------------------------------
# 1: end-to-end gradients


@pytest.mark.criterion(1)
def test_elbo_score_gradients_match_finite_differences(record_property):
    start = time.perf_counter()
    cfg = ModelConfig(d_hidden=8, d_latent=4, d_interaction=8)
    window = make_window(simulate(replace(SYSTEMS["S3"], n_particles=3), 11), 0.6, 0.2, seed=3)
    batch = collate([window], default_delta(window))
    backbone, scores = init_backbone(cfg, 5)
    noise = np.random.default_rng(0).standard_normal((3, cfg.d_latent))

    def loss(W):
        p = forward(batch, W, cfg, "sampled", noise=noise)
        return elbo_loss(p.y, batch.targets, p.mu, p.sigma, target_mask=batch.target_mask)

    nodes = {k: ad.param(v) for k, v in scores.items()}
    names = list(nodes)
    grads = dict(zip(names, ad.grad(loss(weights_from_scores(backbone, nodes, Strategy())), [nodes[k] for k in names])))

    # straight-through: d/ds equals d/dm at the binary mask, so differentiate the relaxed mask
    masks = {k: (v > 0).astype(float) for k, v in scores.items()}
    h = 1e-5
    worst, count = 0.0, 0
    for k in names:
        m = masks[k]
        fd = np.zeros_like(m)
        for i in np.ndindex(m.shape):
            old = m[i]
            m[i] = old + h
            up = loss(weights_from_masks(backbone, masks)).value
            m[i] = old - h
            down = loss(weights_from_masks(backbone, masks)).value
            m[i] = old
            fd[i] = (up - down) / (2 * h)
        worst = max(worst, float(rel_err(grads[k], fd, floor=1e-6).max()))
        count += m.size
    elapsed = time.perf_counter() - start
    record_property("detail", f"{count} components, max rel err {worst:.2e}, {elapsed:.0f}s")
    assert worst < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2-5: smoke sequence


@pytest.mark.slow
@pytest.mark.criterion(2)
def test_msgode_oracle_has_zero_forgetting(msgode, record_property):
    res, elapsed = msgode
    M = res.matrices["Oracle"]
    record_property("detail", f"AP {average_performance(M):.4f}, AF {average_forgetting(M)!r}, {elapsed:.0f}s")
    for i in range(M.n):
        for j in range(i + 1):
            assert M.values[i, j] == M.values[j, j]
    assert average_forgetting(M) == 0.0
    assert elapsed < 20 * 60


@pytest.mark.slow
@pytest.mark.criterion(3)
def test_mode_switching_separates_spring_from_charged(msgode, record_property):
    # row 1 of the smoke run is exactly the 2-entry pool {S1, C4} scored on both test sets
    res, _ = msgode
    acc = res.selection_accuracy[1]
    ap_ms = float(np.mean(res.matrices["ModeSwitching"].values[1, :2]))
    ap_or = float(np.mean(res.matrices["Oracle"].values[1, :2]))
    gap = abs(ap_ms - ap_or) / ap_or
    record_property("detail", f"selection accuracy {acc:.3f}, AP switching {ap_ms:.4f} vs oracle {ap_or:.4f} ({gap:.1%})")
    assert gap <= 0.10
    assert acc >= 0.90


@pytest.mark.slow
@pytest.mark.criterion(4)
def test_finetune_forgets(msgode, finetune, record_property):
    M = msgode[0].matrices["ModeSwitching"]
    af_ft, af_ms = average_forgetting(finetune), average_forgetting(M)
    ap_ft, ap_ms = average_performance(finetune), average_performance(M)
    record_property(
        "detail", f"AF finetune {_fmt(af_ft)} vs msgode {_fmt(af_ms)}; AP finetune {ap_ft:.4f} vs msgode {ap_ms:.4f}"
    )
    assert af_ft > 0
    assert af_ft > af_ms
    assert ap_ms <= ap_ft


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_joint_bounds_finetune(joint, finetune, record_property):
    ap_joint, ap_ft = average_performance(joint), average_performance(finetune)
    record_property("detail", f"AP joint {ap_joint:.4f} vs finetune {ap_ft:.4f}")
    assert ap_joint <= ap_ft


# ---------------------------------------------------------------------------
# 6: edge-popup on a toy network


@pytest.mark.criterion(6)
def test_edge_popup_reduces_regression_loss(record_property):
    rng = np.random.default_rng(0)
    d_in, d_h, n = 8, 64, 256
    x = rng.normal(size=(n, d_in))
    y = np.sin(x @ rng.normal(size=(d_in, 2)))
    w1 = np.where(rng.random((d_in, d_h)) < 0.5, -1.0, 1.0) * math.sqrt(2 / d_in)
    w2 = np.where(rng.random((d_h, 2)) < 0.5, -1.0, 1.0) * math.sqrt(2 / d_h)
    scores = {
        "s1": rng.uniform(-1, 1, (d_in, d_h)) / math.sqrt(d_in),
        "s2": rng.uniform(-1, 1, (d_h, 2)) / math.sqrt(d_h),
    }

    def loss(s1, s2):
        hidden = ad.tanh(masked_forward(x, w1, s1, Strategy()))
        diff = masked_forward(hidden, w2, s2, Strategy()) - y
        return ad.mean(diff * diff)

    before = loss(ad.const(scores["s1"]), ad.const(scores["s2"])).value
    w1_before = w1.copy()
    opt = AdamW(scores, TrainConfig())
    for _ in range(500):
        p = {k: ad.param(v) for k, v in scores.items()}
        g = ad.grad(loss(p["s1"], p["s2"]), [p["s1"], p["s2"]])
        opt.step({"s1": g[0], "s2": g[1]})
    after = loss(ad.const(scores["s1"]), ad.const(scores["s2"])).value
    record_property("detail", f"loss {before:.4f} -> {after:.4f} ({1 - after / before:.0%} reduction in 500 steps)")
    np.testing.assert_array_equal(w1, w1_before)
    assert after <= 0.5 * before


# ---------------------------------------------------------------------------
# 7: binarization study


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_binarization_study_table(smoke_systems, msgode, record_property):
    systems, seed = smoke_systems
    M = msgode[0].matrices["ModeSwitching"]
    # the fast row is the MSGODE run above; binarization_study would retrain it identically
    rows = [{"strategy": "fast", "AP": average_performance(M), "AF": average_forgetting(M)}]
    rows += binarization_study(systems, [Strategy("topk", 0.5)], seed=seed)
    print("\n" + format_study(rows))
    fast_wins = all(rows[0]["AP"] < r["AP"] for r in rows[1:])
    verdict = "fast beats top-k" if fast_wins else "fast does not beat top-k"
    record_property("detail", f"{verdict} on AP ({rows[0]['AP']:.4f} vs {rows[1]['AP']:.4f}); reported, not gated")
    assert [r["strategy"] for r in rows] == ["fast", "topk-0.5"]
    assert all(np.isfinite(r["AP"]) for r in rows)


# ---------------------------------------------------------------------------
# 8: numeric kernels


@pytest.mark.criterion(8)
def test_numeric_kernel_suite(record_property):
    start = time.perf_counter()

    def oscillator_error(step):
        times = np.linspace(0.1, 10.0, 100)
        out = np.stack(integrate(lambda z, t: np.array([z[1], -z[0]]), np.array([0.0, 1.0]), 0.0, times, step))
        return float(np.abs(out - np.stack([np.sin(times), np.cos(times)], axis=1)).max())

    order = math.log2(oscillator_error(0.1) / oscillator_error(0.05))

    cfg = SYSTEMS["S1"]
    traj = simulate(cfg, seed=7)
    assert np.abs(traj.positions).max() < cfg.box_size
    energy = spring_energy(traj, cfg.interaction_strength)
    drift = float(np.abs(energy - energy[0]).max() / energy[0])

    rng = np.random.default_rng(0)
    mu = rng.normal(scale=3, size=(10_000, 4))
    sigma = np.exp(rng.uniform(-4, 2, size=(10_000, 4)))
    kl_min = min(kl_diag_gaussian(mu[i], sigma[i]).value for i in range(10_000))

    sizes = rng.integers(1, 8, size=10_000)
    seg = np.repeat(np.arange(10_000), sizes)
    a = ad.segment_softmax(rng.normal(scale=5.0, size=len(seg)), seg, 10_000).value
    simplex_err = float(np.abs(np.bincount(seg, a) - 1.0).max())

    graph_ok = 0
    for _ in range(100):
        n, T = int(rng.integers(1, 6)), int(rng.integers(1, 12))
        upper = np.triu(rng.random((n, n)) < 0.5, 1)
        w = toy_window(np.sort(rng.random(T)), upper | upper.T, rng.random((T, n)) < 0.7)
        delta = float(rng.uniform(0.01, 0.6))
        g = build_st_graph(w, delta)
        nodes, edges = brute_force_edges(w, delta)
        graph_ok += list(zip(g.node_object.tolist(), g.node_time.tolist())) == nodes and g.edge_set() == edges

    elapsed = time.perf_counter() - start
    record_property(
        "detail",
        f"RK4 order {order:.2f}, energy drift {drift:.1e}, min KL {kl_min:.2e}, "
        f"simplex err {simplex_err:.1e}, graphs {graph_ok}/100, {elapsed:.0f}s",
    )
    assert order >= 3.7
    assert drift < 1e-3
    assert kl_min >= 0
    assert a.min() >= 0 and simplex_err < 1e-12
    assert graph_ok == 100
    assert elapsed < 5 * 60


# ---------------------------------------------------------------------------
# 9: persistence


@pytest.mark.criterion(9)
def test_persistence_round_trips_and_detects_corruption(tmp_path, record_property):
    cfg = SYSTEMS["C4"]
    trajs = generate_dataset(cfg, 3, seed=4)
    ds = DatasetFile(cfg, 4, trajs[:2], trajs[2:])
    save_dataset(tmp_path / "d.cdl", ds)
    assert load_dataset(tmp_path / "d.cdl") == ds

    model = ModelConfig(d_hidden=8, d_latent=4, d_interaction=8)
    backbone, scores = init_backbone(model, 9)
    pool = MaskPool()
    for i in range(2):
        pool.append(i, MaskTriple.from_scores(init_scores(model, i), Strategy()))
    ckpt = Checkpoint(backbone, scores, pool, {"method": "MSGODE"})
    save_checkpoint(tmp_path / "c.cdl", ckpt)
    assert load_checkpoint(tmp_path / "c.cdl") == ckpt

    detected = 0
    for path, load in ((tmp_path / "d.cdl", load_dataset), (tmp_path / "c.cdl", load_checkpoint)):
        clean = path.read_bytes()
        positions = np.linspace(20, len(clean) - 5, 25).astype(int)
        for pos in positions:
            raw = bytearray(clean)
            raw[pos] ^= 0x04
            path.write_bytes(bytes(raw))
            with pytest.raises(ContainerChecksumError):
                load(path)
            detected += 1
    record_property("detail", f"lossless dataset and checkpoint; {detected}/50 corruptions detected")
