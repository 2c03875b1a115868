"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting, so a failing criterion still reports its measured value.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from _helpers import random_instance, random_params
from threadpoolctl import threadpool_limits

from m3d import tensor as T
from m3d.attention import UnitLedger, dense_masked_mha, dual_mha, memory_footprint, select_mode, sparse_mha
from m3d.graph import SbmConfig, generate_hierarchical_sbm, toy_graph
from m3d.harness import (
    EXPERTS,
    ensemble_study,
    predicted_units,
    prepare_instance,
    sbm_for_study,
    study_configs,
    train,
)
from m3d.masks import KINDS, AttentionRegion, build_designed_masks, build_mask, extend_universe
from m3d.model import ForwardContext, ModelConfig, init_parameters, model_forward, universe_inputs
from m3d.partition import partition_graph
from m3d.theory import (
    c4_c3_support_check,
    exact_probability,
    make_scenario,
    mc_probability,
    monotonicity_scan,
    probability_bounds,
    random_feasible_scenario,
)

STUDY_SEEDS = (0, 1, 2, 3, 4)


def _run_study(root):
    """The ensemble pipeline over every study seed, single-threaded."""
    results = {}
    with threadpool_limits(limits=1):
        for seed in STUDY_SEEDS:
            model_cfg, train_cfg = study_configs(seed)
            out = root / f"seed{seed}"
            out.mkdir(parents=True)
            results[seed] = ensemble_study(sbm_for_study(seed), model_cfg, train_cfg, out_dir=out, seed=seed)
    return results


@pytest.fixture(scope="session")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study_a")
    start = time.perf_counter()
    results = _run_study(root)
    return root, results, time.perf_counter() - start


def test_c01_scheme_equivalence(criteria):
    rng = np.random.default_rng(2024)
    worst = {np.float32: 0.0, np.float64: 0.0}
    start = time.perf_counter()
    for trial in range(200):
        g, part, u = random_instance(rng)
        mask = build_mask(u, g, part, KINDS[trial % len(KINDS)])
        n_heads = int(rng.choice([1, 2, 4]))
        d_head = int(rng.choice([4, 8, 16]))
        d = n_heads * d_head
        params64 = random_params(rng, d, n_heads)
        h64 = rng.normal(size=(mask.size, d))
        for dtype in (np.float32, np.float64):
            params = replace(params64, **{w: T.Tensor(getattr(params64, w).data.astype(dtype)) for w in ("w_q", "w_k", "w_v")})
            h = h64.astype(dtype)
            dense = dense_masked_mha(h, mask, params).data
            for other in (sparse_mha(h, mask, params).data, dual_mha(h, mask, params).data):
                worst[dtype] = max(worst[dtype], float(np.max(np.abs(other - dense), initial=0.0)))
    elapsed = time.perf_counter() - start
    ok = worst[np.float32] < 1e-5 and worst[np.float64] < 1e-10 and elapsed < 120
    detail = f"max|diff| f32={worst[np.float32]:.2e} f64={worst[np.float64]:.2e} time={elapsed:.1f}s"
    assert criteria.record(1, "scheme equivalence", ok, detail)


def test_c02_gradient_check(criteria):
    g = toy_graph()
    part = partition_graph(g, 2)
    u = extend_universe(g, part)
    masks = build_designed_masks(u, g, part)
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, n_clusters=2)
    store = init_parameters(cfg, g.n_features, g.n_classes, np.float64)
    x, (ids, targets) = universe_inputs(g, u)

    def loss(s):
        return T.cross_entropy_rows(model_forward(x, masks, s, cfg), targets, ids)

    start = time.perf_counter()
    err, details = T.finite_diff_check(loss, store, epsilon=1e-6, n_coords=600, seed=0, return_details=True)
    elapsed = time.perf_counter() - start
    ok = err < 1e-5 and len(details) >= 500 and elapsed < 300
    assert criteria.record(2, "end-to-end gradient check", ok, f"max rel err={err:.2e} coords={len(details)} time={elapsed:.1f}s")


def test_c03_sandwich_and_monte_carlo(criteria):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    sandwich_bad = 0
    within = 0
    n_points = 1000
    for i in range(n_points):
        s = random_feasible_scenario(rng, n_classes=int(rng.integers(2, 6)))
        lo, hi = probability_bounds(s)
        p = exact_probability(s)
        sandwich_bad += not (lo <= p <= hi)
        est = mc_probability(s, samples=100_000, seed=i)
        within += abs(est.estimate - p) <= 3 * est.stderr
    elapsed = time.perf_counter() - start
    rate = within / n_points
    ok = sandwich_bad == 0 and rate >= 0.99 and elapsed < 600
    detail = f"sandwich violations={sandwich_bad} mc within 3se={rate:.3f} time={elapsed:.1f}s"
    assert criteria.record(3, "bound sandwich + Monte Carlo", ok, detail)


def _monotone_grids():
    for n_classes in (2, 3, 5):
        for rho_c in (0.5, 0.7, 0.9):
            for sigma in (0.3, 1.0, 2.0):
                for frac in (0.1, 0.5, 0.9):
                    k = 10
                    alpha_c = 1.0 / k
                    base = make_scenario(n_classes, k, rho_c, alpha_c, sigma, frac * rho_c)
                    yield base, "k", [10, 12, 16, 20, 40, 80, 160]
                    yield base, "rho_c", list(np.linspace(rho_c, 0.99, 8))
                    yield base, "alpha_c", list(np.linspace(alpha_c, 1.0 / (k * rho_c), 8))
                    yield base, "sigma", [0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 4.0]


def test_c04_monotonicity(criteria):
    violations = 0
    scans = 0
    for base, axis, grid in _monotone_grids():
        violations += len(monotonicity_scan(base, axis, grid).violations)
        scans += 1
    assert criteria.record(4, "bound monotonicity", violations == 0, f"scans={scans} violations={violations}")


def test_c05_support_equivalence(criteria):
    rng = np.random.default_rng(11)
    bad = 0
    for i in range(50):
        cfg = SbmConfig(
            n_classes=int(rng.integers(2, 5)),
            clusters_per_class=int(rng.integers(1, 4)),
            nodes_per_cluster=int(rng.integers(5, 30)),
            p_intra=float(rng.uniform(0.05, 0.5)),
            p_cross_diff=float(rng.uniform(0.0, 0.05)),
            seed=i,
        )
        g = generate_hierarchical_sbm(cfg)
        part = partition_graph(g, int(rng.integers(1, min(10, g.n_nodes) + 1)), seed=i)
        bad += not c4_c3_support_check(g, part, seed=i).support_equal
    assert criteria.record(5, "two-hop cluster support", bad == 0, f"instances=50 violations={bad}")


def test_c06_mask_counts(criteria):
    rng = np.random.default_rng(13)
    graphs = [sbm_for_study(seed) for seed in STUDY_SEEDS]
    for _ in range(45):
        graphs.append(random_instance(rng)[0])
    bad = 0
    for i, g in enumerate(graphs):
        part = partition_graph(g, int(rng.integers(1, 7)), seed=i)
        _, c4, g3 = build_designed_masks(extend_universe(g, part), g, part)
        bad += c4.nnz != 3 * g.n_nodes
        bad += g3.nnz != g.n_nodes * g.n_classes + len(g.train_ids)
    assert criteria.record(6, "designed mask counts", bad == 0, f"instances={len(graphs)} mismatches={bad}")


def test_c07_break_even(criteria):
    rng = np.random.default_rng(17)
    disagree = 0
    for _ in range(1000):
        d_head = int(rng.choice([4, 8, 16, 32]))
        n_heads = int(rng.integers(1, 9))
        nq, nk = (int(v) for v in rng.integers(3 * d_head, 12 * d_head, size=2))
        centre = nq * nk / (3 * d_head)
        nnz = int(np.clip(round(centre * rng.uniform(0.5, 1.5)), 1, nq * nk))
        region = AttentionRegion(np.arange(nq), np.arange(nk), np.arange(nnz))
        est = memory_footprint(region, "auto", n_heads, d_head)
        best = min(est.dense_units, est.sparse_units)
        disagree += est.chosen_units != best or select_mode(region, d_head) != est.mode
    identity_bad = 0
    for d_head in (1, 2, 4, 8, 16, 32, 64):
        for n_heads in (1, 4):
            for nnz in (1, 5, 17):
                nq, nk = 3 * d_head, nnz
                region = AttentionRegion(np.arange(nq), np.arange(nk), np.arange(nnz))
                assert region.kappa * 3 * d_head == pytest.approx(1.0)
                est = memory_footprint(region, "auto", n_heads, d_head)
                identity_bad += est.dense_units != est.sparse_units
    ok = disagree == 0 and identity_bad == 0
    assert criteria.record(7, "dense/sparse break-even", ok, f"disagreements={disagree}/1000 identity failures={identity_bad}")


def test_c08_gate_invariants(criteria):
    g = sbm_for_study(0)
    model_cfg, train_cfg = study_configs(0)
    _, u, masks = prepare_instance(g, model_cfg.n_clusters, 0)
    store = init_parameters(model_cfg, g.n_features, g.n_classes, np.dtype(train_cfg.dtype))
    ctx = ForwardContext(record_gates=True)
    model_forward(u.features(g), masks, store, model_cfg, ctx)
    untrained_exact = all(np.array_equal(layer, np.tile([0.5, 0.25, 0.25], (u.total, 1))) for layer in ctx.gates)
    worst = [0.0]

    def watch(epoch, gates):
        for layer in gates:
            worst[0] = max(worst[0], float(np.max(np.abs(layer.astype(np.float64).sum(axis=1) - 1.0))))

    model = train(g, u, masks, model_cfg, replace(train_cfg, patience=None), on_epoch=watch)
    ok = untrained_exact and worst[0] <= 1e-6
    detail = f"untrained exact={untrained_exact} max|sum-1|={worst[0]:.1e} epochs={model.record.rows[-1][0]}"
    assert criteria.record(8, "gate invariants", ok, detail)


def test_c09_ensemble_study(criteria, study):
    _, results, elapsed = study
    mean = {k: float(np.mean([r[k] for r in results.values()])) for k in results[STUDY_SEEDS[0]]}
    best_single = max(mean[e] for e in EXPERTS)
    oracle_margin = min(mean["oracle"] - mean[e] for e in EXPERTS)
    full_margin = mean["full"] - best_single
    ok = oracle_margin >= 0.03 and full_margin >= 0.02 and elapsed < 900
    detail = (
        " ".join(f"{k}={v:.3f}" for k, v in mean.items())
        + f" oracle-min single={100 * oracle_margin:.1f}pt full-best single={100 * full_margin:.1f}pt time={elapsed:.0f}s"
    )
    assert criteria.record(9, "ensemble study", ok, detail)


def test_c10_memory_accounting(criteria):
    g = sbm_for_study(0)
    model_cfg, _ = study_configs(0)
    _, u, masks = prepare_instance(g, model_cfg.n_clusters, 0)
    units = {s: predicted_units(masks, model_cfg, s) for s in ("dense", "sparse", "dual")}
    # the ledger of an actual forward pass must agree with the prediction
    store = init_parameters(model_cfg, g.n_features, g.n_classes)
    ledger = UnitLedger()
    model_forward(u.features(g), masks, store, model_cfg, ForwardContext(ledger=ledger, scheme="dual"))
    ratio = units["dense"] / units["dual"]
    ok = units["dual"] <= units["sparse"] <= units["dense"] and ratio >= 5 and ledger.total == units["dual"]
    detail = f"dense={units['dense']} sparse={units['sparse']} dual={units['dual']} dense/dual={ratio:.1f}x"
    assert criteria.record(10, "memory accounting", ok, detail)


def test_c11_determinism(criteria, study, tmp_path_factory):
    root_a, _, _ = study
    root_b = tmp_path_factory.mktemp("study_b")
    _run_study(root_b)
    files = sorted(p.relative_to(root_a) for p in root_a.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (root_a / f).read_bytes() != (root_b / f).read_bytes()]
    kinds = {f.suffix for f in files}
    ok = not differing and {".ckpt", ".tsv"} <= kinds
    assert criteria.record(11, "bit-identical reruns", ok, f"files={len(files)} differing={differing[:3]}")
