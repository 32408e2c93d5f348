"""Acceptance criteria at their stated tolerances, one printed verdict each.

Grid criteria run on ``LEAKGUARD_WORKERS`` processes (default 1).
"""
from __future__ import annotations

import time

import numpy as np
import pytest
from scipy import stats

import test_dlsi
import test_learners
import test_metrics
import test_preprocess
import test_splits
from leakguard.dlsi import TIER_A, TIER_B, TIER_C, TIER_D, bca_interval
from leakguard.sim import (
    FOUR_ARMS,
    MECHANISMS,
    dlsi_null_replicate,
    dlsi_power_replicate,
    four_arm_run,
    run_grid,
    run_split_mode_grid,
)


def verdict(capsys, label: str, ok: bool, detail: str):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def _rates(cells, key="mechanism"):
    return {c[key]: c["rejection_rate"] for c in cells}


@pytest.mark.slow
def test_criterion_1_null_calibration(capsys):
    t0 = time.time()
    cells, _ = run_grid(["none"], ns=(250,), ps=(10,), ss=(0.0,), seeds=100)
    rate = cells[0]["rejection_rate"]
    ok = 0.03 <= rate <= 0.14 and cells[0]["n_ok"] == 100
    verdict(capsys, "criterion 1 null calibration", ok,
            f"rejection {rate:.3f} in [0.03, 0.14], {time.time() - t0:.0f} s")


@pytest.mark.slow
def test_criterion_2_detection_at_s0(capsys):
    cells, _ = run_grid(MECHANISMS, ns=(250,), ps=(10,), ss=(0.0,), seeds=50)
    r = _rates(cells)
    ok = (r["peek_norm"] >= 0.98 and r["subject_overlap"] >= 0.95 and r["batch_confounded"] >= 0.95
          and r["lookahead"] <= 0.15 and r["none"] <= 0.15)
    verdict(capsys, "criterion 2 detection at s=0", ok, ", ".join(f"{m} {r[m]:.2f}" for m in MECHANISMS))


@pytest.mark.slow
def test_criterion_3_split_mode_interaction(capsys):
    cells, _ = run_split_mode_grid(modes=("subject_grouped", "batch_blocked"), mechanisms=("batch_confounded",),
                                   n=500, p=20, seeds=30)
    r = _rates(cells, "split_mode")
    ok = r["batch_blocked"] <= 0.10 and r["subject_grouped"] >= 0.90
    verdict(capsys, "criterion 3 split-mode interaction", ok,
            f"batch_blocked {r['batch_blocked']:.2f} <= 0.10, subject_grouped {r['subject_grouped']:.2f} >= 0.90")


@pytest.mark.slow
def test_criterion_4_inflation_ordering(capsys):
    _, recs = run_grid(MECHANISMS, ns=(500,), ps=(10,), ss=(0.5,), seeds=25)
    assert all(r["status"] == "ok" for r in recs)
    base = {r["replicate"]: r["auc"] for r in recs if r["mechanism"] == "none"}
    infl = {m: float(np.mean([r["auc"] - base[r["replicate"]] for r in recs if r["mechanism"] == m]))
            for m in MECHANISMS[1:]}
    pk, bc, so, la = (infl[m] for m in ("peek_norm", "batch_confounded", "subject_overlap", "lookahead"))
    # the approximate tie is read as a difference of at most 0.05 AUC
    ok = pk > max(bc, so) and abs(bc - so) <= 0.05 and min(bc, so) > la and pk >= 0.15 and la <= 0.08
    verdict(capsys, "criterion 4 inflation ordering", ok, ", ".join(f"{m} {v:+.3f}" for m, v in infl.items()))


@pytest.mark.slow
def test_criterion_5_dlsi_power(capsys):
    res = [dlsi_power_replicate(seed) for seed in range(1, 21)]
    rej = np.mean([r.p_signflip is not None and r.p_signflip < 0.05 for r in res])
    mean_delta = float(np.mean([r.delta_metric for r in res]))
    ok = rej >= 0.95 and abs(mean_delta - 0.197) <= 0.05
    verdict(capsys, "criterion 5 delta-LSI power", ok,
            f"rejection {rej:.2f} >= 0.95, mean delta {mean_delta:.3f} within 0.197 +/- 0.05, "
            f"tiers {sorted({r.tier for r in res})}")


@pytest.mark.slow
def test_criterion_6_dlsi_null(capsys):
    res = [dlsi_null_replicate(seed) for seed in range(1, 51)]
    assert all(r.R_eff == 20 for r in res)
    k = sum(r.p_signflip < 0.05 for r in res)
    p_binom = stats.binomtest(k, 50, 0.05, alternative="greater").pvalue
    mean_delta = float(np.mean([r.delta_metric for r in res]))
    ok = p_binom >= 0.05 and abs(mean_delta) < 0.01
    verdict(capsys, "criterion 6 delta-LSI null", ok,
            f"{k}/50 rejections (binomial p {p_binom:.3f} >= 0.05), mean delta {mean_delta:+.4f}")


def test_criterion_7_oracle_equivalences(capsys):
    test_metrics.test_auc_matches_pair_counting_on_200_instances()
    test_dlsi.test_huber_matches_grid_on_100_vectors()
    test_dlsi.test_exact_vs_monte_carlo_sign_flip()
    for seed in range(10):
        test_learners.test_elastic_net_kkt(seed)
    test_learners.test_kkt_on_near_separable_data()
    verdict(capsys, "criterion 7 oracle equivalences", True,
            "AUC exact on 200, Huber 1e-6 on 100, sign-flip 0.01 on 20, KKT <= 1e-6")


def test_criterion_8_structural_invariants(capsys):
    test_splits.test_grouped_plans_never_straddle()
    test_splits.test_time_order_invariant()
    test_preprocess.test_guard_metamorphic()
    verdict(capsys, "criterion 8 structural invariants", True,
            "1000 grouped plans, time-series plans with purge/embargo, 200 guarded pipelines")


def test_criterion_9_tiers_and_worked_example(capsys):
    for R, tier in [(4, TIER_D), (5, TIER_C), (9, TIER_C), (10, TIER_B), (19, TIER_B), (20, TIER_A)]:
        test_dlsi.test_tier_boundaries(R, tier)
    test_dlsi.test_unpaired_is_tier_d_point_estimates()
    test_dlsi.test_worked_example_fixture()
    verdict(capsys, "criterion 9 tiers and worked example", True,
            "R_eff 4/5/9/10/19/20 and unpaired, fixture 0.791/0.611/0.180/0.181 tier A")


def test_criterion_10_bca_coverage(capsys):
    rng = np.random.default_rng(2024)
    hits = 0
    for i in range(500):
        x = rng.normal(0.1, 0.05, size=20)
        lo, hi = bca_interval(x, "mean", M_boot=2000, seed=i)
        hits += lo <= 0.1 <= hi
    cov = hits / 500
    verdict(capsys, "criterion 10 BCa coverage", 0.90 <= cov <= 0.98, f"coverage {cov:.3f} in [0.90, 0.98]")


@pytest.mark.slow
def test_four_arm_ordering(capsys):
    runs = [four_arm_run(seed) for seed in range(1, 6)]
    mean = {a: float(np.mean([r[a] for r in runs])) for a in FOUR_ARMS}
    v = [mean[a] for a in FOUR_ARMS]
    ok = all(a < b for a, b in zip(v, v[1:]))
    verdict(capsys, "four-arm ordering", ok, " < ".join(f"{a} {mean[a]:.3f}" for a in FOUR_ARMS))
