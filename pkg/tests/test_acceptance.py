"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (also repeated
in the terminal summary) and then asserts the outcome at the stated tolerance.
"""
import math
import os
import time

import numpy as np
import pytest

from betamix import FitConfig, ModelSpec, ShapeParams, fit
from betamix.betamath import digamma_exact, digamma_lb
from betamix.em import accumulate_stats, approx_score_residuals, e_step, update_shapes
from betamix.model import MethylationMatrix
from betamix.selection import ari, select_models
from betamix.simulate import SimConfig, simulate, true_thresholds
from betamix.thresholds import infer_thresholds
from helpers import ACCEPTANCE, SINGLE_SAMPLE_COUNTS, PAIRED_COUNTS, PUBLISHED_ALPHA, PUBLISHED_DELTA, labels_from_table

N_DATASETS = 20
REAL_DATA_ENV = "BETAMIX_REAL_DATA"


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


class Invariants:
    """Worst-case invariant values seen by fit callbacks across every run."""

    def __init__(self):
        self.rowsum = 0.0
        self.score = 0.0
        self.slack = 0.0
        self.n_iter = 0

    def callback(self, info):
        self.rowsum = max(self.rowsum, float(np.abs(info.responsibilities.sum(axis=1) - 1).max()))
        self.score = max(self.score, float(np.abs(approx_score_residuals(info.stats, info.shapes)).max()))
        self.n_iter += 1

    def trace(self, fm):
        ll = np.asarray(fm.loglik_trace)
        if ll.size > 1:
            drop = (ll[:-1] - ll[1:]) / np.abs(ll[1:])
            self.slack = max(self.slack, float(drop.max()))


INV = Invariants()


@pytest.fixture(scope="module")
def datasets():
    out = []
    for s in range(N_DATASETS):
        sim = simulate(SimConfig(seed=1000 + s))
        a = sim.matrix.select_sample(0)
        t0 = time.perf_counter()
        kdd = fit(a, ModelSpec("k..", 3), FitConfig(seed=s), callback=INV.callback)
        elapsed = time.perf_counter() - t0
        kn = fit(a, ModelSpec("kn.", 3), FitConfig(seed=s), callback=INV.callback)
        INV.trace(kdd)
        INV.trace(kn)
        out.append(dict(sim=sim, kdd=kdd, kn=kn, seconds=elapsed))
    return out


def test_criterion_1_kdd_ari(datasets):
    scores = [ari(d["sim"].states[:, 0], d["kdd"].hard_labels()) for d in datasets]
    slowest = max(d["seconds"] for d in datasets)
    ok = np.mean(scores) >= 0.99 and slowest < 60
    report(1, ok, f"mean ARI {np.mean(scores):.4f} (sd {np.std(scores, ddof=1):.5f}) >= 0.99; "
                  f"slowest fit {slowest:.2f} s < 60 s")


def test_criterion_2_thresholds(datasets):
    truth = true_thresholds(SimConfig())
    worst_lo = worst_hi = 0.0
    for d in datasets:
        pair = infer_thresholds(d["kdd"])["global"]
        worst_lo = max(worst_lo, abs(pair.t_lo - truth.t_lo))
        worst_hi = max(worst_hi, abs(pair.t_hi - truth.t_hi))
    published_inside = abs(0.242 - truth.t_lo) <= 0.02 and abs(0.808 - truth.t_hi) <= 0.02
    ok = worst_lo <= 0.02 and worst_hi <= 0.02 and published_inside
    report(2, ok, f"true ({truth.t_lo:.4f}, {truth.t_hi:.4f}); worst deviation "
                  f"({worst_lo:.4f}, {worst_hi:.4f}) <= 0.02; published (0.242, 0.808) inside band: {published_inside}")


def test_criterion_3_kr_ari(datasets):
    scores = []
    for s, d in enumerate(datasets):
        fm = fit(d["sim"].matrix, ModelSpec("k.r"), FitConfig(seed=s), callback=INV.callback)
        INV.trace(fm)
        scores.append(ari(d["sim"].joint, fm.hard_labels()))
    report(3, np.mean(scores) >= 0.85,
           f"mean ARI {np.mean(scores):.4f} (sd {np.std(scores, ddof=1):.4f}, min {min(scores):.4f}) >= 0.85")


def test_criterion_4_parameter_recovery(datasets):
    target = np.column_stack([PUBLISHED_ALPHA, PUBLISHED_DELTA])
    shapes = np.array([np.column_stack([d["kdd"].shapes.alpha_free[:, 0], d["kdd"].shapes.delta_free[:, 0]])
                       for d in datasets])
    taus = np.array([d["kdd"].tau for d in datasets])
    shape_dev = np.abs(shapes - target).max(axis=(1, 2))
    tau_dev = np.abs(taus - [0.35, 0.35, 0.30]).max(axis=1)
    n_ok = int(np.sum((shape_dev <= 0.15) & (tau_dev <= 0.01)))
    mean = shapes.mean(axis=0)
    report(4, n_ok == len(datasets),
           f"{n_ok}/{len(datasets)} datasets within 0.15 of published shapes and 0.01 of tau; "
           f"worst shape dev {shape_dev.max():.3f}, worst tau dev {tau_dev.max():.4f}; "
           f"mean shapes {np.round(mean, 3).tolist()}")


def test_criterion_5_bic_selection(datasets):
    wins = sum(select_models({"k..": d["kdd"], "kn.": d["kn"]}).best_by["bic"] == "k.." for d in datasets)
    report(5, wins >= 18, f"BIC picks k.. in {wins}/{len(datasets)} datasets (need >= 18)")


def test_criterion_6_ari_from_tables():
    a2 = ari(*labels_from_table(PAIRED_COUNTS))
    a1 = ari(*labels_from_table(SINGLE_SAMPLE_COUNTS))
    report(6, abs(a2 - 0.929) <= 0.001 and abs(a1 - 0.997) <= 0.001,
           f"ARI paired counts {a2:.4f} (0.929 +- 0.001), single-sample counts {a1:.4f} (0.997 +- 0.001)")


def random_instance(rng):
    K = int(rng.integers(2, 5))
    N = int(rng.integers(1, 3))
    C = int(rng.integers(100, 501))
    alpha = rng.uniform(4, 40, size=(K, 1))
    delta = rng.uniform(4, 40, size=(K, 1))
    tau = rng.dirichlet(np.full(K, 3.0))
    z = rng.choice(K, size=C, p=tau)
    values = rng.beta(alpha[z], delta[z], size=(C, N))
    matrix = MethylationMatrix(np.clip(values, 1e-6, 1 - 1e-6))
    return matrix, tau, ShapeParams("k..", alpha, delta, N, 1)


def test_criterion_7_closed_form_vs_exact():
    rng = np.random.default_rng(20240607)
    spec_cache = {}
    worst_rel = 0.0
    agree = total = 0
    t_closed = t_exact = 0.0
    for _ in range(50):
        matrix, tau, truth = random_instance(rng)
        spec = spec_cache.setdefault(truth.K, ModelSpec("k..", truth.K))
        z = e_step(matrix, tau, truth)
        stats = accumulate_stats(matrix, z, spec)
        closed, _ = update_shapes(stats, truth)
        exact, _ = update_shapes(stats, truth, exact=True)
        rel = np.abs(np.concatenate([closed.alpha_free / exact.alpha_free - 1,
                                     closed.delta_free / exact.delta_free - 1]))
        worst_rel = max(worst_rel, float(rel.max()))
        lab_c = e_step(matrix, tau, closed).argmax(axis=1)
        lab_e = e_step(matrix, tau, exact).argmax(axis=1)
        agree += int(np.sum(lab_c == lab_e))
        total += matrix.C
        reps = 20
        t0 = time.perf_counter()
        for _ in range(reps):
            update_shapes(stats, truth)
        t1 = time.perf_counter()
        for _ in range(reps):
            update_shapes(stats, truth, exact=True)
        t2 = time.perf_counter()
        t_closed += t1 - t0
        t_exact += t2 - t1
    frac = agree / total
    speedup = t_exact / t_closed
    report(7, worst_rel <= 0.05 and frac >= 0.99 and speedup >= 10,
           f"worst relative shape gap {worst_rel:.4f} <= 0.05; argmax agreement {frac:.4f} >= 0.99; "
           f"shape-solve speedup {speedup:.1f}x >= 10")


def test_criterion_8_invariants(datasets):
    # runs after the fitting criteria so every acceptance fit has been seen
    y = np.linspace(0.5 + 1e-6, 1000.0, 1_000_001)
    bound_ok = bool(np.all(digamma_exact(y) > digamma_lb(y)))
    ok = INV.rowsum <= 1e-12 and INV.score <= 1e-8 and INV.slack <= 1e-6 and bound_ok
    report(8, ok, f"over {INV.n_iter} M-steps: row-sum error {INV.rowsum:.2e} <= 1e-12, "
                  f"score residual {INV.score:.2e} <= 1e-8, ascent slack {INV.slack:.2e} <= 1e-6 |l|, "
                  f"digamma bound on 1e6-point grid: {bound_ok}")


def test_criterion_9_real_data():
    path = os.environ.get(REAL_DATA_ENV)
    if not path:
        line = f"criterion 9: SKIPPED  set {REAL_DATA_ENV} to a beta-value CSV to run"
        print(line)
        ACCEPTANCE.append(line)
        pytest.skip(line)
    from betamix.dmc import dmc_fraction
    from betamix.io import load_csv
    from betamix.thresholds import label_kr_clusters

    matrix = load_csv(path)
    t0 = time.perf_counter()
    fm = fit(matrix, ModelSpec("k.r"), FitConfig(seed=0), callback=INV.callback)
    minutes = (time.perf_counter() - t0) / 60
    frac = dmc_fraction(fm, label_kr_clusters(fm))
    report(9, minutes < 30 and math.isclose(frac, 0.446, abs_tol=0.03),
           f"C={matrix.C} fit {minutes:.1f} min < 30; DMC fraction {frac:.4f} (0.446 +- 0.03)")
