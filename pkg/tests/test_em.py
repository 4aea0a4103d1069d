import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.stats as st
from hypothesis import given, settings
from hypothesis import strategies as hst

from betamix import FitConfig, MethylationMatrix, ModelSpec, ShapeParams, fit
from betamix.em import (accumulate_stats, approx_score_residuals, closed_form_shape, closed_form_shapes, e_step,
                        e_step_loglik, exact_score_residuals, exact_shapes, loglik, m_step_tau, update_shapes)
from betamix.errors import ConfigError, DegenerateStatsError
from betamix.selection import ari


def naive_loglik_and_z(x, tau, a, d):
    """Brute-force products of scipy densities; x is (C, N, R), a/d are (K, N, R)."""
    C = x.shape[0]
    K = len(tau)
    joint = np.empty((C, K))
    for c in range(C):
        for k in range(K):
            joint[c, k] = tau[k] * np.prod(st.beta.pdf(x[c], a[k], d[k]))
    return np.log(joint.sum(axis=1)).sum(), joint / joint.sum(axis=1, keepdims=True)


# E-step -----------------------------------------------------------------------

def test_single_component_responsibility_is_one():
    m = MethylationMatrix(np.random.default_rng(0).uniform(0.1, 0.9, (20, 3)))
    sh = ShapeParams("k..", [[2.0]], [[3.0]], 3, 1)
    assert np.all(e_step(m, [1.0], sh) == 1.0)


def test_identical_components_return_tau():
    m = MethylationMatrix(np.random.default_rng(0).uniform(0.1, 0.9, (20, 3)))
    sh = ShapeParams("k..", [[2.0], [2.0]], [[3.0], [3.0]], 3, 1)
    z = e_step(m, [0.3, 0.7], sh)
    np.testing.assert_allclose(z, np.tile([0.3, 0.7], (20, 1)), atol=1e-15)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_toy_instance_against_direct_products(backend):
    x = np.array([[0.2, 0.3], [0.7, 0.9], [0.5, 0.45]])
    m = MethylationMatrix(x)
    sh = ShapeParams("kn.", [[2.0, 3.0], [6.0, 5.0]], [[5.0, 4.0], [2.0, 1.5]], 2, 1)
    tau = np.array([0.4, 0.6])
    z, ll = e_step_loglik(m, tau, sh, backend)
    ll_ref, z_ref = naive_loglik_and_z(m.values, tau, sh.alpha, sh.delta)
    np.testing.assert_allclose(z, z_ref, rtol=0, atol=1e-12)
    assert ll == pytest.approx(ll_ref, abs=1e-12)


def test_loglik_uniform_single_site():
    m = MethylationMatrix(np.array([[0.3]]))
    assert loglik(m, [1.0], ShapeParams("k..", [[1.0]], [[1.0]], 1, 1)) == pytest.approx(0.0, abs=1e-15)


def test_kr_loglik_against_direct_products(sim_small):
    m = MethylationMatrix(sim_small.matrix.values[:40])
    rng = np.random.default_rng(2)
    sh = ShapeParams("k.r", rng.uniform(1, 10, (9, 2)), rng.uniform(1, 10, (9, 2)), 4, 2)
    tau = rng.dirichlet(np.ones(9))
    z, ll = e_step_loglik(m, tau, sh)
    ll_ref, z_ref = naive_loglik_and_z(m.values, tau, sh.alpha, sh.delta)
    assert ll == pytest.approx(ll_ref, rel=1e-12)
    np.testing.assert_allclose(z, z_ref, atol=1e-12)


def test_extreme_parameters_stay_finite():
    m = MethylationMatrix(np.array([[1e-6, 0.5], [1 - 1e-6, 0.5]]))
    sh = ShapeParams("k..", [[500.0], [0.6]], [[0.6], [500.0]], 2, 1)
    z, ll = e_step_loglik(m, [0.5, 0.5], sh)
    assert np.all(np.isfinite(z)) and math.isfinite(ll)
    np.testing.assert_allclose(z.sum(axis=1), 1.0, atol=1e-12)


def test_parameter_shape_mismatch():
    m = MethylationMatrix(np.full((4, 2), 0.5))
    with pytest.raises(ConfigError):
        e_step(m, [0.5, 0.5], ShapeParams("k..", [[2.0], [3.0]], [[2.0], [3.0]], 3, 1))
    with pytest.raises(ConfigError):
        e_step(m, [0.7, 0.7], ShapeParams("k..", [[2.0], [3.0]], [[2.0], [3.0]], 2, 1))


# M-step: tau and statistics ------------------------------------------------------

def test_tau_from_identity_and_hard_split():
    assert np.allclose(m_step_tau(np.eye(4)), 0.25)
    z = np.zeros((10, 3))
    z[:5, 0] = z[5:8, 1] = z[8:, 2] = 1
    assert m_step_tau(z).tolist() == [0.5, 0.3, 0.2]


def test_y1_of_constant_column():
    m = MethylationMatrix(np.full((7, 1), math.exp(-1)))
    s = accumulate_stats(m, np.full((7, 1), 1.0), ModelSpec("k..", 1))
    assert s.y1[0, 0] == pytest.approx(-1.0, abs=1e-15)


def test_pooling_duplicate_columns_matches_single():
    x = np.random.default_rng(4).uniform(0.05, 0.95, 50)
    z = np.random.default_rng(5).dirichlet([1, 1], 50)
    one = accumulate_stats(MethylationMatrix(x[:, None]), z, ModelSpec("k..", 2))
    two = accumulate_stats(MethylationMatrix(np.column_stack([x, x])), z, ModelSpec("k..", 2))
    np.testing.assert_allclose(one.y1, two.y1, rtol=1e-14)
    np.testing.assert_allclose(one.y2, two.y2, rtol=1e-14)


@pytest.mark.parametrize("variant,N,R", [("k..", 4, 1), ("kn.", 4, 1), ("k.r", 2, 2)])
def test_statistics_against_double_loop(variant, N, R):
    rng = np.random.default_rng(6)
    C, K = 20, 3
    x = rng.uniform(0.01, 0.99, (C, N, R))
    z = rng.dirichlet(np.ones(K), C)
    spec = ModelSpec(variant, K)
    s = accumulate_stats(MethylationMatrix(x), z, spec)
    blocks = spec.variant.block_of_column(N, R)
    B = spec.variant.n_blocks(N, R)
    for k in range(K):
        for b in range(B):
            num1 = num2 = den = 0.0
            for c in range(C):
                for n in range(N):
                    for r in range(R):
                        if blocks[n * R + r] == b:
                            num1 += z[c, k] * math.log(x[c, n, r])
                            num2 += z[c, k] * math.log(1 - x[c, n, r])
                            den += z[c, k]
            assert s.y1[k, b] == pytest.approx(num1 / den, rel=1e-14)
            assert s.y2[k, b] == pytest.approx(num2 / den, rel=1e-14)


def test_statistics_backends_bit_identical(sim_small):
    m = sim_small.matrix
    z = np.random.default_rng(0).dirichlet(np.ones(9), m.C)
    a = accumulate_stats(m, z, ModelSpec("k.r", 9), "numpy")
    b = accumulate_stats(m, z, ModelSpec("k.r", 9), "numba")
    assert np.array_equal(a.sum_log_x, b.sum_log_x) and np.array_equal(a.sum_log_1mx, b.sum_log_1mx)


def test_empty_cluster_flagged():
    m = MethylationMatrix(np.full((5, 1), 0.4))
    z = np.column_stack([np.ones(5), np.zeros(5)])
    s = accumulate_stats(m, z, ModelSpec("k..", 2))
    assert s.empty.tolist() == [False, True]
    assert np.isnan(s.y1[1, 0])


# M-step: shapes ------------------------------------------------------------------

def test_closed_form_symmetry():
    p = closed_form_shape(-0.8, -0.8)
    assert p.alpha == pytest.approx(p.delta, rel=1e-14)


def test_closed_form_inverts_bound_equations():
    a, d = 2.0, 20.0
    y1 = math.log((a - 0.5) / (a + d - 0.5))
    y2 = math.log((d - 0.5) / (a + d - 0.5))
    p = closed_form_shape(y1, y2)
    assert p.alpha == pytest.approx(2.0, abs=1e-10) and p.delta == pytest.approx(20.0, abs=1e-10)


def test_closed_form_value_and_residual():
    p = closed_form_shape(-1.0, -1.0)
    e = math.e
    assert p.alpha == pytest.approx(0.5 * (e - 1) / (e - 2), abs=1e-12)
    s = p.alpha + p.delta - 0.5
    assert abs(math.log((p.alpha - 0.5) / s) + 1.0) < 1e-10
    assert abs(math.log((p.delta - 0.5) / s) + 1.0) < 1e-10


@given(hst.floats(0.6, 200.0), hst.floats(0.6, 200.0))
@settings(max_examples=300, deadline=None)
def test_closed_form_round_trip(a, d):
    s = a + d - 0.5
    al, de, ok = closed_form_shapes(math.log((a - 0.5) / s), math.log((d - 0.5) / s))
    assert ok
    assert al == pytest.approx(a, rel=1e-8) and de == pytest.approx(d, rel=1e-8)


def test_closed_form_degenerate_inputs():
    with pytest.raises(DegenerateStatsError):
        closed_form_shape(0.0, -1.0)
    with pytest.raises(DegenerateStatsError):
        # log x and log(1-x) both near 0 cannot come from any (0,1) sample
        closed_form_shape(-1e-3, -1e-3)


@given(hst.floats(0.3, 150.0), hst.floats(0.3, 150.0))
@settings(max_examples=200, deadline=None)
def test_exact_newton_solves_digamma_equations(a, d):
    from scipy.special import digamma

    y1 = digamma(a) - digamma(a + d)
    y2 = digamma(d) - digamma(a + d)
    al, de, ok = exact_shapes(y1, y2)
    assert ok.all()
    assert al[0] == pytest.approx(a, rel=1e-7) and de[0] == pytest.approx(d, rel=1e-7)


def test_update_keeps_previous_values_for_empty_cluster():
    m = MethylationMatrix(np.random.default_rng(0).beta(2, 5, (30, 1)))
    z = np.column_stack([np.ones(30), np.zeros(30)])
    prev = ShapeParams("k..", [[1.5], [7.0]], [[3.0], [8.0]], 1, 1)
    stats = accumulate_stats(m, z, ModelSpec("k..", 2))
    new, n_bad = update_shapes(stats, prev)
    assert n_bad == 1
    assert new.alpha_free[1, 0] == 7.0 and new.delta_free[1, 0] == 8.0
    assert new.alpha_free[0, 0] != 1.5


# full fits -----------------------------------------------------------------------

def test_invariants_hold_every_iteration(sim_small):
    m = sim_small.matrix.select_sample(0)
    spec = ModelSpec("k..", 3)
    worst = {"rowsum": 0.0, "score": 0.0}

    def check(info):
        worst["rowsum"] = max(worst["rowsum"], np.abs(info.responsibilities.sum(axis=1) - 1).max())
        res = approx_score_residuals(info.stats, info.shapes)
        worst["score"] = max(worst["score"], np.abs(res).max())

    fm = fit(m, spec, FitConfig(seed=0), callback=check)
    assert worst["rowsum"] <= 1e-12
    assert worst["score"] <= 1e-8
    assert fm.converged


def test_kdd_recovers_truth_on_sample_a(kdd_fit_small, sim_small):
    truth = sim_small.states[:, 0]
    assert ari(truth, kdd_fit_small.hard_labels()) > 0.98
    means = kdd_fit_small.shapes.means()[:, 0]
    assert np.all(np.diff(means) > 0)  # canonical order by mean


def test_fit_deterministic_and_backend_independent(sim_small):
    m = sim_small.matrix.select_sample(1)
    a = fit(m, ModelSpec("kn.", 3), FitConfig(seed=3, backend="numpy"))
    b = fit(m, ModelSpec("kn.", 3), FitConfig(seed=3, backend="numpy"))
    c = fit(m, ModelSpec("kn.", 3), FitConfig(seed=3, backend="numba"))
    assert a == b
    assert a.n_iterations == c.n_iterations
    np.testing.assert_allclose(a.loglik_trace, c.loglik_trace, rtol=1e-13)
    np.testing.assert_allclose(a.shapes.alpha_free, c.shapes.alpha_free, rtol=1e-10)
    assert np.array_equal(a.hard_labels(), c.hard_labels())


def test_kdd_invariant_to_patient_permutation(sim_small):
    m = sim_small.matrix.select_sample(0)
    perm = MethylationMatrix(m.values[:, [3, 1, 0, 2], :], m.cpg_ids)
    a = fit(m, ModelSpec("k..", 3), FitConfig(seed=0))
    b = fit(perm, ModelSpec("k..", 3), FitConfig(seed=0))
    np.testing.assert_allclose(a.tau, b.tau, atol=1e-9)
    np.testing.assert_allclose(a.shapes.alpha_free, b.shapes.alpha_free, rtol=1e-8)
    assert np.mean(a.hard_labels() == b.hard_labels()) >= 0.999


def test_exact_mstep_is_monotone(sim_small):
    m = sim_small.matrix.select_sample(0)
    fm = fit(m, ModelSpec("k..", 3), FitConfig(seed=0, exact_mstep=True))
    trace = np.array(fm.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[1:]))
    assert fm.ascent_violations == 0


def test_exact_mstep_scores_vanish(sim_small):
    m = sim_small.matrix.select_sample(0)
    spec = ModelSpec("k..", 3)
    last = {}
    fit(m, spec, FitConfig(seed=0, exact_mstep=True), callback=lambda info: last.update(info=info))
    info = last["info"]
    res = exact_score_residuals(info.stats, info.shapes)
    assert np.abs(res / info.stats.weight[..., None]).max() < 1e-10


def test_max_iterations_respected(sim_small):
    fm = fit(sim_small.matrix, ModelSpec("k.r"), FitConfig(seed=0, max_iterations=3))
    assert fm.n_iterations == 3 and not fm.converged and len(fm.loglik_trace) == 4


def test_callback_and_timings(sim_small):
    seen = []
    timings = {}
    fm = fit(sim_small.matrix.select_sample(0), ModelSpec("k..", 3), FitConfig(seed=0),
             callback=lambda info: seen.append(info.iteration), timings=timings)
    assert seen == list(range(1, fm.n_iterations + 1))
    assert set(timings) == {"init", "em"}


SCRIPT = """
import json, numpy as np
from betamix import FitConfig, ModelSpec, fit
from betamix.simulate import SimConfig, simulate
from betamix import kernels
d = simulate(SimConfig(C=9000, seed=21))
fm = fit(d.matrix, ModelSpec("k.r"), FitConfig(seed=1, max_iterations=40, n_threads={threads}))
import numba
print(json.dumps({{"threads": numba.get_num_threads(), "trace": [v.hex() for v in fm.loglik_trace],
                   "alpha": [v.hex() for v in fm.shapes.alpha_free.ravel()]}}))
"""


@pytest.mark.skipif(os.environ.get("BETAMIX_BACKEND") == "numpy", reason="numba backend disabled")
def test_thread_count_does_not_change_results():
    env = dict(os.environ, NUMBA_NUM_THREADS="4")
    out = []
    for threads in (1, 3, 4):
        proc = subprocess.run([sys.executable, "-c", SCRIPT.format(threads=threads)], env=env,
                              capture_output=True, text=True, check=True)
        out.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    assert [o["threads"] for o in out] == [1, 3, 4]
    assert out[0]["trace"] == out[1]["trace"] == out[2]["trace"]
    assert out[0]["alpha"] == out[1]["alpha"] == out[2]["alpha"]


@pytest.mark.parametrize("a,d", [(2.0, 20.0), (4.0, 3.0), (20.0, 2.0)])
def test_closed_form_population_limit(a, d):
    # With infinite data the statistics equal the exact digamma expectations;
    # the closed form then lands on the root of the bound equations, not on (a, d).
    from scipy.optimize import fsolve
    from scipy.special import digamma

    y1 = digamma(a) - digamma(a + d)
    y2 = digamma(d) - digamma(a + d)

    def eqs(p):
        s = p[0] + p[1] - 0.5
        return [np.log((p[0] - 0.5) / s) - y1, np.log((p[1] - 0.5) / s) - y2]

    oracle = fsolve(eqs, [a, d], xtol=1e-13)
    got = closed_form_shape(y1, y2)
    np.testing.assert_allclose([got.alpha, got.delta], oracle, rtol=1e-10)
    # the generating hypo shapes (2, 20) map to about (2.111, 21.089)
    if (a, d) == (2.0, 20.0):
        assert got.delta == pytest.approx(21.0894, abs=1e-4)
        assert got.alpha == pytest.approx(2.1113, abs=1e-4)
