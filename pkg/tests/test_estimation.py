import math

import numpy as np
import pytest

from epreliab.core import EventLog, ModelParams, ModuleRef, SystemTopology
from epreliab.estimation import (FitConfig, default_init, e_step, estimate_cost, fit, m_step, trace_violations)
from epreliab.intensity import SubWindowing, composite_log_likelihood
from epreliab.simulate import SimConfig, two_parent_params, two_parent_topology, simulate_system
from oracles import reference_em

M11, M12, M21 = ModuleRef(1, 1), ModuleRef(1, 2), ModuleRef(2, 1)
CHAIN = SystemTopology((1, 1))


def two_window_toy():
    # five upstream, two downstream events; windows of length 3.3 when K = 3
    return EventLog(9.9, {M11: [1.0, 2.0, 3.0, 7.0, 8.0], M21: [3.5, 9.0]})


class TestEStep:
    def test_no_candidates_is_primary(self):
        lg = EventLog(10, {M11: [5.0], M21: [1.0, 5.0]})
        post = e_step(ModelParams.uniform(CHAIN, 0.5, 0.3, 0.3), lg, SubWindowing(10, 1), CHAIN)
        assert post[M21].event(0) == {"primary": 1.0}
        # a simultaneous upstream event is not a candidate
        assert post[M21].event(1) == {"primary": 1.0}

    def test_symmetry(self):
        lg = EventLog(10, {M11: [1.0], M12: [1.0], M21: [2.0]})
        post = e_step(two_parent_params(), lg, SubWindowing(10, 1), two_parent_topology())
        ev = post[M21].event(0)
        assert ev[(M11, 0)] == pytest.approx(ev[(M12, 0)], rel=1e-15)

    def test_hand_ratio(self):
        # kernel value 0.09 needs zero lag; use a tiny lag and compare with the exact ratio
        lg = EventLog(10, {M11: [1.0], M21: [1.0 + 1e-12]})
        post = e_step(ModelParams.uniform(CHAIN, 0.5, 0.3, 0.3), lg, SubWindowing(10, 1), CHAIN)
        ev = post[M21].event(0)
        assert ev["primary"] == pytest.approx(0.847458, abs=1e-6)
        assert ev[(M11, 0)] == pytest.approx(0.152542, abs=1e-6)

    def test_window_restriction(self):
        lg = EventLog(10, {M11: [1.0, 6.0], M21: [7.0]})
        post = e_step(ModelParams.uniform(CHAIN, 0.5, 0.3, 0.3), lg, SubWindowing(10, 2), CHAIN)
        assert set(post[M21].event(0)) == {"primary", (M11, 1)}

    def test_normalization(self):
        lg = simulate_system(SimConfig(two_parent_topology(), two_parent_params(), 400.0, seed=2))
        post = e_step(two_parent_params(), lg, SubWindowing(400, 4), two_parent_topology())
        assert post.normalization_error() < 1e-12


class TestMStep:
    def test_all_primary_is_hpp_mle(self):
        lg = EventLog(10, {M11: [1.0, 2.0, 3.0]})
        p = ModelParams({M11: 7.0})
        topo = SystemTopology((1,))
        new = m_step(e_step(p, lg, SubWindowing(10, 1), topo), lg, SubWindowing(10, 1), p, topo)
        assert new.lambda0[M11] == pytest.approx(0.3)

    def test_zero_mass_pair(self):
        lg = EventLog(10, {M11: [5.0], M21: [1.0]})
        p = ModelParams.uniform(CHAIN, 0.5, 0.3, 0.7)
        new = m_step(e_step(p, lg, SubWindowing(10, 1), CHAIN), lg, SubWindowing(10, 1), p, CHAIN)
        assert new.alpha[(M21, M11)] == 0.0
        assert new.beta[(M21, M11)] == 0.7

    def test_hand_computation(self):
        # one upstream event at 1, downstream events at 2 and 4, T = 10
        lg = EventLog(10, {M11: [1.0], M21: [2.0, 4.0]})
        p = ModelParams({M11: 0.2, M21: 0.5}, {(M21, M11): 0.3}, {(M21, M11): 0.3})
        k1, k2 = 0.09 * math.exp(-0.3), 0.09 * math.exp(-0.9)
        p1, p2 = k1 / (0.5 + k1), k2 / (0.5 + k2)
        P = p1 + p2
        lam_new = ((1 - p1) + (1 - p2)) / 10
        alpha_new = P / (1 - math.exp(-0.3 * 9))
        beta_new = P / (p1 * 1 + p2 * 3 + alpha_new * 9 * math.exp(-0.3 * 9))
        new = m_step(e_step(p, lg, SubWindowing(10, 1), CHAIN), lg, SubWindowing(10, 1), p, CHAIN)
        assert new.lambda0[M21] == pytest.approx(lam_new, rel=1e-14)
        assert new.lambda0[M11] == pytest.approx(0.1, rel=1e-14)
        assert new.alpha[(M21, M11)] == pytest.approx(alpha_new, rel=1e-14)
        assert new.beta[(M21, M11)] == pytest.approx(beta_new, rel=1e-14)

    def test_window_edge_exposure(self):
        # with K = 2 the upstream event at 1 is exposed only up to the window edge at 5
        lg = EventLog(10, {M11: [1.0], M21: [2.0]})
        p = ModelParams({M11: 0.2, M21: 0.5}, {(M21, M11): 0.3}, {(M21, M11): 0.3})
        k = 0.09 * math.exp(-0.3)
        P = k / (0.5 + k)
        w = SubWindowing(10, 2)
        new = m_step(e_step(p, lg, w, CHAIN), lg, w, p, CHAIN)
        assert new.alpha[(M21, M11)] == pytest.approx(P / (1 - math.exp(-0.3 * 4)), rel=1e-14)

    def test_fused_and_materialised_paths_agree(self):
        topo, truth = two_parent_topology(), two_parent_params()
        lg = simulate_system(SimConfig(topo, truth, 300.0, seed=4))
        w = SubWindowing(300, 3)
        start = default_init(lg, topo, w)
        rep = fit(lg, topo, FitConfig(K=3, max_iterations=1, tolerance=1e-300, init=start))
        via_posterior = m_step(e_step(start, lg, w, topo), lg, w, start, topo)
        np.testing.assert_allclose(rep.estimates.flatten(topo), via_posterior.flatten(topo), rtol=1e-12)


class TestFit:
    def test_stage1_only(self):
        lg = EventLog(100, {M11: np.linspace(1, 99, 37), M12: [3.0]})
        for K in (1, 4, 10):
            rep = fit(lg, SystemTopology((2,)), FitConfig(K=K))
            assert rep.estimates.lambda0[M11] == pytest.approx(0.37)
            assert rep.estimates.lambda0[M12] == pytest.approx(0.01)
            assert rep.converged and rep.iterations <= 3

    def test_matches_reference_em_trajectory(self):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 300.0, seed=6))
        init = default_init(lg, topo, SubWindowing(300, 1))
        n = 25
        rep = fit(lg, topo, FitConfig(K=1, max_iterations=n, tolerance=1e-300, init=init))
        ref = reference_em(lg, M21, [M11, M12], init, n)
        assert rep.iterations == n
        stage1 = sum(lg.count(m) * math.log(lg.count(m) / 300) - lg.count(m) for m in (M11, M12))
        for a in range(1, n):
            # package trace includes the stage-1 terms, which are at their optimum from iterate 1 on
            assert rep.ll_trace[a] == pytest.approx(ref[a][3] + stage1, rel=1e-10)
        # n E-steps and n M-steps were applied, so the estimates are the reference's iterate n
        lam0, al, be, _ = reference_em(lg, M21, [M11, M12], init, n + 1)[-1]
        got = rep.estimates
        assert got.lambda0[M21] == pytest.approx(lam0, rel=1e-10)
        np.testing.assert_allclose([got.alpha[(M21, M11)], got.alpha[(M21, M12)]], al, rtol=1e-10)
        np.testing.assert_allclose([got.beta[(M21, M11)], got.beta[(M21, M12)]], be, rtol=1e-10)

    def test_trace_is_objective_of_iterates(self):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 200.0, seed=8))
        w = SubWindowing(200, 4)
        init = default_init(lg, topo, w)
        rep = fit(lg, topo, FitConfig(K=4, max_iterations=6, tolerance=1e-300, init=init))
        assert len(rep.ll_trace) == 6 and not rep.converged
        assert rep.ll_trace[0] == pytest.approx(composite_log_likelihood(init, lg, w), rel=1e-12)
        one = fit(lg, topo, FitConfig(K=4, max_iterations=1, tolerance=1e-300, init=init)).estimates
        assert rep.ll_trace[1] == pytest.approx(composite_log_likelihood(one, lg, w), rel=1e-12)

    def test_max_iter_one(self):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 100.0, seed=1))
        rep = fit(lg, topo, FitConfig(max_iterations=1))
        assert not rep.converged and len(rep.ll_trace) == 1

    @pytest.mark.parametrize("K", [1, 2, 5, 25])
    def test_ascent_and_normalization(self, K):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 500.0, seed=K))
        rep = fit(lg, topo, FitConfig(K=K))
        assert rep.is_ascending(1e-8)
        assert rep.max_normalization_error < 1e-12
        assert rep.posterior.normalization_error() < 1e-12

    def test_stationarity_of_likelihood(self):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 500.0, seed=12))
        tol = 1e-7
        rep = fit(lg, topo, FitConfig(K=2, tolerance=tol, max_iterations=5000))
        w = SubWindowing(500, 2)
        nxt = m_step(rep.posterior, lg, w, rep.estimates, topo)
        l0 = composite_log_likelihood(rep.estimates, lg, w)
        l1 = composite_log_likelihood(nxt, lg, w)
        assert 0 <= l1 - l0 < 10 * tol * (abs(l0) + 1)

    def test_parameter_steps_shrink_with_tolerance(self):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 500.0, seed=12))
        w = SubWindowing(500, 1)
        steps = []
        for tol in (1e-5, 1e-7, 1e-9):
            rep = fit(lg, topo, FitConfig(K=1, tolerance=tol, max_iterations=20000))
            nxt = m_step(rep.posterior, lg, w, rep.estimates, topo)
            a, b = rep.estimates.flatten(topo), nxt.flatten(topo)
            steps.append(np.max(np.abs(b - a) / a))
        assert steps[0] > steps[1] > steps[2]

    def test_stage1_stationarity_exact(self):
        lg = EventLog(50, {M11: [1.0, 4.0, 9.0]})
        topo = SystemTopology((1,))
        rep = fit(lg, topo, FitConfig())
        w = SubWindowing(50, 1)
        nxt = m_step(rep.posterior, lg, w, rep.estimates, topo)
        assert nxt.lambda0[M11] == rep.estimates.lambda0[M11]

    def test_explicit_init_validated(self):
        topo = two_parent_topology()
        lg = EventLog(10, {})
        with pytest.raises(ValueError, match="invalid initial"):
            fit(lg, topo, FitConfig(init=ModelParams({M11: 1.0})))

    def test_config_validation(self):
        for bad in (dict(K=0), dict(tolerance=0.0), dict(max_iterations=0), dict(init="random")):
            with pytest.raises(ValueError):
                FitConfig(**bad)

    def test_report_dict(self):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 100.0, seed=1))
        d = fit(lg, topo, FitConfig(K=2)).to_dict()
        assert set(d) >= {"estimates", "ll_trace", "iterations", "converged", "elapsed_seconds", "K"}


class TestCost:
    def test_fig4_toy(self):
        lg = two_window_toy()
        assert estimate_cost(lg, SubWindowing(9.9, 1), CHAIN) == 8
        assert estimate_cost(lg, SubWindowing(9.9, 3), CHAIN) == 2

    def test_no_downstream_events(self):
        lg = EventLog(10, {M11: [1.0, 2.0]})
        assert estimate_cost(lg, SubWindowing(10, 1), CHAIN) == 0

    def test_matches_pairs_visited(self):
        topo = two_parent_topology()
        lg = simulate_system(SimConfig(topo, two_parent_params(), 300.0, seed=2))
        for K in (1, 3, 30):
            rep = fit(lg, topo, FitConfig(K=K, max_iterations=1))
            assert rep.pairs_per_iteration == estimate_cost(lg, SubWindowing(300, K), topo)
            post = rep.posterior
            assert post[M21].prob.size == rep.pairs_per_iteration


def test_trace_violations_counts_drops():
    assert trace_violations([1.0, 2.0, 3.0]) == 0
    assert trace_violations([-100.0, -100.0 - 1e-7]) == 0
    assert trace_violations([-100.0, -101.0, -100.5]) == 1


def test_cost_non_increasing_over_nested_windowings():
    topo = two_parent_topology()
    lg = simulate_system(SimConfig(topo, two_parent_params(), 1000.0, seed=3))
    costs = [estimate_cost(lg, SubWindowing(1000.0, K), topo) for K in (1, 2, 10, 50, 250, 500)]
    assert all(a >= b for a, b in zip(costs, costs[1:]))
