import numpy as np
import pytest

from asyncnn.analysis import solve_constrained_reference, solve_reference
from asyncnn.engine import (TRACE_COLUMNS, ActivationSchedule, AsyncNewtonSimulator, RunConfig,
                            Trace, enumerate_one_step_expectation, run_async_newton, run_gossip,
                            run_sync_newton, slow_agent_costs)
from asyncnn.newton_core import (AgentState, compute_D_ii, compute_d0_i, compute_g_i,
                                 compute_newton_dir_i, dense_hatH_inverse,
                                 distributed_directions, step_active_agent, theory_constants)
from asyncnn.objectives import (make_problem, penalized_gradient, penalized_value,
                                quadratic_locals)
from asyncnn.topology import Graph, build_consensus, build_graph

from conftest import k5_quadratic, logistic_problem

# chi-square 0.999 quantile with 4 degrees of freedom
CHI2_999_DF4 = 18.4668


class DictOracle:
    """Per-agent simulator built only from the local kernel functions."""

    def __init__(self, spec, x0, p, eps, scaled=True):
        self.spec, self.p, self.eps, self.scaled = spec, p, eps, scaled
        W = spec.W.W
        self.W = W
        X = spec.blocks(x0)
        self.nb = {i: [int(j) for j in spec.W.neighbors(i)] for i in range(spec.n)}
        self.s = {}
        for i, f in enumerate(spec.locals):
            st = AgentState(i, X[i].copy(), compute_D_ii(f, X[i], spec.alpha, W[i, i]),
                            None, None, {j: X[j].copy() for j in self.nb[i]}, {})
            st.g = compute_g_i(st, f, spec.alpha, W[i])
            st.d0 = compute_d0_i(st)
            self.s[i] = st
        for i in self.s:
            self.s[i].buf_d0 = {j: self.s[j].d0.copy() for j in self.nb[i]}

    def _refresh(self, j, f):
        st = self.s[j]
        st.g = compute_g_i(st, f, self.spec.alpha, self.W[j])
        st.d0 = compute_d0_i(st)

    def activate(self, i):
        spec, st, f = self.spec, self.s[i], self.spec.locals[i]
        self._refresh(i, f)
        d = compute_newton_dir_i(st, self.W[i])
        st.x = step_active_agent(st.x, d, self.eps, self.p[i], scaled=self.scaled)
        st.D = compute_D_ii(f, st.x, spec.alpha, self.W[i, i])
        self._refresh(i, f)
        for j in self.nb[i]:
            self.s[j].buf_x[i] = st.x.copy()
            self.s[j].buf_d0[i] = st.d0.copy()
        for j in self.nb[i]:
            self._refresh(j, spec.locals[j])
            for l in self.nb[j]:
                self.s[l].buf_d0[j] = self.s[j].d0.copy()

    def stacked(self):
        return np.concatenate([self.s[i].x for i in range(self.spec.n)])


def assert_same_state(sim, oracle, tol):
    for i in range(sim.n):
        a, b = sim.agent_state(i), oracle.s[i]
        np.testing.assert_allclose(a.x, b.x, atol=tol, rtol=0)
        np.testing.assert_allclose(a.D, b.D, atol=tol, rtol=0)
        assert set(a.buf_x) == set(b.buf_x) == set(oracle.nb[i])
        for j in a.buf_x:
            np.testing.assert_allclose(a.buf_x[j], b.buf_x[j], atol=tol, rtol=0)
            np.testing.assert_allclose(a.buf_d0[j], b.buf_d0[j], atol=tol, rtol=0)


@pytest.mark.parametrize("kind, family", [("ring", "quadratic"), ("path", "logistic"),
                                          ("erdos_renyi(0.5)", "logistic")])
def test_simulator_matches_dict_oracle(kind, family):
    if family == "quadratic":
        cm = build_consensus(build_graph(kind, 6, seed=1))
        rng = np.random.default_rng(1)
        spec = make_problem(quadratic_locals(rng.uniform(0.5, 2, 6), rng.normal(size=6)), cm, 1.0)
    else:
        spec = logistic_problem(kind, 6, seed=2)
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=spec.n * spec.dim)
    p = rng.dirichlet(np.ones(spec.n))
    sched = ActivationSchedule(p, "scaled", seed=3)
    eps = 0.05
    sim = AsyncNewtonSimulator(spec, x0)
    oracle = DictOracle(spec, x0, p, eps)
    assert_same_state(sim, oracle, 1e-14)
    steps = sched.step_sizes(eps)
    for i in sched.draw(300):
        sim.activate(int(i), steps[i])
        oracle.activate(int(i))
    assert_same_state(sim, oracle, 1e-11)


def test_compiled_backend_matches_python():
    spec = k5_quadratic()
    ref = solve_reference(spec)
    sched = ActivationSchedule([0.1, 0.2, 0.3, 0.25, 0.15], "scaled", seed=5)
    eps = 0.05
    a = run_async_newton(RunConfig(spec, sched, eps, 400, reference=ref, backend="python"))
    b = run_async_newton(RunConfig(spec, sched, eps, 400, reference=ref, backend="compiled"))
    np.testing.assert_array_equal(a.active_agent, b.active_agent)
    np.testing.assert_allclose(a.F, b.F, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(a.weighted_err, b.weighted_err, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(a.final_state, b.final_state, atol=1e-13)
    assert set(a.snapshots) == set(b.snapshots)


def test_compiled_backend_rejects_logistic():
    spec = logistic_problem()
    with pytest.raises(ValueError):
        run_async_newton(RunConfig(spec, ActivationSchedule.uniform(5), 0.1, 5,
                                   backend="compiled"))


def test_trace_records_exact_objective():
    spec = logistic_problem("ring", 5)
    tr = run_async_newton(RunConfig(spec, ActivationSchedule.uniform(5, seed=2), 0.1, 30))
    for t, x in tr.snapshots.items():
        assert tr.F[t] == pytest.approx(penalized_value(spec, x), rel=1e-13)
    assert np.all(np.diff(tr.t) == 1)


def test_T_zero_holds_initial_record():
    spec = k5_quadratic()
    x0 = np.arange(5.0)
    tr = run_async_newton(RunConfig(spec, ActivationSchedule.uniform(5), 0.1, 0, x0=x0))
    assert len(tr) == 1 and tr.t[0] == 0 and tr.active_agent[0] == -1
    np.testing.assert_array_equal(tr.final_state, x0)
    assert tr.F[0] == penalized_value(spec, x0)


def test_one_block_changes_per_activation():
    spec = logistic_problem("ring", 6)
    sim = AsyncNewtonSimulator(spec)
    sched = ActivationSchedule.uniform(6, seed=9)
    for i in sched.draw(50):
        before = sim.x.copy()
        sim.activate(int(i), 0.1 * 6)
        changed = np.flatnonzero(np.any(sim.x != before, axis=1))
        assert set(changed) <= {int(i)}


def test_step8_buffers_outside_two_hops_untouched():
    cm = build_consensus(build_graph("path", 7))
    spec = make_problem(quadratic_locals([1.0] * 7, np.arange(7.0)), cm, 1.0)
    sim = AsyncNewtonSimulator(spec, np.linspace(-1, 1, 7))
    bx, bd = sim.buf_x.copy(), sim.buf_d0.copy()
    sim.activate(0, 0.5)
    # agent 0 activates: neighbors {1}; agent 1 rebroadcasts d0 to {0, 2}
    assert np.any(sim.buf_x[1, 0] != bx[1, 0])
    for j in range(3, 7):
        np.testing.assert_array_equal(sim.buf_x[j], bx[j])
        np.testing.assert_array_equal(sim.buf_d0[j], bd[j])
    np.testing.assert_array_equal(sim.buf_x[2], bx[2])
    np.testing.assert_array_equal(sim.buf_d0[2, 3], bd[2, 3])


def test_determinism_bit_identical():
    spec = logistic_problem()
    cfg = RunConfig(spec, ActivationSchedule.uniform(5, seed=11), 0.1, 60, record_every=7)
    a, b = run_async_newton(cfg), run_async_newton(cfg)
    assert a.to_csv_text() == b.to_csv_text()
    assert all(np.array_equal(a.snapshots[k], b.snapshots[k]) for k in a.snapshots)
    assert sorted(a.snapshots) == [0, 7, 14, 21, 28, 35, 42, 49, 56]


def test_seed_changes_agents():
    s = ActivationSchedule.uniform(5, seed=1)
    assert not np.array_equal(s.draw(100), s.with_seed(2).draw(100))


def test_activation_frequencies_chi_square():
    p = np.array([0.1, 0.15, 0.2, 0.25, 0.3])
    N = 100_000
    counts = np.bincount(ActivationSchedule(p, seed=123).draw(N), minlength=5)
    stat = float(((counts - N * p) ** 2 / (N * p)).sum())
    assert stat < CHI2_999_DF4


@pytest.mark.parametrize("p, mode", [([0.5, 0.6], "scaled"), ([1.0, 0.0], "scaled"),
                                     ([0.5, 0.5], "bogus")])
def test_schedule_validation(p, mode):
    with pytest.raises(ValueError):
        ActivationSchedule(p, mode)


def test_step_size_conventions():
    s = ActivationSchedule([0.2, 0.8])
    np.testing.assert_allclose(s.step_sizes(0.1), [0.5, 0.125])
    u = ActivationSchedule.uniform(4, "uniform_unscaled")
    np.testing.assert_allclose(u.step_sizes(0.3), 0.3)
    assert u.scaled_equivalent_eps(0.4) == pytest.approx(0.1)
    assert ActivationSchedule([0.2, 0.8], "uniform_unscaled").scaled_equivalent_eps(0.1) is None


def test_run_config_validation():
    spec = k5_quadratic()
    s = ActivationSchedule.uniform(5)
    for kw in ({"eps": 0.0, "T": 1}, {"eps": 0.1, "T": -1}):
        with pytest.raises(ValueError):
            RunConfig(spec, s, **kw)
    with pytest.raises(ValueError):
        RunConfig(spec, ActivationSchedule.uniform(4), 0.1, 1)
    with pytest.raises(ValueError):
        RunConfig(spec, s, 0.1, 1, x0=np.zeros(3)).initial_point()
    with pytest.raises(ValueError):
        RunConfig(spec, s, 0.1, 1, costs=np.zeros(5)).agent_costs()


def test_single_agent_scalar_iteration():
    cm = build_consensus(Graph.from_pairs(1, []))
    spec = make_problem(quadratic_locals([1.0], [5.0]), cm, 1.0)
    eps = 0.3
    ref = solve_reference(spec)
    assert ref.x_star[0] == pytest.approx(5.0)
    for backend in ("python", "compiled"):
        tr = run_async_newton(RunConfig(spec, ActivationSchedule([1.0]), eps, 40,
                                        reference=ref, backend=backend))
        # d = -(x - 5) exactly, so x_t = 5 - 5 (1 - eps)^t
        xs = np.array([tr.snapshots[t][0] for t in range(41)])
        np.testing.assert_allclose(xs, 5 - 5 * (1 - eps) ** np.arange(41), rtol=1e-14)
        assert np.all(np.diff(tr.F) < 0)
        assert np.all(np.diff(xs) > 0)


def test_stop_rel_err():
    spec = k5_quadratic()
    ref = solve_reference(spec)
    for backend in ("python", "compiled"):
        tr = run_async_newton(RunConfig(spec, ActivationSchedule.uniform(5, seed=1), 0.17, 5000,
                                        reference=ref, stop_rel_err=1e-2, backend=backend))
        assert tr.rel_err[-1] < 1e-2 and np.all(tr.rel_err[:-1] >= 1e-2)


def test_elapsed_uses_costs():
    spec = k5_quadratic()
    costs = slow_agent_costs(5, 2, 100)
    tr = run_async_newton(RunConfig(spec, ActivationSchedule.uniform(5, seed=3), 0.1, 50,
                                    costs=costs))
    np.testing.assert_allclose(tr.elapsed[1:], np.cumsum(costs[tr.active_agent[1:]]))


# synchronous baseline

def test_sync_K1_matches_dense():
    spec = logistic_problem("ring", 5)
    x0 = np.random.default_rng(2).normal(size=spec.n * spec.dim)
    eps = 0.7
    tr = run_sync_newton(RunConfig(spec, ActivationSchedule.uniform(5), eps, 1, x0=x0), K=1)
    want = x0 - eps * dense_hatH_inverse(spec, x0) @ penalized_gradient(spec, x0)
    assert np.abs(tr.final_state - want).max() <= 1e-12


def test_sync_K0_is_diagonal_scaling():
    spec = k5_quadratic()
    x0 = np.arange(5.0)
    tr = run_sync_newton(RunConfig(spec, ActivationSchedule.uniform(5), 0.5, 1, x0=x0), K=0)
    np.testing.assert_allclose(tr.final_state, x0 - 0.5 * penalized_gradient(spec, x0) / 3.6,
                               atol=1e-15)


def test_sync_large_K_approaches_newton():
    spec = k5_quadratic()
    ref = solve_reference(spec)
    tr = run_sync_newton(RunConfig(spec, ActivationSchedule.uniform(5), 1.0, 1), K=60)
    np.testing.assert_allclose(tr.final_state, ref.x_star, atol=1e-12)


def test_sync_slow_agent_cost():
    spec = k5_quadratic()
    tr = run_sync_newton(RunConfig(spec, ActivationSchedule.uniform(5), 1.0, 4,
                                   costs=slow_agent_costs(5)), K=1)
    assert np.all(np.diff(tr.elapsed) >= 100)


def test_sync_negative_K():
    with pytest.raises(ValueError):
        run_sync_newton(RunConfig(k5_quadratic(), ActivationSchedule.uniform(5), 1.0, 1), K=-1)


def test_jacobi_sweep_equals_sync_iteration():
    spec = logistic_problem("cyclic_k_regular(4)", 7)
    x0 = np.random.default_rng(8).normal(size=spec.n * spec.dim)
    eps = 0.6
    sim = AsyncNewtonSimulator(spec, x0)
    # every agent computes its direction from the same frozen, fresh snapshot
    d = np.concatenate([sim.direction(i) for i in range(spec.n)])
    sched = ActivationSchedule.uniform(spec.n, "uniform_unscaled")
    sweep = x0 + sched.step_sizes(eps)[0] * d
    tr = run_sync_newton(RunConfig(spec, sched, eps, 1, x0=x0), K=1)
    np.testing.assert_allclose(sweep, tr.final_state, atol=1e-13)
    np.testing.assert_allclose(d, distributed_directions(spec, x0), atol=1e-13)


# gossip baseline

def test_gossip_identical_agents_only_gradient_step():
    cm = build_consensus(build_graph("complete", 2))
    spec = make_problem(quadratic_locals([1.0, 1.0], [3.0, 3.0]), cm, 1.0)
    tr = run_gossip(RunConfig(spec, ActivationSchedule.uniform(2), 1.0, 1, x0=np.ones(2)))
    # average of (1, 1) is 1; step 1/1 on 2(x - 3) gives 1 + 4
    np.testing.assert_allclose(tr.final_state, [5.0, 5.0])


def test_gossip_stepsize_is_local_count():
    cm = build_consensus(build_graph("complete", 2))
    spec = make_problem(quadratic_locals([0.25, 0.25], [0.0, 0.0]), cm, 1.0)
    x = np.array([2.0, 2.0])
    tr = run_gossip(RunConfig(spec, ActivationSchedule.uniform(2), 1.0, 3, x0=x))
    # each step multiplies by (1 - 0.5 / k) with k the shared count
    z = 2.0
    for k in (1, 2, 3):
        z *= 1 - 0.5 / k
    np.testing.assert_allclose(tr.final_state, [z, z], rtol=1e-15)


def test_gossip_converges_to_constrained_optimum():
    spec = k5_quadratic()
    ref = solve_constrained_reference(spec)
    assert ref.x_star[0] == pytest.approx(3.0) and ref.F_star == pytest.approx(10.0)
    tr = run_gossip(RunConfig(spec, ActivationSchedule.uniform(5, seed=4), 1.0, 10_000,
                              reference=ref))
    windows = tr.rel_err[1:].reshape(-1, 1000).mean(axis=1)
    assert windows[-1] < windows[0]
    assert tr.rel_err[-1] < 0.05


def test_gossip_reference_differs_from_penalized():
    spec = k5_quadratic()
    assert solve_reference(spec).F_star < solve_constrained_reference(spec).F_star


# exact expectation

def test_expectation_at_optimum_is_tight():
    spec = k5_quadratic()
    ref = solve_reference(spec)
    e = enumerate_one_step_expectation(spec, ActivationSchedule.uniform(5), 0.1, ref.x_star, ref)
    assert e.expected_F == pytest.approx(ref.F_star, abs=1e-13)
    assert e.descent_slack >= -1e-12


def test_expectation_matches_sampling():
    spec = logistic_problem("ring", 5)
    ref = solve_reference(spec)
    x = np.random.default_rng(1).normal(size=spec.n * spec.dim)
    sched = ActivationSchedule([0.1, 0.3, 0.2, 0.25, 0.15])
    e = enumerate_one_step_expectation(spec, sched, 0.05, x, ref)
    vals = []
    for i in range(5):
        sim = AsyncNewtonSimulator(spec, x)
        sim.activate(i, sched.step_sizes(0.05)[i])
        vals.append(sim.objective())
    assert e.expected_F == pytest.approx(float(np.dot(sched.p, vals)), rel=1e-13)


def test_expected_descent_on_trajectory():
    spec = k5_quadratic()
    ref = solve_reference(spec)
    sched = ActivationSchedule.uniform(5, seed=6)
    tc = theory_constants(2, 2, 0, 0.2, 0.2, 1, sched.p)
    tr = run_async_newton(RunConfig(spec, sched, tc.eps, 40, x0=np.full(5, -3.0),
                                    reference=ref))
    for x in tr.snapshots.values():
        e = enumerate_one_step_expectation(spec, sched, tc.eps, x, ref)
        assert e.descent_slack >= -1e-10


# serialization

def test_trace_csv_round_trip(tmp_path):
    spec = k5_quadratic()
    tr = run_async_newton(RunConfig(spec, ActivationSchedule.uniform(5, seed=2), 0.1, 25,
                                    reference=solve_reference(spec)))
    path = tmp_path / "trace.csv"
    tr.write_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    back = Trace.read_csv(path)
    np.testing.assert_array_equal(back.F, tr.F)
    np.testing.assert_array_equal(back.rel_err, tr.rel_err)
    np.testing.assert_array_equal(back.active_agent, tr.active_agent)


def test_gap_requires_reference():
    tr = run_async_newton(RunConfig(k5_quadratic(), ActivationSchedule.uniform(5), 0.1, 3))
    with pytest.raises(ValueError):
        tr.gap
