import numpy as np
import pytest

from codispatch.config import SolverConfig
from codispatch.core import Problem, solve
from codispatch.costs import cost_models, get_cost_model, register_cost_model
from codispatch.errors import (
    ConfigurationError,
    CostModelError,
    InfeasibleInstanceError,
)
from codispatch.oracle import brute_force, gap_report, max_violation, probe_oracle
from codispatch.scenario import load_scenario, prepare
from codispatch.tests import build_transmission, couple, single_node_feeder

ENGINE = SolverConfig(epsilon=0.1, max_iter=100000, tol_primal=1e-9,
                      tol_dual=1e-9, tol_balance=1e-9)


def _random_instance(seed, n_gen):
    rng = np.random.default_rng(seed)
    ts = build_transmission(rng.uniform(0.5, 2.0, n_gen),
                            demand=float(rng.uniform(0.5, 2.0)))
    feeder = single_node_feeder(
        float(rng.uniform(0.05, 0.15)), float(rng.uniform(0.2, 0.4)),
        a_p=float(rng.uniform(0.2, 1.0)), a_q=float(rng.uniform(0.05, 0.2)))
    return Problem(couple(ts, [feeder]))


def test_analytic_instance():
    problem, x0, y0, _probes = prepare(load_scenario('codispatch:cases/oracle.json'))
    result = brute_force(problem)
    # the upper voltage limit binds: 1 + 0.1 p + 0.3 q = 1.05
    assert result.x.p[0] == pytest.approx(0.9963235, abs=1e-3)
    assert result.x.q[0] == pytest.approx(-0.165441, abs=1e-3)
    assert result.x.P_M[0] == pytest.approx(0.5036765, abs=1e-3)
    assert result.objective == pytest.approx(0.752757, abs=1e-5)
    assert 1.0 + 0.1 * result.x.p[0] + 0.3 * result.x.q[0] == \
        pytest.approx(1.05, abs=1e-9)
    assert result.refinements > 0

    trajectory = solve(problem, ENGINE, x0=x0, y0=y0)
    assert trajectory.y.lam == pytest.approx(-1.00735, abs=1e-4)
    assert trajectory.y.mu[0][0] == pytest.approx(0.110294, abs=1e-4)


def test_unconstrained_instance():
    ts = build_transmission([1.0], demand=1.0)
    problem = Problem(couple(ts, [single_node_feeder(0.01, 0.01, a_p=1.0)]))
    result = brute_force(problem)
    # equal marginal costs split the load evenly
    assert result.x.p[0] == pytest.approx(0.5, abs=1e-4)
    assert result.x.P_M[0] == pytest.approx(0.5, abs=1e-4)
    assert result.x.q[0] == pytest.approx(0.0, abs=1e-9)
    assert max_violation(result.x, problem) < 1e-9


@pytest.mark.parametrize('n_gen', [1, 2])
@pytest.mark.parametrize('seed', range(10))
def test_engine_matches_oracle(seed, n_gen):
    problem = _random_instance(100 * n_gen + seed, n_gen)
    trajectory = solve(problem, ENGINE)
    report = gap_report(problem, trajectory.x, brute_force(problem))
    assert trajectory.status == 'converged'
    assert report['relative_gap'] < 1e-3
    assert report['engine_violation'] < 1e-6


def test_generators_only():
    problem = Problem(couple(build_transmission([1.0, 3.0], demand=2.0)))
    result = brute_force(problem)
    assert result.x.P_M == pytest.approx([1.5, 0.5], abs=1e-4)


def test_too_many_variables():
    ts = build_transmission([1.0, 1.0, 1.0], demand=1.0)
    problem = Problem(couple(ts, [single_node_feeder(0.1, 0.3)]))
    with pytest.raises(ConfigurationError) as e:
        brute_force(problem)
    assert 'at most 4' in str(e.value)


def test_infeasible():
    ts = build_transmission([1.0], demand=0.0)
    feeder = single_node_feeder(0.1, 0.3, p_box=(0.0, 0.1),
                                q_box=(-0.05, 0.05), load=(1.0, 0.0))
    problem = Problem(couple(ts, [feeder]))
    with pytest.raises(InfeasibleInstanceError):
        brute_force(problem)


def test_non_quadratic_cost():
    register_cost_model('quadratic-copy', get_cost_model('quadratic'))
    try:
        ts = build_transmission([1.0], demand=1.0)
        gens = (ts.generators[0]._replace(cost_model='quadratic-copy'),)
        problem = Problem(couple(ts._replace(generators=gens)))
        with pytest.raises(CostModelError) as e:
            brute_force(problem)
        assert 'generator "G1"' in str(e.value)
    finally:
        del cost_models['quadratic-copy']


def test_probe_oracle():
    report = probe_oracle(load_scenario('codispatch:cases/oracle.json'))
    assert report['engine_status'] == 'converged'
    assert report['relative_gap'] < 1e-3
    assert report['engine_violation'] < 1e-6
