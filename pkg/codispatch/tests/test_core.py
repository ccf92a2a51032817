import logging

import numpy as np
import pytest

from codispatch.cases import load_transmission
from codispatch.config import SolverConfig
from codispatch.core import (
    CONVERGED,
    NOT_CONVERGED,
    DualState,
    PrimalState,
    Problem,
    build_problem,
    check_stepsize,
    eval_lagrangian,
    grad_dual,
    grad_primal,
    initial_state,
    primal_dual_step,
    project_box,
    solve,
    voltage_constraint,
)
from codispatch.errors import (
    CodispatchException,
    DivergenceError,
    StaleFeedbackError,
)
from codispatch.events import GENERATOR_OUTAGE, ScenarioEvent
from codispatch.powerflow import linear_feedback
from codispatch.tests import (
    build_transmission,
    chain_feeder,
    couple,
    sample_path,
    single_node_feeder,
)

TIGHT = dict(tol_primal=1e-9, tol_dual=1e-9, tol_balance=1e-9)


def _two_feeder_problem():
    ts = build_transmission([1.0, 2.0], demand=0.5, extra_buses=(3,))
    system = couple(ts, [
        chain_feeder('a', 2),
        chain_feeder('b', 3, n=4, der_nodes=(1, 4))])
    return Problem(system)


def _dispatch9():
    return Problem(couple(load_transmission(sample_path('dispatch9.json'))))


def _pack(x, y):
    return np.concatenate([x.p, x.q, x.P_M, [y.lam]] + list(y.mu))


def _unpack(z, like_x, like_y):
    sizes = [len(like_x.p), len(like_x.q), len(like_x.P_M), 1] + \
        [len(m) for m in like_y.mu]
    parts = np.split(z, np.cumsum(sizes)[:-1])
    return (PrimalState(parts[0], parts[1], parts[2]),
            DualState(float(parts[3][0]), tuple(parts[4:])))


@pytest.mark.parametrize('eta', [0.0, 0.3])
def test_gradients_match_finite_differences(eta):
    problem = _two_feeder_problem()
    cfg = SolverConfig(eta=eta)
    rng = np.random.default_rng(11)
    n = problem.system.n_der
    h = 1e-6
    for _ in range(100):
        x = PrimalState(rng.normal(size=n), rng.normal(size=n),
                        rng.normal(size=2))
        y = DualState(float(rng.normal()), tuple(
            rng.uniform(0.0, 1.0, 2 * len(f.nodes))
            for f in problem.system.feeders))

        gp, gq, gm = grad_primal(x, y, problem)
        feedback = linear_feedback(x.p, x.q, problem.system, problem.models, 0)
        glam, gmu = grad_dual(x, y, problem, feedback, cfg)
        analytic = np.concatenate([gp, gq, gm, [glam]] + list(gmu))

        z = _pack(x, y)
        numeric = np.zeros_like(z)
        for i in range(len(z)):
            up = z.copy()
            up[i] += h
            down = z.copy()
            down[i] -= h
            numeric[i] = (
                eval_lagrangian(*_unpack(up, x, y), problem, cfg)
                - eval_lagrangian(*_unpack(down, x, y), problem, cfg)) / (2 * h)

        scale = max(1.0, float(np.max(np.abs(analytic))))
        assert np.max(np.abs(numeric - analytic)) / scale < 1e-6


def test_closed_form_dispatch():
    problem = _dispatch9()
    cfg = SolverConfig(epsilon=0.05, max_iter=100000, **TIGHT)
    x0, y0 = initial_state(problem, 'lower')
    trajectory = solve(problem, cfg, x0=x0, y0=y0)

    assert trajectory.status == CONVERGED
    inverse = 1.0 / np.array([g.cost for g in
                              problem.system.transmission.generators])
    expected = 10.0 * inverse / inverse.sum()
    assert np.max(np.abs(trajectory.x.P_M - expected)) < 1e-6
    assert abs(trajectory.records[-1].slack_residual) < 1e-8
    # equal marginal cost at the price
    assert np.allclose(-2.0 * np.array(
        [g.cost for g in problem.system.transmission.generators]) *
        trajectory.x.P_M, trajectory.y.lam, atol=1e-5)


def _contraction_problem():
    ts = build_transmission([1.0], demand=1.0)
    feeder = single_node_feeder(0.01, 0.0, a_p=0.5, a_q=0.1)
    return Problem(couple(ts, [feeder]))


def test_contraction_towards_saddle_point():
    problem = _contraction_problem()
    eta = 0.1
    bound = check_stepsize(problem, eta)
    cfg = SolverConfig(epsilon=0.9 * bound.eps_bound, eta=eta,
                       max_iter=50000, tol_primal=1e-10, tol_dual=1e-10,
                       tol_balance=1e-10)
    trajectory = solve(problem, cfg, keep_states=True)

    # stationarity in (P, p) and the regularized balance, with q = mu = 0
    K = np.array([[2.0, 0.0, 1.0],
                  [0.0, 1.0, 1.0],
                  [1.0, 1.0, -eta]])
    P, p, lam = np.linalg.solve(K, np.array([0.0, 0.0, 1.0]))
    assert lam == pytest.approx(-0.625)
    assert P == pytest.approx(0.3125)
    assert p == pytest.approx(0.625)

    target = np.array([p, 0.0, P, lam, 0.0, 0.0])
    distances = [float(np.linalg.norm(
        np.concatenate([x.p, x.q, x.P_M, [y.lam]] + list(y.mu)) - target))
        for x, y in trajectory.states]
    steps = np.diff(distances)
    assert np.all(steps <= 1e-12)
    assert distances[-1] < 1e-6


def test_stepsize_warning(caplog):
    problem = _contraction_problem()
    bound = check_stepsize(problem, 0.1)
    with caplog.at_level(logging.WARNING, logger='codispatch.core'):
        check_stepsize(problem, 0.1, 10 * bound.eps_bound)
    assert 'exceeds the convergence bound' in caplog.text


def test_stepsize_single_generator(caplog):
    problem = Problem(couple(build_transmission([1.0])))
    bound = check_stepsize(problem, 0.1)
    K = np.array([[2.0, 1.0], [-1.0, 0.1]])
    assert bound.s == pytest.approx(0.1)
    assert bound.l == pytest.approx(np.linalg.norm(K, 2))
    assert bound.eps_bound == pytest.approx(0.2 / bound.l ** 2)

    with caplog.at_level(logging.WARNING, logger='codispatch.core'):
        check_stepsize(problem, 0.0)
    assert 'advisory' in caplog.text


def test_divergence():
    ts = build_transmission([1.0], p_min=-1e9, p_max=1e9)
    problem = Problem(couple(ts))
    with pytest.raises(DivergenceError) as e:
        solve(problem, SolverConfig(epsilon=5.0, max_iter=1000))
    assert e.value.iteration > 0
    assert 'max_primal' in e.value.diagnostics


def test_stale_feedback():
    problem = _two_feeder_problem()
    x, y = initial_state(problem)
    feedback = linear_feedback(x.p, x.q, problem.system, problem.models, 3)
    with pytest.raises(StaleFeedbackError):
        grad_dual(x, y, problem, feedback, SolverConfig(), iteration=4)
    grad_dual(x, y, problem, feedback, SolverConfig(), iteration=3)


def test_no_lambda_in_der_prices():
    problem = _two_feeder_problem()
    x, y = initial_state(problem, ders='upper')
    shifted = y._replace(lam=y.lam + 5.0)
    gp, gq, gm = grad_primal(x, y, problem, include_lambda=False)
    gp2, gq2, gm2 = grad_primal(x, shifted, problem, include_lambda=False)
    assert np.array_equal(gp, gp2)
    assert np.array_equal(gq, gq2)
    assert np.allclose(gm2 - gm, 5.0)


def test_outage_event():
    problem = _dispatch9()
    cfg = SolverConfig(epsilon=0.05, max_iter=20)
    x0, y0 = initial_state(problem, 'lower')
    events = [ScenarioEvent(5, GENERATOR_OUTAGE, '1')]
    trajectory = solve(problem, cfg, events, x0, y0)

    assert trajectory.records[4].P_M[0] > 0.0
    assert all(r.P_M[0] == 0.0 for r in trajectory.records[5:])
    assert [ph['iteration'] for ph in trajectory.phase_lambdas] == [4, 20]
    assert trajectory.phase_lambdas[0]['lambda'] == trajectory.records[4].lam
    assert not trajectory.system.transmission.generators[0].online


def test_zero_iterations():
    problem = _dispatch9()
    trajectory = solve(problem, SolverConfig(max_iter=0))
    assert len(trajectory.records) == 1
    assert trajectory.status == NOT_CONVERGED
    assert trajectory.iterations == 0
    assert trajectory.records[0].primal_step is None


def test_recorded_slack():
    problem = build_problem(_two_feeder_problem().system,
                            SolverConfig(slack_mode='record'))
    assert not problem.slack.recorded
    trajectory = solve(problem, SolverConfig(max_iter=3))
    assert problem.slack.recorded
    assert trajectory.records[0].slack_residual == pytest.approx(0.0)


def test_random_start():
    problem = _two_feeder_problem()
    a, _ = initial_state(problem, ders='random', seed=3)
    b, _ = initial_state(problem, ders='random', seed=3)
    assert np.array_equal(a.p, b.p)
    assert np.all((a.p >= problem.p_lo) & (a.p <= problem.p_hi))
    assert np.all(a.p[~problem.has_der] == 0.0)


def test_project_box():
    assert project_box(2.0, -1.0, 1.0) == 1.0
    assert project_box(-2.0, -1.0, 1.0) == -1.0
    assert project_box(0.5, -1.0, 1.0) == 0.5
    with pytest.raises(CodispatchException):
        project_box(0.0, 1.0, -1.0)


def test_primal_dual_step():
    ts = build_transmission([1.0], demand=2.0)
    problem = Problem(couple(ts, [single_node_feeder(0.1, 0.3)]))
    x, y = initial_state(problem, 'lower')
    feedback = linear_feedback(x.p, x.q, problem.system, problem.models, 0)
    cfg = SolverConfig(epsilon=0.1)

    x1, y1 = primal_dual_step(x, y, problem, feedback, cfg, iteration=0)
    # generation short by 2, so the price drops
    assert y1.lam == pytest.approx(-0.2)
    assert x1.P_M[0] == 0.0
    # voltages inside the limits, the multipliers stay projected at zero
    assert np.array_equal(y1.mu[0], np.zeros(2))

    feedback = linear_feedback(x1.p, x1.q, problem.system, problem.models, 1)
    x2, _y2 = primal_dual_step(x1, y1, problem, feedback, cfg, iteration=1)
    assert x2.P_M[0] == pytest.approx(0.02)


def _worked_problem():
    ts = build_transmission([1.0], demand=1.0)
    return Problem(couple(ts, [single_node_feeder(0.1, 0.3, load=(0.2, 0.1))]))


def test_eval_lagrangian_worked_example():
    problem = _worked_problem()
    x = PrimalState(np.array([0.5]), np.array([-0.1]), np.array([0.8]))
    y = DualState(-2.0, (np.array([0.5, 0.25]),))
    # costs 0.25 + 0.001 + 0.64; v = 0.95 + 0.05 - 0.03 = 0.97;
    # slack output -0.3 - 0.8 + 1.0 = -0.1 against a setpoint of 0
    expected = 0.891 + (0.5 * -0.08 + 0.25 * -0.02) - 2.0 * 0.1
    assert eval_lagrangian(x, y, problem, SolverConfig()) == \
        pytest.approx(expected)
    regularized = eval_lagrangian(x, y, problem, SolverConfig(eta=0.2))
    assert regularized == pytest.approx(
        expected - 0.1 * (4.0 + 0.25 + 0.0625))


def test_eval_lagrangian_leaves_slack_untouched():
    problem = _worked_problem()
    x, y = initial_state(problem, 'upper', 'upper')
    assert problem.slack.current is None
    eval_lagrangian(x, y, problem, SolverConfig())
    assert problem.slack.current is None

    recorded = build_problem(problem.system, SolverConfig(slack_mode='record'))
    recorded.slack.record(0.3)
    eval_lagrangian(x, y, recorded, SolverConfig())
    assert recorded.slack.current == 0.3


def test_eval_lagrangian_linear_in_mu():
    problem = _two_feeder_problem()
    cfg = SolverConfig()
    rng = np.random.default_rng(5)
    n = problem.system.n_der
    for _ in range(20):
        x = PrimalState(rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, 1.0, n),
                        rng.uniform(0.0, 1.0, 2))
        y = DualState(float(rng.normal()), tuple(
            rng.uniform(0.0, 1.0, 2 * len(f.nodes))
            for f in problem.system.feeders))
        feedback = linear_feedback(x.p, x.q, problem.system, problem.models, 0)
        g = [voltage_constraint(v, problem.system.limits) for v in feedback.v]
        base = eval_lagrangian(x, y, problem, cfg)
        for k, g_k in enumerate(g):
            # raising a multiplier raises L exactly where the limit is violated
            for i in range(len(g_k)):
                mu = list(y.mu)
                mu[k] = mu[k].copy()
                mu[k][i] += 0.5
                moved = eval_lagrangian(x, y._replace(mu=tuple(mu)), problem,
                                        cfg)
                assert moved - base == pytest.approx(0.5 * g_k[i], abs=1e-12)
                assert (moved > base) == (g_k[i] > 0)


def test_multipliers_stay_nonnegative():
    problem = _two_feeder_problem()
    cfg = SolverConfig(epsilon=0.5)
    rng = np.random.default_rng(17)
    n = problem.system.n_der
    for i in range(50):
        x = PrimalState(rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, 1.0, n),
                        rng.uniform(0.0, 1.0, 2))
        # some multipliers start at zero, some small, some large
        y = DualState(float(rng.normal()), tuple(
            rng.choice([0.0, 1e-3, 2.0], size=2 * len(f.nodes))
            for f in problem.system.feeders))
        for step in range(5):
            feedback = linear_feedback(x.p, x.q, problem.system,
                                       problem.models, step)
            x, y = primal_dual_step(x, y, problem, feedback, cfg, step)
            assert all(np.all(mu_k >= 0.0) for mu_k in y.mu)


def test_multipliers_nonnegative_along_run():
    problem = _two_feeder_problem()
    trajectory = solve(problem, SolverConfig(epsilon=0.05, max_iter=300),
                       keep_states=True)
    assert all(np.all(mu_k >= 0.0)
               for _x, y in trajectory.states for mu_k in y.mu)


def _assert_fixed_point(problem, x, y, cfg):
    feedback = linear_feedback(x.p, x.q, problem.system, problem.models, 0)
    x1, y1 = primal_dual_step(x, y, problem, feedback, cfg, 0)
    assert np.max(np.abs(_pack(x1, y1) - _pack(x, y))) < 1e-12


def test_saddle_point_is_fixed_point():
    # regularized interior point of the contraction instance
    problem = _contraction_problem()
    x = PrimalState(np.array([0.625]), np.array([0.0]), np.array([0.3125]))
    y = DualState(-0.625, (np.zeros(2),))
    _assert_fixed_point(problem, x, y, SolverConfig(epsilon=0.1, eta=0.1))


def test_binding_saddle_point_is_fixed_point():
    # 2 P + lam = 0, 2 p + lam + 0.1 mu = 0, 0.2 q + 0.3 mu = 0,
    # 1 + 0.1 p + 0.3 q = 1.05 and P + p = 1.905
    ts = build_transmission([1.0], demand=1.905)
    problem = Problem(couple(ts, [single_node_feeder(0.1, 0.3)]))
    x = PrimalState(np.array([0.95]), np.array([-0.15]), np.array([0.955]))
    y = DualState(-1.91, (np.array([0.1, 0.0]),))
    feedback = linear_feedback(x.p, x.q, problem.system, problem.models, 0)
    assert feedback.v[0][0] == pytest.approx(1.05)
    for eps in (0.01, 0.1, 1.0):
        _assert_fixed_point(problem, x, y, SolverConfig(epsilon=eps))

    # and the engine finds it
    cfg = SolverConfig(epsilon=0.1, max_iter=200000, **TIGHT)
    trajectory = solve(problem, cfg)
    assert trajectory.status == CONVERGED
    assert np.max(np.abs(_pack(trajectory.x, trajectory.y) - _pack(x, y))) \
        < 1e-6


def test_converged_point_is_fixed_point():
    problem = _contraction_problem()
    bound = check_stepsize(problem, 0.1)
    cfg = SolverConfig(epsilon=0.9 * bound.eps_bound, eta=0.1,
                       max_iter=200000, tol_primal=1e-12, tol_dual=1e-12,
                       tol_balance=1e-12)
    trajectory = solve(problem, cfg)
    assert trajectory.status == CONVERGED
    feedback = linear_feedback(trajectory.x.p, trajectory.x.q,
                               problem.system, problem.models, 0)
    x1, y1 = primal_dual_step(trajectory.x, trajectory.y, problem, feedback,
                              cfg, 0)
    moved = np.abs(_pack(x1, y1) - _pack(trajectory.x, trajectory.y))
    assert np.max(moved) < 1e-12


def test_stepsize_single_feeder_by_hand():
    ts = build_transmission([1.0])
    problem = Problem(couple(ts, [single_node_feeder(0.1, 0.3)]))
    bound = check_stepsize(problem, 0.0)
    # x = (p, q, P); rows: balance, upper, lower
    H = np.diag([2.0, 0.2, 2.0])
    G = np.array([[1.0, 0.0, 1.0],
                  [0.1, 0.3, 0.0],
                  [-0.1, -0.3, 0.0]])
    K = np.block([[H, G.T], [-G, np.zeros((3, 3))]])
    assert bound.s == pytest.approx(0.2)
    assert bound.l == pytest.approx(np.linalg.norm(K, 2))
    assert bound.eps_bound == pytest.approx(0.4 / bound.l ** 2)


def test_stepsize_symmetric_feeders():
    ts = build_transmission([1.0, 2.0], extra_buses=(3,))
    a = chain_feeder('a', 2)
    b = chain_feeder('b', 3)
    forward = check_stepsize(Problem(couple(ts, [a, b])), 0.1)
    swapped = check_stepsize(Problem(couple(ts, [b, a])), 0.1)
    assert forward.l == pytest.approx(swapped.l)
    assert forward.eps_bound == pytest.approx(swapped.eps_bound)
    single = check_stepsize(Problem(couple(ts, [a])), 0.1)
    assert single.s == forward.s
    assert single.l <= forward.l
