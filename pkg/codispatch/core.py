"""
Primal-dual saddle-point engine for joint economic dispatch and voltage
regulation.

The regularized Lagrangian over x = (p, q, P_M) and y = (lambda, mu) is

    L = sum of device costs
        + sum_k mu_k . g_k(v_k)
        + lambda * (slack residual)
        - eta / 2 * (lambda**2 + |mu|**2)

where g_k(v) = [v - v_max; v_min - v] and the slack residual is
P0_slack - P_slack(P_M, P_L).  Each iteration is a projected gradient
descent step in x and ascent step in y, both evaluated at the same
(x(t), y(t)) and the power-flow feedback of x(t).
"""
import logging

from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from codispatch.config import SolverConfig, validate_config
from codispatch.costs import CostTable
from codispatch.datatypes import CoupledSystem, VoltageLimits
from codispatch.errors import (
    CodispatchException,
    ConfigurationError,
    DivergenceError,
    StaleFeedbackError,
)
from codispatch.events import (
    ScenarioEvent,
    apply_event,
    events_at,
    last_event_iteration,
)
from codispatch.linmodel import LinearFeederModel, build_models, deepest_leaf
from codispatch.powerflow import (
    Feedback,
    SlackAccount,
    ac_feedback,
    balance_residual,
    linear_feedback,
    slack_output,
    slack_residual,
)

log = logging.getLogger(__name__)

CONVERGED = 'converged'
NOT_CONVERGED = 'not-converged'

GENERATOR_STARTS = ('mid', 'setpoint', 'lower', 'upper')
DER_STARTS = ('zero', 'lower', 'upper', 'random')


class PrimalState(NamedTuple):
    p: np.ndarray
    q: np.ndarray
    P_M: np.ndarray


class DualState(NamedTuple):
    lam: float
    # per feeder: upper-bound multipliers followed by lower-bound ones
    mu: Tuple[np.ndarray, ...]


class StepsizeBound(NamedTuple):
    s: float
    l: float
    eps_bound: float


class TraceRecord(NamedTuple):
    iteration: int
    lam: float
    P_M: Tuple[float, ...]
    P_L: Tuple[float, ...]
    v_min: Tuple[float, ...]
    v_max: Tuple[float, ...]
    slack_residual: float
    total_cost: float
    alpha: Tuple[float, ...]
    beta: Tuple[float, ...]
    primal_step: Optional[float]
    dual_step: Optional[float]


class Trajectory(NamedTuple):
    records: List[TraceRecord]
    states: List[Tuple[PrimalState, DualState]]
    status: str
    iterations: int
    phase_lambdas: List[Dict[str, Any]]
    x: PrimalState
    y: DualState
    system: CoupledSystem
    feedback: Feedback


class Problem(object):
    """
    A coupled system with its linear models and the flat device arrays the
    engine iterates over.  Rebuilt with with_system() when events change
    device limits; the models and the slack account carry over.
    """
    def __init__(self, system: CoupledSystem,
                 models: Optional[Sequence[LinearFeederModel]] = None,
                 slack: Optional[SlackAccount] = None):
        self.system = system
        self.models = tuple(models) if models is not None \
            else build_models(system)
        if len(self.models) != len(system.feeders):
            raise ConfigurationError(
                '%d linear models for %d feeders' % (
                    len(self.models), len(system.feeders)))
        self.slack = slack if slack is not None else SlackAccount.fixed(
            system.transmission.slack_setpoint)

        n = system.n_der
        self.a_p = np.ones(n)
        self.a_q = np.ones(n)
        self.p_lo = np.zeros(n)
        self.p_hi = np.zeros(n)
        self.q_lo = np.zeros(n)
        self.q_hi = np.zeros(n)
        self.has_der = np.zeros(n, dtype=bool)
        names = ['quadratic'] * n
        labels = []
        for position in range(n):
            k, i = system.locate(position)
            f = system.feeders[k]
            labels.append('node "%s" of feeder "%s"' % (
                f.nodes[i].node_id, f.feeder_id))
        for k, f in enumerate(system.feeders):
            index = f.node_index()
            for d in f.ders:
                i = system.global_index(k, index[d.node_id])
                self.a_p[i] = d.a_p
                self.a_q[i] = d.a_q
                self.p_lo[i], self.p_hi[i], self.q_lo[i], self.q_hi[i] = d.box()
                self.has_der[i] = True
                names[i] = d.cost_model
        self.der_p = CostTable(names, self.a_p, labels)
        self.der_q = CostTable(names, self.a_q, labels)

        gens = system.transmission.generators
        self.gen_lo = np.array([g.box()[0] for g in gens], dtype=float)
        self.gen_hi = np.array([g.box()[1] for g in gens], dtype=float)
        self.gen = CostTable(
            [g.cost_model for g in gens],
            np.array([g.cost for g in gens], dtype=float),
            ['generator "%s"' % g.gen_id for g in gens])

    def with_system(self, system: CoupledSystem) -> 'Problem':
        return Problem(system, self.models, self.slack)


def build_problem(system: CoupledSystem, cfg: SolverConfig = SolverConfig(),
                  models: Optional[Sequence[LinearFeederModel]] = None) -> Problem:
    if cfg.slack_mode == 'record':
        slack = SlackAccount()
    else:
        slack = SlackAccount.fixed(system.transmission.slack_setpoint)
    return Problem(system, models, slack)


def project_box(value: float, lo: float, hi: float) -> float:
    if lo > hi:
        raise CodispatchException('empty box [%r, %r]' % (lo, hi))
    return min(max(value, lo), hi)


def project_primal(x: PrimalState, problem: Problem) -> PrimalState:
    return PrimalState(
        np.clip(x.p, problem.p_lo, problem.p_hi),
        np.clip(x.q, problem.q_lo, problem.q_hi),
        np.clip(x.P_M, problem.gen_lo, problem.gen_hi))


def voltage_constraint(v: np.ndarray, limits: VoltageLimits) -> np.ndarray:
    return np.concatenate([v - limits.v_max, limits.v_min - v])


def feeder_prices(model: LinearFeederModel, lam: float,
                  mu_k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Incentive prices (alpha, beta) per node of one feeder
    """
    n = len(model.c)
    net = mu_k[:n] - mu_k[n:]
    return -lam * model.M + model.A.T @ net, -lam * model.N + model.B.T @ net


def incentive_prices(models: Sequence[LinearFeederModel], y: DualState,
                     include_lambda: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    lam = y.lam if include_lambda else 0.0
    alphas = []
    betas = []
    for model, mu_k in zip(models, y.mu):
        alpha, beta = feeder_prices(model, lam, mu_k)
        alphas.append(alpha)
        betas.append(beta)
    if not alphas:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(alphas), np.concatenate(betas)


def total_cost(x: PrimalState, problem: Problem) -> float:
    return (problem.der_p.value(x.p) + problem.der_q.value(x.q)
            + problem.gen.value(x.P_M))


def evaluate_feedback(x: PrimalState, problem: Problem, cfg: SolverConfig,
                      tag: int) -> Feedback:
    if cfg.feedback == 'ac':
        return ac_feedback(x.p, x.q, problem.system, tag,
                           cfg.sweep_tol, cfg.sweep_max_iter)
    return linear_feedback(x.p, x.q, problem.system, problem.models, tag)


def eval_lagrangian(x: PrimalState, y: DualState, problem: Problem,
                    cfg: SolverConfig) -> float:
    """
    Regularized Lagrangian with voltages and substation draws from the
    linear models
    """
    system = problem.system
    fb = linear_feedback(x.p, x.q, system, problem.models, -1)
    value = total_cost(x, problem)
    mu_sq = 0.0
    for v, mu_k in zip(fb.v, y.mu):
        value += float(mu_k @ voltage_constraint(v, system.limits))
        mu_sq += float(mu_k @ mu_k)
    value += y.lam * balance_residual(problem.slack.p0, system.transmission,
                                      x.P_M, fb.P_L)
    return value - 0.5 * cfg.eta * (y.lam * y.lam + mu_sq)


def grad_primal(x: PrimalState, y: DualState, problem: Problem,
                include_lambda: bool = True) -> Tuple[
                    np.ndarray, np.ndarray, np.ndarray]:
    """
    dL/dp, dL/dq and dL/dP_M.

    :param include_lambda: False drops lambda from the DER terms only, the
        no-participation baseline
    """
    alpha, beta = incentive_prices(problem.models, y, include_lambda)
    return (problem.der_p.gradient(x.p) + alpha,
            problem.der_q.gradient(x.q) + beta,
            problem.gen.gradient(x.P_M) + y.lam)


def dual_gradients(y: DualState, feedback: Feedback, residual: float,
                   limits: VoltageLimits, eta: float) -> Tuple[
                       float, Tuple[np.ndarray, ...]]:
    glam = residual - eta * y.lam
    gmu = tuple(voltage_constraint(v, limits) - eta * mu_k
                for v, mu_k in zip(feedback.v, y.mu))
    return glam, gmu


def grad_dual(x: PrimalState, y: DualState, problem: Problem,
              feedback: Feedback, cfg: SolverConfig,
              iteration: Optional[int] = None) -> Tuple[
                  float, Tuple[np.ndarray, ...]]:
    """
    dL/dlambda and dL/dmu, with voltages and substation draws taken from
    the feedback snapshot of x

    Raises StaleFeedbackError when the snapshot belongs to another
    iteration.
    """
    if iteration is not None and feedback.tag != iteration:
        raise StaleFeedbackError(
            'feedback tagged %d used at iteration %d' % (
                feedback.tag, iteration))
    residual = slack_residual(problem.slack, problem.system.transmission,
                              x.P_M, feedback.P_L)
    return dual_gradients(y, feedback, residual, problem.system.limits,
                          cfg.eta)


def ascend_dual(y: DualState, glam: float, gmu: Sequence[np.ndarray],
                epsilon: float) -> DualState:
    # lambda is a free price, mu stays in the nonnegative orthant
    return DualState(
        y.lam + epsilon * glam,
        tuple(np.maximum(mu_k + epsilon * g, 0.0)
              for mu_k, g in zip(y.mu, gmu)))


def primal_dual_step(x: PrimalState, y: DualState, problem: Problem,
                     feedback: Feedback, cfg: SolverConfig,
                     iteration: Optional[int] = None) -> Tuple[
                         PrimalState, DualState]:
    gp, gq, gm = grad_primal(x, y, problem, cfg.der_price_participation)
    glam, gmu = grad_dual(x, y, problem, feedback, cfg, iteration)
    eps = cfg.epsilon
    x_new = PrimalState(
        np.clip(x.p - eps * gp, problem.p_lo, problem.p_hi),
        np.clip(x.q - eps * gq, problem.q_lo, problem.q_hi),
        np.clip(x.P_M - eps * gm, problem.gen_lo, problem.gen_hi))
    return x_new, ascend_dual(y, glam, gmu, eps)


def check_stepsize(problem: Problem, eta: float,
                   epsilon: Optional[float] = None) -> StepsizeBound:
    """
    Stepsize bound 2 s / l**2 under which the iteration contracts.

    s is the smallest strong-convexity modulus among real devices (and eta
    when eta > 0); l is the spectral norm of the Jacobian

        K = [[H,  G^T],
             [-G, eta I]]

    of the saddle operator, H holding cost curvatures and G the
    constraint sensitivities in x.  With eta == 0 the dual block is not
    strongly monotone and the bound is only advisory.

    Raises CostModelError when a registered cost lacks a modulus or
    curvature.
    """
    system = problem.system
    n = system.n_der
    n_gen = len(system.transmission.generators)
    n_mu = 2 * n
    n_x = 2 * n + n_gen

    moduli = np.concatenate([
        problem.der_p.moduli()[problem.has_der],
        problem.der_q.moduli()[problem.has_der],
        problem.gen.moduli()])
    H = np.concatenate([problem.der_p.curvatures(),
                        problem.der_q.curvatures(),
                        problem.gen.curvatures()])

    G = np.zeros((1 + n_mu, n_x))
    row = 1
    for offset, model in zip(system.offsets(), problem.models):
        nk = len(model.c)
        cols_p = slice(offset, offset + nk)
        cols_q = slice(n + offset, n + offset + nk)
        G[0, cols_p] = -model.M
        G[0, cols_q] = -model.N
        G[row:row + nk, cols_p] = model.A
        G[row:row + nk, cols_q] = model.B
        G[row + nk:row + 2 * nk, cols_p] = -model.A
        G[row + nk:row + 2 * nk, cols_q] = -model.B
        row += 2 * nk
    G[0, 2 * n:] = 1.0

    K = np.block([[np.diag(H), G.T], [-G, eta * np.eye(1 + n_mu)]])
    lip = float(np.linalg.norm(K, 2))
    s = float(np.min(moduli)) if len(moduli) else np.inf
    if eta > 0:
        s = min(s, eta)
    else:
        log.warning('eta = 0: the stepsize bound is advisory only')
    bound = 2.0 * s / (lip * lip) if np.isfinite(s) and lip > 0 else np.inf
    if epsilon is not None and epsilon > bound:
        log.warning('stepsize %g exceeds the convergence bound %g',
                    epsilon, bound)
    return StepsizeBound(s, lip, bound)


def initial_state(problem: Problem, generators: str = 'mid', ders: str = 'zero',
                  seed: Optional[int] = None) -> Tuple[PrimalState, DualState]:
    """
    Starting point, projected into the device boxes, with zero multipliers
    """
    if generators == 'mid':
        P_M = 0.5 * (problem.gen_lo + problem.gen_hi)
    elif generators == 'setpoint':
        P_M = np.array([g.setpoint_initial
                        for g in problem.system.transmission.generators],
                       dtype=float)
    elif generators == 'lower':
        P_M = problem.gen_lo.copy()
    elif generators == 'upper':
        P_M = problem.gen_hi.copy()
    else:
        raise ConfigurationError(
            'unknown generator start "%s"' % generators)

    if ders == 'zero':
        p = np.zeros(len(problem.p_lo))
        q = np.zeros(len(problem.q_lo))
    elif ders == 'lower':
        p, q = problem.p_lo.copy(), problem.q_lo.copy()
    elif ders == 'upper':
        p, q = problem.p_hi.copy(), problem.q_hi.copy()
    elif ders == 'random':
        rng = np.random.default_rng(seed)
        p = rng.uniform(problem.p_lo, problem.p_hi)
        q = rng.uniform(problem.q_lo, problem.q_hi)
    else:
        raise ConfigurationError('unknown DER start "%s"' % ders)

    x0 = project_primal(PrimalState(p, q, P_M), problem)
    y0 = DualState(0.0, tuple(np.zeros(2 * len(f.nodes))
                              for f in problem.system.feeders))
    return x0, y0


def default_probes(system: CoupledSystem) -> Tuple[int, ...]:
    return tuple(f.node_index()[deepest_leaf(f)] for f in system.feeders)


def record_slack(problem: Problem, x: PrimalState, feedback: Feedback):
    if not problem.slack.recorded:
        problem.slack.record(
            slack_output(problem.system.transmission, x.P_M, feedback.P_L))


def apply_events(problem: Problem, x: PrimalState,
                 events: Sequence[ScenarioEvent],
                 iteration: int) -> Tuple[Problem, PrimalState]:
    due = events_at(events, iteration)
    if not due:
        return problem, x
    system = problem.system
    for event in due:
        system = apply_event(system, event)
    problem = problem.with_system(system)
    return problem, project_primal(x, problem)


def _inf_norm(arrays: Sequence[np.ndarray]) -> float:
    arrays = [a for a in arrays if len(a)]
    if not arrays:
        return 0.0
    return float(max(np.max(np.abs(a)) for a in arrays))


def make_record(iteration: int, x: PrimalState, y: DualState,
                feedback: Feedback, problem: Problem, cfg: SolverConfig,
                probes: Sequence[int],
                previous: Optional[Tuple[PrimalState, DualState]]) -> TraceRecord:
    residual = slack_residual(problem.slack, problem.system.transmission,
                              x.P_M, feedback.P_L)
    lam = y.lam if cfg.der_price_participation else 0.0
    alpha = []
    beta = []
    for model, mu_k, probe in zip(problem.models, y.mu, probes):
        a, b = feeder_prices(model, lam, mu_k)
        alpha.append(float(a[probe]))
        beta.append(float(b[probe]))
    primal_step = dual_step = None
    if previous is not None:
        xp, yp = previous
        primal_step = _inf_norm([x.p - xp.p, x.q - xp.q, x.P_M - xp.P_M])
        dual_step = _inf_norm([np.array([y.lam - yp.lam])] +
                              [m - mp for m, mp in zip(y.mu, yp.mu)])
    return TraceRecord(
        iteration=iteration,
        lam=float(y.lam),
        P_M=tuple(float(v) for v in x.P_M),
        P_L=tuple(float(v) for v in feedback.P_L),
        v_min=tuple(float(np.min(v)) for v in feedback.v),
        v_max=tuple(float(np.max(v)) for v in feedback.v),
        slack_residual=residual,
        total_cost=total_cost(x, problem),
        alpha=tuple(alpha),
        beta=tuple(beta),
        primal_step=primal_step,
        dual_step=dual_step,
    )


def is_converged(record: TraceRecord, cfg: SolverConfig) -> bool:
    if record.primal_step is None or record.dual_step is None:
        return False
    return (record.primal_step / cfg.epsilon < cfg.tol_primal
            and record.dual_step / cfg.epsilon < cfg.tol_dual
            and abs(record.slack_residual) < cfg.tol_balance)


def check_divergence(x: PrimalState, y: DualState, cfg: SolverConfig,
                     iteration: int):
    primal = _inf_norm([x.p, x.q, x.P_M])
    mu = _inf_norm(list(y.mu))
    values = [primal, abs(y.lam), mu]
    if not all(np.isfinite(values)) or max(values) > cfg.blowup:
        raise DivergenceError(
            'iteration %d: state left the blow-up bound %g '
            '(|x| = %.3g, |lambda| = %.3g, |mu| = %.3g)' % (
                iteration, cfg.blowup, primal, abs(y.lam), mu),
            iteration,
            {'max_primal': primal, 'lambda': float(y.lam), 'max_mu': mu})


def solve(problem: Problem, cfg: SolverConfig,
          events: Sequence[ScenarioEvent] = (),
          x0: Optional[PrimalState] = None,
          y0: Optional[DualState] = None,
          probes: Optional[Sequence[int]] = None,
          keep_states: bool = False) -> Trajectory:
    """
    Iterate the primal-dual step until the convergence tolerances are met
    (checked only once the last event has been applied) or max_iter steps
    have run.

    :param problem: system, models and slack account
    :param cfg: solver settings
    :param events: scheduled perturbations, applied to x(k) before it is
        recorded
    :param x0: starting primal state, mid-box generators and zero DERs
        by default
    :param y0: starting multipliers, zero by default
    :param probes: local node index per feeder whose prices are traced
    :param keep_states: keep every (x, y) in the trajectory

    :return: Trajectory with one record per iterate, initial state included
    """
    cfg = validate_config(cfg)
    events = sorted(events, key=lambda e: e.iteration)
    if x0 is None or y0 is None:
        start = initial_state(problem)
        x0 = start[0] if x0 is None else x0
        y0 = start[1] if y0 is None else y0
    if probes is None:
        probes = default_probes(problem.system)
    log.info('core engine: %d generators, %d DER slots, %s feedback, '
             'epsilon %g, eta %g', len(problem.gen), len(problem.p_lo),
             cfg.feedback, cfg.epsilon, cfg.eta)

    k = 0
    x, y = x0, y0
    phases = []
    try:
        problem, x = apply_events(problem, project_primal(x, problem),
                                  events, 0)
        feedback = evaluate_feedback(x, problem, cfg, 0)
        record_slack(problem, x, feedback)
        check_stepsize(problem, cfg.eta, cfg.epsilon)
        records = [make_record(0, x, y, feedback, problem, cfg, probes, None)]
        states = [(x, y)] if keep_states else []
        status = NOT_CONVERGED
        last_event = last_event_iteration(events)

        for k in range(1, cfg.max_iter + 1):
            x_new, y_new = primal_dual_step(x, y, problem, feedback, cfg, k - 1)
            check_divergence(x_new, y_new, cfg, k)
            if events_at(events, k):
                phases.append({'iteration': k - 1, 'lambda': float(y.lam)})
                problem, x_new = apply_events(problem, x_new, events, k)
            feedback = evaluate_feedback(x_new, problem, cfg, k)
            record = make_record(k, x_new, y_new, feedback, problem, cfg,
                                 probes, (x, y))
            records.append(record)
            if keep_states:
                states.append((x_new, y_new))
            x, y = x_new, y_new
            if k >= last_event and is_converged(record, cfg):
                status = CONVERGED
                break
    except CodispatchException as e:
        if e.iteration is None:
            e.iteration = k
        raise

    phases.append({'iteration': records[-1].iteration, 'lambda': float(y.lam)})
    log.info('core engine: %s after %d iterations, lambda %.6g',
             status, records[-1].iteration, y.lam)
    return Trajectory(
        records=records,
        states=states,
        status=status,
        iterations=records[-1].iteration,
        phase_lambdas=phases,
        x=x,
        y=y,
        system=problem.system,
        feedback=feedback,
    )
