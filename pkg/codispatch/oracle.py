"""
Brute-force reference solver for small instances.

The generator listed last among the online ones is eliminated through
the power balance and the reactive setpoint of the last DER is minimized
exactly over its feasible interval; every other decision variable is
searched on a nested grid that is refined around the best point.
Feasibility is checked against the same linear feeder models the engine
uses.
"""
import itertools
import logging

from typing import Any, Dict, List, NamedTuple, Tuple

import numpy as np

from codispatch.core import PrimalState, Problem, solve, total_cost
from codispatch.errors import (
    ConfigurationError,
    CostModelError,
    InfeasibleInstanceError,
)
from codispatch.powerflow import balance_residual, linear_feedback
from codispatch.scenario import Scenario, prepare

log = logging.getLogger(__name__)

MAX_VARIABLES = 4
GRID_POINTS = 41
RESOLUTION = 1e-4


class OracleResult(NamedTuple):
    x: PrimalState
    objective: float
    refinements: int
    evaluated: int


class _Layout(NamedTuple):
    # (kind, index) for each grid variable, kind one of 'p', 'q', 'P'
    free: List[Tuple[str, int]]
    lo: np.ndarray
    hi: np.ndarray
    # DER position whose q is solved exactly, or -1
    exact_q: int
    # generator eliminated by the balance
    last_gen: int


def _layout(problem: Problem) -> _Layout:
    for table in (problem.der_p, problem.der_q, problem.gen):
        for name, label in zip(table.names, table.labels):
            if name != 'quadratic':
                raise CostModelError(
                    'the brute-force oracle needs quadratic costs, %s uses '
                    '"%s"' % (label, name))
    ders = [int(i) for i in np.flatnonzero(problem.has_der)]
    online = [i for i, g in enumerate(problem.system.transmission.generators)
              if g.online]
    if not online:
        raise ConfigurationError('the oracle needs an online generator')
    n_vars = 2 * len(ders) + len(online)
    if n_vars > MAX_VARIABLES:
        raise ConfigurationError(
            'instance has %d decision variables, the oracle handles at most %d'
            % (n_vars, MAX_VARIABLES))

    free = [('p', i) for i in ders] + [('q', i) for i in ders[:-1]] + \
        [('P', i) for i in online[:-1]]
    bounds = {
        'p': (problem.p_lo, problem.p_hi),
        'q': (problem.q_lo, problem.q_hi),
        'P': (problem.gen_lo, problem.gen_hi),
    }
    lo = np.array([bounds[kind][0][i] for kind, i in free], dtype=float)
    hi = np.array([bounds[kind][1][i] for kind, i in free], dtype=float)
    return _Layout(free, lo, hi, ders[-1] if ders else -1, online[-1])


def _evaluate(problem: Problem, layout: _Layout, p0: float,
              Z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Objective (inf where infeasible) and exact q of the last DER for each
    row of Z.
    """
    system = problem.system
    limits = system.limits
    n_pts = Z.shape[0]
    p = np.zeros((n_pts, len(problem.p_lo)))
    q = np.zeros((n_pts, len(problem.q_lo)))
    P_M = np.zeros((n_pts, len(problem.gen_lo)))
    target = {'p': p, 'q': q, 'P': P_M}
    for col, (kind, i) in enumerate(layout.free):
        target[kind][:, i] = Z[:, col]

    # balance: sum P_M = sum P_L - sum P0 - P0_slack
    base = -system.transmission.total_injection() - p0 - P_M.sum(axis=1)
    t_lo = np.full(n_pts, -np.inf)
    t_hi = np.full(n_pts, np.inf)
    feasible = np.ones(n_pts, dtype=bool)
    n_coef = 0.0
    exact = layout.exact_q
    for k, (offset, model) in enumerate(zip(system.offsets(), problem.models)):
        nk = len(model.c)
        pk = p[:, offset:offset + nk]
        qk = q[:, offset:offset + nk]
        base = base + pk @ model.M + qk @ model.N + model.d
        v = pk @ model.A.T + qk @ model.B.T + model.c
        if offset <= exact < offset + nk:
            j = exact - offset
            n_coef = model.N[j]
            b = model.B[:, j]
            for row in range(nk):
                if b[row] > 0:
                    t_lo = np.maximum(t_lo, (limits.v_min - v[:, row]) / b[row])
                    t_hi = np.minimum(t_hi, (limits.v_max - v[:, row]) / b[row])
                elif b[row] < 0:
                    t_lo = np.maximum(t_lo, (limits.v_max - v[:, row]) / b[row])
                    t_hi = np.minimum(t_hi, (limits.v_min - v[:, row]) / b[row])
                else:
                    feasible &= (v[:, row] >= limits.v_min) & \
                        (v[:, row] <= limits.v_max)
        else:
            feasible &= np.all((v >= limits.v_min) & (v <= limits.v_max), axis=1)

    g = layout.last_gen
    c = problem.gen.coefficients[g]
    g_lo = problem.gen_lo[g]
    g_hi = problem.gen_hi[g]
    if exact >= 0:
        a_q = problem.a_q[exact]
        t_lo = np.maximum(t_lo, problem.q_lo[exact])
        t_hi = np.minimum(t_hi, problem.q_hi[exact])
        # P_last = base + n_coef t must stay in the generator box
        if n_coef > 0:
            t_lo = np.maximum(t_lo, (g_lo - base) / n_coef)
            t_hi = np.minimum(t_hi, (g_hi - base) / n_coef)
        elif n_coef < 0:
            t_lo = np.maximum(t_lo, (g_hi - base) / n_coef)
            t_hi = np.minimum(t_hi, (g_lo - base) / n_coef)
        else:
            feasible &= (base >= g_lo) & (base <= g_hi)
        feasible &= t_lo <= t_hi
        t = np.clip(-c * n_coef * base / (a_q + c * n_coef * n_coef),
                    t_lo, t_hi)
        t = np.where(feasible, t, 0.0)
        q[:, exact] = t
    else:
        t = np.zeros(n_pts)
        feasible &= (base >= g_lo) & (base <= g_hi)
    P_M[:, g] = base + n_coef * t

    objective = (p * p) @ problem.a_p + (q * q) @ problem.a_q + \
        (P_M * P_M) @ problem.gen.coefficients
    return np.where(feasible, objective, np.inf), t


def brute_force(problem: Problem, grid_points: int = GRID_POINTS,
                resolution: float = RESOLUTION) -> OracleResult:
    """
    Minimize total cost subject to device limits, the power balance at the
    problem's slack setpoint and the linear voltage limits.

    Raises ConfigurationError for instances with more than four decision
    variables, CostModelError for non-quadratic costs and
    InfeasibleInstanceError when no grid point is feasible.
    """
    layout = _layout(problem)
    p0 = problem.slack.p0
    m = len(layout.free)
    width = 2 if m == 1 else 3
    lo = layout.lo.copy()
    hi = layout.hi.copy()
    best_z = None
    best_t = 0.0
    best_obj = np.inf
    refinements = 0
    evaluated = 0
    while True:
        axes = [np.linspace(lo[i], hi[i], grid_points) for i in range(m)]
        if m:
            Z = np.array(list(itertools.product(*axes)))
        else:
            Z = np.zeros((1, 0))
        obj, t = _evaluate(problem, layout, p0, Z)
        evaluated += len(Z)
        i = int(np.argmin(obj))
        if np.isfinite(obj[i]) and obj[i] <= best_obj:
            best_z, best_t, best_obj = Z[i], float(t[i]), float(obj[i])
        if best_z is None:
            raise InfeasibleInstanceError(
                'no point of the %d-point grid satisfies the limits' % len(Z))
        cell = (hi - lo) / (grid_points - 1)
        if m == 0 or np.max(cell) < resolution:
            break
        lo = np.maximum(layout.lo, best_z - width * cell)
        hi = np.minimum(layout.hi, best_z + width * cell)
        refinements += 1

    p = np.zeros(len(problem.p_lo))
    q = np.zeros(len(problem.q_lo))
    P_M = np.zeros(len(problem.gen_lo))
    target = {'p': p, 'q': q, 'P': P_M}
    for col, (kind, i) in enumerate(layout.free):
        target[kind][i] = best_z[col]
    if layout.exact_q >= 0:
        q[layout.exact_q] = best_t
    fb = linear_feedback(p, q, problem.system, problem.models, -1)
    P_M[layout.last_gen] = float(np.sum(fb.P_L)) - \
        problem.system.transmission.total_injection() - p0 - float(np.sum(P_M))
    x = PrimalState(p, q, P_M)
    log.info('oracle: objective %.8g after %d refinements (%d points)',
             best_obj, refinements, evaluated)
    return OracleResult(x, total_cost(x, problem), refinements, evaluated)


def max_violation(x: PrimalState, problem: Problem) -> float:
    """
    Largest violation of the device limits, the linear voltage limits and
    the power balance
    """
    limits = problem.system.limits
    parts = [
        np.maximum(problem.p_lo - x.p, 0.0), np.maximum(x.p - problem.p_hi, 0.0),
        np.maximum(problem.q_lo - x.q, 0.0), np.maximum(x.q - problem.q_hi, 0.0),
        np.maximum(problem.gen_lo - x.P_M, 0.0),
        np.maximum(x.P_M - problem.gen_hi, 0.0),
    ]
    fb = linear_feedback(x.p, x.q, problem.system, problem.models, -1)
    for v in fb.v:
        parts.append(np.maximum(v - limits.v_max, 0.0))
        parts.append(np.maximum(limits.v_min - v, 0.0))
    residual = abs(balance_residual(
        problem.slack.p0, problem.system.transmission, x.P_M, fb.P_L))
    worst = max([float(np.max(a)) for a in parts if len(a)], default=0.0)
    return max(worst, residual)


def gap_report(problem: Problem, engine_x: PrimalState,
               oracle: OracleResult) -> Dict[str, Any]:
    engine_obj = total_cost(engine_x, problem)
    gap = abs(engine_obj - oracle.objective)
    diffs = np.concatenate([engine_x.p - oracle.x.p, engine_x.q - oracle.x.q,
                            engine_x.P_M - oracle.x.P_M])
    return {
        'engine_objective': engine_obj,
        'oracle_objective': oracle.objective,
        'absolute_gap': gap,
        'relative_gap': gap / max(abs(oracle.objective), 1e-12),
        'max_coordinate_difference': float(np.max(np.abs(diffs)))
        if len(diffs) else 0.0,
        'engine_violation': max_violation(engine_x, problem),
        'oracle_refinements': oracle.refinements,
        'oracle_points': oracle.evaluated,
    }


def probe_oracle(scenario: Scenario) -> Dict[str, Any]:
    """
    Run a small scenario with the core engine and compare its final point
    with the brute-force optimum.
    """
    problem, x0, y0, probes = prepare(scenario)
    trajectory = solve(problem, scenario.solver, scenario.events, x0, y0,
                       probes)
    final = problem.with_system(trajectory.system)
    oracle = brute_force(final)
    report = gap_report(final, trajectory.x, oracle)
    report['engine_status'] = trajectory.status
    report['engine_iterations'] = trajectory.iterations
    return report
