"""
Market-based distributed protocol: an operator, generator agents and DER
user agents exchanging setpoints and incentive prices over an in-process
message bus.

One synchronous round k:

  1. scheduled events for k reach the agents
  2. every agent reports its setpoint (tag k)
  3. the operator runs power flow on the reports and posts one result per
     feeder (tag k)
  4. agents step on the broadcast of tag k
  5. the operator updates the multipliers from the tag k power flow,
     posts a dual update (tag k) and the broadcast for tag k + 1

Agents only ever see their own cost data and the prices addressed to
them; the operator only sees network data and the reported setpoints.
"""
import json
import logging

from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from codispatch.config import SolverConfig, validate_config
from codispatch.core import (
    CONVERGED,
    NOT_CONVERGED,
    DualState,
    PrimalState,
    Problem,
    Trajectory,
    ascend_dual,
    check_divergence,
    default_probes,
    dual_gradients,
    feeder_prices,
    initial_state,
    is_converged,
    make_record,
    project_box,
    project_primal,
)
from codispatch.costs import get_cost_model
from codispatch.datatypes import (
    CoupledSystem,
    Der,
    Generator,
    TransmissionSystem,
    VoltageLimits,
)
from codispatch.errors import (
    BusDeliveryError,
    CodispatchException,
    ConfigurationError,
    CostModelError,
)
from codispatch.events import (
    DER_CAPACITY_SCALE,
    GENERATOR_OUTAGE,
    ScenarioEvent,
    apply_event,
    events_at,
    last_event_iteration,
)
from codispatch.linmodel import LinearFeederModel
from codispatch.powerflow import (
    Feedback,
    SlackAccount,
    ac_feedback,
    linear_feedback,
    slack_output,
    slack_residual,
)

log = logging.getLogger(__name__)

SIGNAL_BROADCAST = 'signal-broadcast'
SETPOINT_REPORT = 'setpoint-report'
PF_RESULT = 'pf-result'
DUAL_UPDATE = 'dual-update'
MESSAGE_KINDS = (SIGNAL_BROADCAST, SETPOINT_REPORT, PF_RESULT, DUAL_UPDATE)

OPERATOR = 'operator'

GRADIENT = 'gradient'
BEST_RESPONSE = 'best-response'
MARKET_MODES = (GRADIENT, BEST_RESPONSE)


class IncentiveSignals(NamedTuple):
    alpha: Tuple[np.ndarray, ...]
    beta: Tuple[np.ndarray, ...]
    lambda_broadcast: float
    iteration_tag: int


class AgentMessage(NamedTuple):
    kind: str
    sender: str
    iteration_tag: int
    payload: Any

    def as_json(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'sender': self.sender,
            'iteration_tag': self.iteration_tag,
            'payload': _jsonable(self.payload),
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, '_asdict'):
        return {k: _jsonable(v) for k, v in value._asdict().items()}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


class FaultInjector(object):
    """
    Simulated delivery faults.  Each posted message is dropped with
    probability drop_rate or delayed with probability delay_rate.
    """
    def __init__(self, drop_rate: float = 0.0, delay_rate: float = 0.0,
                 seed: Optional[int] = None):
        for name, rate in (('drop_rate', drop_rate), ('delay_rate', delay_rate)):
            if not 0.0 <= rate <= 1.0:
                raise ConfigurationError(
                    '%s must be between 0 and 1, not %r' % (name, rate))
        if drop_rate + delay_rate > 1.0:
            raise ConfigurationError('drop_rate + delay_rate exceeds 1')
        self.drop_rate = drop_rate
        self.delay_rate = delay_rate
        self._rng = np.random.default_rng(seed)

    def fault(self, message: AgentMessage) -> Optional[str]:
        u = self._rng.random()
        if u < self.drop_rate:
            return 'dropped'
        if u < self.drop_rate + self.delay_rate:
            return 'delayed'
        return None


class MessageBus(object):
    """
    Deterministic in-process delivery.  Messages wait in posting order
    until taken; every posted message is also kept in the log.
    """
    def __init__(self, faults: Optional[FaultInjector] = None):
        self.faults = faults
        self.log: List[AgentMessage] = []
        self._pending: List[AgentMessage] = []

    def post(self, message: AgentMessage):
        if message.kind not in MESSAGE_KINDS:
            raise BusDeliveryError('unknown message kind "%s"' % message.kind)
        if self.faults is not None:
            fault = self.faults.fault(message)
            if fault:
                raise BusDeliveryError(
                    '%s from "%s" tagged %d was %s' % (
                        message.kind, message.sender,
                        message.iteration_tag, fault))
        self.log.append(message)
        self._pending.append(message)

    def _matching(self, kind: str, tag: int) -> List[AgentMessage]:
        found = [m for m in self._pending if m.kind == kind]
        for m in found:
            if m.iteration_tag != tag:
                raise BusDeliveryError(
                    'stale %s from "%s": tagged %d, expected %d' % (
                        kind, m.sender, m.iteration_tag, tag))
        return found

    def peek(self, kind: str, tag: int) -> List[AgentMessage]:
        return self._matching(kind, tag)

    def take(self, kind: str, tag: int) -> List[AgentMessage]:
        found = self._matching(kind, tag)
        self._pending = [m for m in self._pending if m.kind != kind]
        return found

    def counts(self, tag: int) -> Dict[str, int]:
        out = {kind: 0 for kind in MESSAGE_KINDS}
        for m in self.log:
            if m.iteration_tag == tag:
                out[m.kind] += 1
        return out

    def dump_jsonl(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            for m in self.log:
                f.write(json.dumps(m.as_json(), sort_keys=True))
                f.write('\n')


def user_step(state: Tuple[float, float], signals: Tuple[float, float],
              der: Der, epsilon: float) -> Tuple[float, float]:
    """
    Projected gradient step on the user's own objective
    C(p, q) + alpha p + beta q
    """
    p, q = state
    alpha, beta = signals
    model = get_cost_model(der.cost_model)
    p_lo, p_hi, q_lo, q_hi = der.box()
    return (project_box(p - epsilon * (model.gradient(p, der.a_p) + alpha),
                        p_lo, p_hi),
            project_box(q - epsilon * (model.gradient(q, der.a_q) + beta),
                        q_lo, q_hi))


def user_best_response(signals: Tuple[float, float],
                       der: Der) -> Tuple[float, float]:
    """
    Box-clamped minimizer of a_p p**2 + a_q q**2 + alpha p + beta q
    """
    if der.cost_model != 'quadratic':
        raise CostModelError(
            'best response needs a quadratic cost, DER at node "%s" uses "%s"'
            % (der.node_id, der.cost_model))
    alpha, beta = signals
    p_lo, p_hi, q_lo, q_hi = der.box()
    return (project_box(-alpha / (2.0 * der.a_p), p_lo, p_hi),
            project_box(-beta / (2.0 * der.a_q), q_lo, q_hi))


def generator_step(P: float, lam: float, gen: Generator,
                   epsilon: float) -> float:
    model = get_cost_model(gen.cost_model)
    lo, hi = gen.box()
    return project_box(P - epsilon * (model.gradient(P, gen.cost) + lam),
                       lo, hi)


class UserAgent(object):
    """
    Owner of one DER.  Knows its private cost and limits, and which node
    of which feeder the prices it receives belong to.
    """
    def __init__(self, name: str, feeder: int, node: int, position: int,
                 der: Der, p: float, q: float):
        self.name = name
        self.feeder = feeder
        self.node = node
        self.position = position
        self.der = der
        self.p = p
        self.q = q

    def apply_event(self, event: ScenarioEvent):
        if event.kind != DER_CAPACITY_SCALE:
            return
        self.der = self.der._replace(
            capacity_scale=self.der.capacity_scale * event.factor)
        p_lo, p_hi, q_lo, q_hi = self.der.box()
        self.p = project_box(self.p, p_lo, p_hi)
        self.q = project_box(self.q, q_lo, q_hi)

    def report(self, tag: int) -> AgentMessage:
        return AgentMessage(SETPOINT_REPORT, self.name, tag, {
            'position': self.position, 'p': self.p, 'q': self.q})

    def step(self, signals: IncentiveSignals, epsilon: float, mode: str):
        prices = (signals.alpha[self.feeder][self.node],
                  signals.beta[self.feeder][self.node])
        if mode == BEST_RESPONSE:
            self.p, self.q = user_best_response(prices, self.der)
        else:
            self.p, self.q = user_step((self.p, self.q), prices, self.der,
                                       epsilon)


class GeneratorAgent(object):
    def __init__(self, name: str, position: int, gen: Generator, P: float):
        self.name = name
        self.position = position
        self.gen = gen
        self.P = P

    def apply_event(self, event: ScenarioEvent):
        if event.kind != GENERATOR_OUTAGE or event.target != self.gen.gen_id:
            return
        self.gen = self.gen._replace(online=False)
        self.P = project_box(self.P, *self.gen.box())

    def report(self, tag: int) -> AgentMessage:
        return AgentMessage(SETPOINT_REPORT, self.name, tag, {
            'generator': self.position, 'P': self.P})

    def step(self, signals: IncentiveSignals, epsilon: float, mode: str):
        self.P = generator_step(self.P, signals.lambda_broadcast, self.gen,
                                epsilon)


def assemble_reports(reports: Sequence[AgentMessage], n_der: int,
                     n_gen: int) -> PrimalState:
    """
    Global setpoint vectors from one round of setpoint reports.  Slots no
    report covers stay at zero.
    """
    p = np.zeros(n_der)
    q = np.zeros(n_der)
    P_M = np.zeros(n_gen)
    seen = set()
    for m in reports:
        if 'generator' in m.payload:
            P_M[m.payload['generator']] = m.payload['P']
        else:
            p[m.payload['position']] = m.payload['p']
            q[m.payload['position']] = m.payload['q']
        if m.sender in seen:
            raise BusDeliveryError('two setpoint reports from "%s"' % m.sender)
        seen.add(m.sender)
    return PrimalState(p, q, P_M)


def operator_step(reports: Sequence[AgentMessage],
                  pf_results: Sequence[AgentMessage], y: DualState,
                  models: Sequence[LinearFeederModel], cfg: SolverConfig,
                  transmission: TransmissionSystem, limits: VoltageLimits,
                  slack: SlackAccount, n_der: int,
                  tag: int) -> Tuple[DualState, IncentiveSignals]:
    """
    Dual update from one round of setpoint reports and power-flow results,
    and the incentive prices for the next round.

    Raises BusDeliveryError when a message is missing or carries another
    tag.
    """
    for m in list(reports) + list(pf_results):
        if m.iteration_tag != tag:
            raise BusDeliveryError(
                'stale %s from "%s": tagged %d, expected %d' % (
                    m.kind, m.sender, m.iteration_tag, tag))
    if len(pf_results) != len(models):
        raise BusDeliveryError(
            'round %d: %d power-flow results for %d feeders' % (
                tag, len(pf_results), len(models)))
    x = assemble_reports(reports, n_der, len(transmission.generators))
    ordered = sorted(pf_results, key=lambda m: m.payload['feeder'])
    feedback = Feedback(
        tag,
        tuple(m.payload['v'] for m in ordered),
        np.array([m.payload['P_L'] for m in ordered]),
        pf_results[0].payload['source'] if pf_results else cfg.feedback)
    residual = slack_residual(slack, transmission, x.P_M, feedback.P_L)
    glam, gmu = dual_gradients(y, feedback, residual, limits, cfg.eta)
    y_new = ascend_dual(y, glam, gmu, cfg.epsilon)
    return y_new, incentive_signals(y_new, models, cfg, tag + 1)


def incentive_signals(y: DualState, models: Sequence[LinearFeederModel],
                      cfg: SolverConfig, tag: int) -> IncentiveSignals:
    lam = y.lam if cfg.der_price_participation else 0.0
    alpha = []
    beta = []
    for model, mu_k in zip(models, y.mu):
        a, b = feeder_prices(model, lam, mu_k)
        alpha.append(a)
        beta.append(b)
    return IncentiveSignals(tuple(alpha), tuple(beta), y.lam, tag)


class OperatorAgent(object):
    """
    Network operator.  Holds the feeders without their DERs, the linear
    models, the transmission balance data and the multipliers; DER costs
    and limits are not reachable from here.
    """
    def __init__(self, system: CoupledSystem,
                 models: Sequence[LinearFeederModel], slack: SlackAccount,
                 cfg: SolverConfig, y0: DualState, bus: MessageBus):
        self.feeders = tuple(f._replace(ders=()) for f in system.feeders)
        self.transmission = system.transmission
        self.limits = system.limits
        self.models = tuple(models)
        self.slack = slack
        self.cfg = cfg
        self.y = y0
        self.bus = bus
        self._network = CoupledSystem(self.transmission, self.feeders,
                                      self.limits)
        self._reports: List[AgentMessage] = []

    def apply_event(self, event: ScenarioEvent):
        if event.kind == GENERATOR_OUTAGE:
            self.transmission = apply_event(
                CoupledSystem(self.transmission, ()), event).transmission
            self._network = self._network._replace(
                transmission=self.transmission)

    def broadcast(self, tag: int):
        self.bus.post(AgentMessage(
            SIGNAL_BROADCAST, OPERATOR, tag,
            incentive_signals(self.y, self.models, self.cfg, tag)))

    def network_update(self, tag: int) -> Feedback:
        self._reports = self.bus.take(SETPOINT_REPORT, tag)
        x = assemble_reports(self._reports, self._network.n_der,
                             len(self.transmission.generators))
        if self.cfg.feedback == 'ac':
            feedback = ac_feedback(x.p, x.q, self._network, tag,
                                   self.cfg.sweep_tol, self.cfg.sweep_max_iter)
        else:
            feedback = linear_feedback(x.p, x.q, self._network, self.models,
                                       tag)
        if not self.slack.recorded:
            self.slack.record(
                slack_output(self.transmission, x.P_M, feedback.P_L))
        for k, f in enumerate(self.feeders):
            self.bus.post(AgentMessage(PF_RESULT, OPERATOR, tag, {
                'feeder': k, 'feeder_id': f.feeder_id, 'v': feedback.v[k],
                'P_L': feedback.P_L[k], 'source': feedback.source}))
        return feedback

    def dual_update(self, tag: int):
        pf_results = self.bus.take(PF_RESULT, tag)
        self.y, signals = operator_step(
            self._reports, pf_results, self.y, self.models, self.cfg,
            self.transmission, self.limits, self.slack,
            self._network.n_der, tag)
        self.bus.post(AgentMessage(DUAL_UPDATE, OPERATOR, tag, self.y))
        self.bus.post(AgentMessage(SIGNAL_BROADCAST, OPERATOR, tag + 1,
                                   signals))


def make_agents(system: CoupledSystem, x: PrimalState) -> Tuple[
        List[UserAgent], List[GeneratorAgent]]:
    users = []
    for k, f in enumerate(system.feeders):
        index = f.node_index()
        for d in f.ders:
            i = index[d.node_id]
            position = system.global_index(k, i)
            users.append(UserAgent(
                'der:%s:%s' % (f.feeder_id, d.node_id), k, i, position, d,
                x.p[position], x.q[position]))
    generators = [
        GeneratorAgent('gen:%s' % g.gen_id, i, g, x.P_M[i])
        for i, g in enumerate(system.transmission.generators)]
    return users, generators


def run_market(problem: Problem, cfg: SolverConfig,
               events: Sequence[ScenarioEvent] = (),
               mode: str = GRADIENT,
               x0: Optional[PrimalState] = None,
               y0: Optional[DualState] = None,
               probes: Optional[Sequence[int]] = None,
               keep_states: bool = False,
               bus: Optional[MessageBus] = None) -> Trajectory:
    """
    Run synchronous market rounds until the convergence tolerances are met
    (once the last event has been applied) or max_iter rounds have run.

    In gradient mode the trajectory matches core.solve on the same
    arguments.  The problem's system is only used to create the agents and
    to record the trace; the operator gets its own network view.
    """
    cfg = validate_config(cfg)
    if mode not in MARKET_MODES:
        raise ConfigurationError(
            'market mode must be one of %s, not "%s"' % (
                ', '.join(MARKET_MODES), mode))
    events = sorted(events, key=lambda e: e.iteration)
    if x0 is None or y0 is None:
        start = initial_state(problem)
        x0 = start[0] if x0 is None else x0
        y0 = start[1] if y0 is None else y0
    if probes is None:
        probes = default_probes(problem.system)
    bus = bus if bus is not None else MessageBus()
    system = problem.system
    n_der = system.n_der

    users, generators = make_agents(system, project_primal(x0, problem))
    operator = OperatorAgent(system, problem.models, problem.slack, cfg, y0,
                             bus)
    agents = users + generators
    log.info('market (%s): %d users, %d generators, %s feedback',
             mode, len(users), len(generators), cfg.feedback)

    operator.broadcast(0)
    records = []
    states = []
    phases = []
    status = NOT_CONVERGED
    last_event = last_event_iteration(events)
    previous = None
    y = y0
    k = 0
    try:
        while True:
            due = events_at(events, k)
            if due:
                if k > 0:
                    phases.append({'iteration': k - 1,
                                   'lambda': records[-1].lam})
                for event in due:
                    for agent in agents:
                        agent.apply_event(event)
                    operator.apply_event(event)
                    system = apply_event(system, event)
                problem = problem.with_system(system)

            for agent in agents:
                bus.post(agent.report(k))
            feedback = operator.network_update(k)
            if k > 0:
                y = bus.take(DUAL_UPDATE, k - 1)[0].payload

            p = np.zeros(n_der)
            q = np.zeros(n_der)
            for u in users:
                p[u.position] = u.p
                q[u.position] = u.q
            x = PrimalState(p, q, np.array([g.P for g in generators],
                                           dtype=float))
            if k > 0:
                check_divergence(x, y, cfg, k)
            record = make_record(k, x, y, feedback, problem, cfg, probes,
                                 previous)
            records.append(record)
            if keep_states:
                states.append((x, y))
            if k >= last_event and is_converged(record, cfg):
                status = CONVERGED
                break
            if k >= cfg.max_iter:
                break

            broadcast = bus.take(SIGNAL_BROADCAST, k)
            if len(broadcast) != 1:
                raise BusDeliveryError(
                    'round %d: %d signal broadcasts' % (k, len(broadcast)))
            signals = broadcast[0].payload
            for agent in agents:
                agent.step(signals, cfg.epsilon, mode)
            operator.dual_update(k)
            previous = (x, y)
            k += 1
    except CodispatchException as e:
        if e.iteration is None:
            e.iteration = k
        raise

    phases.append({'iteration': records[-1].iteration, 'lambda': float(y.lam)})
    log.info('market (%s): %s after %d rounds, lambda %.6g',
             mode, status, records[-1].iteration, y.lam)
    return Trajectory(
        records=records,
        states=states,
        status=status,
        iterations=records[-1].iteration,
        phase_lambdas=phases,
        x=x,
        y=y,
        system=system,
        feedback=feedback,
    )
