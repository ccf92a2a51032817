"""
Scenario files: which cases to couple, how to start, which engine to run
and which events to inject; plus the run driver that writes the trace and
summary of a run and the comparison of two traces.
"""
import json
import logging
import os

from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from codispatch import load
from codispatch.cases import attach_feeders, load_feeder, load_transmission, voltage_limits
from codispatch.config import SolverConfig, solver_config
from codispatch.core import (
    DER_STARTS,
    GENERATOR_STARTS,
    DualState,
    PrimalState,
    Problem,
    Trajectory,
    build_problem,
    default_probes,
    initial_state,
    solve,
)
from codispatch.datatypes import CoupledSystem, VoltageLimits
from codispatch.errors import (
    CodispatchException,
    ConfigurationError,
    HorizonMismatchError,
    ScenarioError,
)
from codispatch.events import ScenarioEvent, check_event
from codispatch.market import (
    BEST_RESPONSE,
    GRADIENT,
    FaultInjector,
    MessageBus,
    run_market,
)
from codispatch.traces import Trace, read_trace, write_trace

log = logging.getLogger(__name__)

__all__ = [
    'ENGINES', 'FeederAssignment', 'InitialState', 'FaultSettings',
    'Scenario', 'ScenarioEvent', 'RunResult', 'load_scenario',
    'scenario_from_dict', 'build_system', 'prepare', 'run_engine',
    'run_scenario', 'summarize', 'compare_runs',
]

CORE = 'core'
MARKET_GRADIENT = 'market-gradient'
MARKET_BEST_RESPONSE = 'market-best-response'
ENGINES = (CORE, MARKET_GRADIENT, MARKET_BEST_RESPONSE)

ACTIVE_MU = 1e-9

_SCENARIO_KEYS = (
    'name', 'seed', 'transmission', 'feeders', 'voltage_limits', 'solver',
    'engine', 'feedback', 'events', 'initial_state', 'slack', 'probe_nodes',
    'der_price_participation', 'faults', 'description',
    'allow_generator_hosts',
)


class FeederAssignment(NamedTuple):
    case: str
    host_bus: Optional[int] = None
    # replaces the id in the case file, so one case can be attached twice
    feeder_id: Optional[str] = None


class InitialState(NamedTuple):
    generators: str = 'mid'
    ders: str = 'zero'


class FaultSettings(NamedTuple):
    drop_rate: float = 0.0
    delay_rate: float = 0.0


class Scenario(NamedTuple):
    name: str
    transmission: str
    feeders: Tuple[FeederAssignment, ...] = ()
    limits: VoltageLimits = VoltageLimits()
    solver: SolverConfig = SolverConfig()
    engine: str = CORE
    events: Tuple[ScenarioEvent, ...] = ()
    initial_state: InitialState = InitialState()
    probe_nodes: Dict[str, int] = {}
    seed: Optional[int] = None
    faults: Optional[FaultSettings] = None
    allow_generator_hosts: bool = False
    # directory relative case references are resolved from
    base_dir: Optional[str] = None


class RunResult(NamedTuple):
    trace_path: str
    summary_path: str
    summary: Dict[str, Any]
    trajectory: Trajectory


def load_scenario(ref: str) -> Scenario:
    path = load.resolve_path(ref)
    if not os.path.exists(path):
        raise ConfigurationError('scenario file "%s" not found' % ref)
    return scenario_from_dict(load.load_path(path), path)


def _choice(value: Any, choices: Tuple[str, ...], what: str) -> str:
    if value not in choices:
        raise ConfigurationError('%s must be one of %s, not %r' % (
            what, ', '.join(choices), value))
    return value


def scenario_from_dict(data: Dict[str, Any],
                       source: str = '<scenario>') -> Scenario:
    """
    Validate a scenario mapping.

    :param data: parsed scenario file
    :param source: path of the scenario file; relative case references
        are resolved from its directory

    Raises ConfigurationError naming the offending field.
    """
    for key in data:
        if key not in _SCENARIO_KEYS:
            raise ConfigurationError(
                '%s: unknown scenario field "%s"' % (source, key))
    base_dir = os.path.dirname(os.path.abspath(source)) \
        if source != '<scenario>' else None

    if 'transmission' not in data:
        raise ConfigurationError('%s: "transmission" is required' % source)
    transmission = str(data['transmission'])

    feeders = []
    for i, fd in enumerate(data.get('feeders') or []):
        if not isinstance(fd, dict) or 'case' not in fd:
            raise ConfigurationError(
                '%s: feeder #%d needs a "case"' % (source, i + 1))
        host = fd.get('host_bus')
        if host is not None and (isinstance(host, bool)
                                 or not isinstance(host, int)):
            raise ConfigurationError(
                '%s: feeder #%d: host_bus must be an integer' % (source, i + 1))
        feeder_id = fd.get('id')
        feeders.append(FeederAssignment(
            str(fd['case']), host,
            None if feeder_id is None else str(feeder_id)))

    for ref in [transmission] + [f.case for f in feeders]:
        if not os.path.exists(load.resolve_path(ref, base_dir)):
            raise ConfigurationError(
                '%s: case file "%s" not found' % (source, ref))

    vl = data.get('voltage_limits') or {}
    limits = voltage_limits(vl.get('v_min', 0.95), vl.get('v_max', 1.05))

    overrides = dict(data.get('solver') or {})
    if 'feedback' in data:
        overrides['feedback'] = data['feedback']
    if 'der_price_participation' in data:
        overrides['der_price_participation'] = data['der_price_participation']
    slack = data.get('slack') or {}
    if 'mode' in slack:
        overrides['slack_mode'] = slack['mode']
    cfg = solver_config(overrides)

    engine = _choice(data.get('engine', CORE), ENGINES, 'engine')

    events = []
    for i, ev in enumerate(data.get('events') or []):
        if not isinstance(ev, dict) or 'iteration' not in ev or 'kind' not in ev:
            raise ConfigurationError(
                '%s: event #%d needs "iteration" and "kind"' % (source, i + 1))
        events.append(ScenarioEvent(
            int(ev['iteration']), str(ev['kind']),
            str(ev.get('target', 'all')),
            None if ev.get('factor') is None else float(ev['factor'])))
    for ev in events:
        check_event(ev, max_iter=cfg.max_iter)

    init = data.get('initial_state') or {}
    initial = InitialState(
        _choice(init.get('generators', 'mid'), GENERATOR_STARTS,
                'initial_state.generators'),
        _choice(init.get('ders', 'zero'), DER_STARTS, 'initial_state.ders'))

    probes = {}
    for feeder_id, node_id in (data.get('probe_nodes') or {}).items():
        if isinstance(node_id, bool) or not isinstance(node_id, int):
            raise ConfigurationError(
                '%s: probe node of feeder "%s" must be an integer' % (
                    source, feeder_id))
        probes[str(feeder_id)] = node_id

    faults = None
    if data.get('faults') is not None:
        fd = data['faults']
        faults = FaultSettings(float(fd.get('drop_rate', 0.0)),
                               float(fd.get('delay_rate', 0.0)))

    seed = data.get('seed')
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ConfigurationError('%s: seed must be an integer' % source)

    allow_gen_hosts = data.get('allow_generator_hosts', False)
    if not isinstance(allow_gen_hosts, bool):
        raise ConfigurationError(
            '%s: allow_generator_hosts must be true or false' % source)

    return Scenario(
        name=str(data.get('name') or os.path.splitext(
            os.path.basename(source))[0]),
        transmission=transmission,
        feeders=tuple(feeders),
        limits=limits,
        solver=cfg,
        engine=engine,
        events=tuple(sorted(events, key=lambda e: e.iteration)),
        initial_state=initial,
        probe_nodes=probes,
        seed=seed,
        faults=faults,
        allow_generator_hosts=allow_gen_hosts,
        base_dir=base_dir,
    )


def build_system(scenario: Scenario) -> CoupledSystem:
    ts = load_transmission(scenario.transmission, scenario.base_dir)
    feeders = []
    for fa in scenario.feeders:
        feeder = load_feeder(fa.case, scenario.base_dir)
        if fa.host_bus is not None:
            feeder = feeder._replace(host_bus_id=fa.host_bus)
        if fa.feeder_id is not None:
            feeder = feeder._replace(feeder_id=fa.feeder_id)
        feeders.append(feeder)
    system = attach_feeders(ts, feeders, scenario.limits,
                            scenario.allow_generator_hosts)
    for ev in scenario.events:
        check_event(ev, system, scenario.solver.max_iter)
    return system


def probe_positions(scenario: Scenario, system: CoupledSystem) -> Tuple[int, ...]:
    probes = list(default_probes(system))
    for feeder_id, node_id in scenario.probe_nodes.items():
        try:
            k = system.feeder_position(feeder_id)
        except KeyError:
            raise ConfigurationError(
                'probe node given for unknown feeder "%s"' % feeder_id)
        index = system.feeders[k].node_index()
        if node_id not in index:
            raise ConfigurationError(
                'probe node "%s" not found in feeder "%s"' % (
                    node_id, feeder_id))
        probes[k] = index[node_id]
    return tuple(probes)


def prepare(scenario: Scenario) -> Tuple[
        Problem, PrimalState, DualState, Tuple[int, ...]]:
    system = build_system(scenario)
    problem = build_problem(system, scenario.solver)
    x0, y0 = initial_state(problem, scenario.initial_state.generators,
                           scenario.initial_state.ders, scenario.seed)
    return problem, x0, y0, probe_positions(scenario, system)


def market_bus(scenario: Scenario) -> MessageBus:
    faults = None
    if scenario.faults is not None:
        faults = FaultInjector(scenario.faults.drop_rate,
                               scenario.faults.delay_rate, scenario.seed)
    return MessageBus(faults)


def run_engine(scenario: Scenario, bus: Optional[MessageBus] = None,
               keep_states: bool = False) -> Trajectory:
    problem, x0, y0, probes = prepare(scenario)
    if scenario.engine == CORE:
        return solve(problem, scenario.solver, scenario.events, x0, y0,
                     probes, keep_states)
    if bus is None:
        bus = market_bus(scenario)
    mode = GRADIENT if scenario.engine == MARKET_GRADIENT else BEST_RESPONSE
    return run_market(problem, scenario.solver, scenario.events, mode, x0, y0,
                      probes, keep_states, bus)


def summarize(trajectory: Trajectory, scenario: Scenario) -> Dict[str, Any]:
    system = trajectory.system
    final = trajectory.records[-1]
    x = trajectory.x
    offsets = system.offsets()

    ders: Dict[str, Any] = {}
    voltages: Dict[str, Any] = {}
    active: Dict[str, Any] = {}
    for k, f in enumerate(system.feeders):
        index = f.node_index()
        ders[f.feeder_id] = {
            str(d.node_id): {
                'p': float(x.p[offsets[k] + index[d.node_id]]),
                'q': float(x.q[offsets[k] + index[d.node_id]]),
            } for d in f.ders}
        v = trajectory.feedback.v[k]
        voltages[f.feeder_id] = {
            str(nd.node_id): float(v[i]) for i, nd in enumerate(f.nodes)}
        n = len(f.nodes)
        mu_k = trajectory.y.mu[k]
        active[f.feeder_id] = {
            'upper': [f.nodes[i].node_id for i in range(n)
                      if mu_k[i] > ACTIVE_MU],
            'lower': [f.nodes[i].node_id for i in range(n)
                      if mu_k[n + i] > ACTIVE_MU],
        }

    return {
        'scenario': scenario.name,
        'engine': scenario.engine,
        'feedback': scenario.solver.feedback,
        'status': trajectory.status,
        'iterations': trajectory.iterations,
        'lambda': final.lam,
        'final_dispatch': {
            g.gen_id: float(x.P_M[i])
            for i, g in enumerate(system.transmission.generators)},
        'final_der_setpoints': ders,
        'final_voltages': voltages,
        'active_constraints': active,
        'phase_lambdas': trajectory.phase_lambdas,
        'total_cost': final.total_cost,
        'slack_residual': final.slack_residual,
    }


def run_scenario(scenario: Scenario, out_dir: str,
                 bus: Optional[MessageBus] = None,
                 messages: bool = False,
                 progress: Optional[Callable[[str], None]] = None) -> RunResult:
    """
    Run a scenario and write <name>-trace.csv and <name>-summary.json into
    out_dir.

    :param messages: also dump the market message log as
        <name>-messages.jsonl (market engines only)
    :param progress: called with short status lines

    Engine errors are raised as ScenarioError carrying the iteration.
    """
    os.makedirs(out_dir, exist_ok=True)
    if scenario.engine != CORE and bus is None:
        bus = market_bus(scenario)
    if progress:
        progress('running scenario "%s" with the %s engine' % (
            scenario.name, scenario.engine))
    try:
        trajectory = run_engine(scenario, bus)
    except ScenarioError:
        raise
    except CodispatchException as e:
        err = ScenarioError('scenario "%s", iteration %s: %s' % (
            scenario.name, e.iteration if e.iteration is not None else '-',
            e))
        err.iteration = e.iteration
        raise err from e

    trace_path = os.path.join(out_dir, '%s-trace.csv' % scenario.name)
    write_trace(trace_path, trajectory.records,
                trajectory.system.transmission.generator_ids(),
                [f.feeder_id for f in trajectory.system.feeders])
    summary = summarize(trajectory, scenario)
    summary_path = os.path.join(out_dir, '%s-summary.json' % scenario.name)
    with open(summary_path, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write('\n')
    log.info('scenario "%s": %s, trace in %s', scenario.name,
             trajectory.status, trace_path)
    if messages and bus is not None:
        bus.dump_jsonl(os.path.join(out_dir, '%s-messages.jsonl' % scenario.name))
    if progress:
        progress('%s after %d iterations, total cost %.6g' % (
            trajectory.status, trajectory.iterations,
            summary['total_cost']))
    return RunResult(trace_path, summary_path, summary, trajectory)


def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None:
        return None
    return b - a


def compare_runs(trace_a: Union[str, Trace], trace_b: Union[str, Trace],
                 metric: str = 'total_cost') -> Dict[str, Any]:
    """
    Per-iteration and final deltas (b - a) of one trace column.

    Both traces must start at the same iteration and overlap; the final
    values are each trace's last record, so runs that stopped at
    different iterations still compare.

    Raises HorizonMismatchError otherwise.
    """
    ta = read_trace(trace_a) if isinstance(trace_a, str) else trace_a
    tb = read_trace(trace_b) if isinstance(trace_b, str) else trace_b
    ia = ta.iterations()
    ib = tb.iterations()
    if not ia or not ib:
        raise HorizonMismatchError('cannot compare an empty trace')
    if ia[0] != ib[0]:
        raise HorizonMismatchError(
            'traces start at iterations %d and %d' % (ia[0], ib[0]))
    va = dict(zip(ia, ta.column(metric)))
    vb = dict(zip(ib, tb.column(metric)))
    common = sorted(set(va) & set(vb))
    if len(common) < 1 or common[-1] < min(ia[-1], ib[-1]):
        raise HorizonMismatchError(
            'traces cover iterations %d-%d and %d-%d' % (
                ia[0], ia[-1], ib[0], ib[-1]))

    deltas: List[Dict[str, Any]] = [
        {'iteration': i, 'a': va[i], 'b': vb[i], 'delta': _delta(va[i], vb[i])}
        for i in common]
    finite = [abs(d['delta']) for d in deltas if d['delta'] is not None]
    final_a = va[ia[-1]]
    final_b = vb[ib[-1]]
    return {
        'metric': metric,
        'iterations': deltas,
        'max_abs_delta': float(np.max(finite)) if finite else None,
        'final': {
            'iteration_a': ia[-1],
            'iteration_b': ib[-1],
            'a': final_a,
            'b': final_b,
            'delta': _delta(final_a, final_b),
        },
    }
