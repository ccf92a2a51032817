"""
Network case files: parsing, validation, serialization and coupling.

The case format is JSON (YAML is accepted as well, by file extension).
Every field is documented in case-schema.json at the repository root.
All quantities are per-unit on the case's own base_mva, except feeder
line impedances, which may be given in ohms (r_ohm, x_ohm) together with
the feeder's base_kv.
"""
import json
import logging
import os

from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import networkx as nx

from codispatch import load
from codispatch.costs import cost_models
from codispatch.datatypes import (
    Bus,
    CoupledSystem,
    Der,
    DistributionFeeder,
    FeederLine,
    FeederNode,
    Generator,
    TransmissionLine,
    TransmissionSystem,
    VoltageLimits,
)
from codispatch.errors import (
    CaseValidationError,
    ConfigurationError,
    CouplingError,
)

log = logging.getLogger(__name__)

CASE_KINDS = ('transmission', 'feeder')

_REQUIRED = object()


def parse_case(text: Union[str, bytes], kind: str,
               source: str = '<string>') -> Union[
                   TransmissionSystem, DistributionFeeder]:
    """
    Parse and validate the content of a case file.

    :param text: case file content
    :param kind: "transmission" or "feeder"
    :param source: file name used in messages and to detect YAML

    :return: validated TransmissionSystem or DistributionFeeder

    Raises CaseSyntaxError with the position of malformed content and
    CaseValidationError naming the offending element otherwise.
    """
    return case_from_dict(load.loads(text, source), kind, source)


def case_from_dict(data: Dict[str, Any], kind: str,
                   source: str = '<string>') -> Union[
                       TransmissionSystem, DistributionFeeder]:
    if kind not in CASE_KINDS:
        raise CaseValidationError('unknown case kind "%s"' % kind)
    declared = data.get('kind')
    if declared != kind:
        raise CaseValidationError(
            '%s: expected a %s case, found kind "%s"' % (
                source, kind, declared))
    if kind == 'transmission':
        return _transmission(data, source)
    return _feeder(data, source)


def load_case(ref: str, kind: str,
              relative_to: Optional[str] = None) -> Union[
                  TransmissionSystem, DistributionFeeder]:
    path = load.resolve_path(ref, relative_to)
    if not os.path.exists(path):
        raise CaseValidationError('case file "%s" not found' % ref)
    with open(path, encoding='utf-8') as f:
        return parse_case(f.read(), kind, path)


def load_transmission(ref: str,
                      relative_to: Optional[str] = None) -> TransmissionSystem:
    ts = load_case(ref, 'transmission', relative_to)
    assert isinstance(ts, TransmissionSystem)
    return ts


def load_feeder(ref: str,
                relative_to: Optional[str] = None) -> DistributionFeeder:
    feeder = load_case(ref, 'feeder', relative_to)
    assert isinstance(feeder, DistributionFeeder)
    return feeder


def _number(obj: Dict[str, Any], key: str, where: str,
            default: Any = _REQUIRED) -> float:
    if key not in obj:
        if default is _REQUIRED:
            raise CaseValidationError('%s: missing field "%s"' % (where, key))
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseValidationError(
            '%s: field "%s" must be a number, not %r' % (where, key, value))
    return float(value)


def _integer(obj: Dict[str, Any], key: str, where: str,
             default: Any = _REQUIRED) -> int:
    if key not in obj:
        if default is _REQUIRED:
            raise CaseValidationError('%s: missing field "%s"' % (where, key))
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise CaseValidationError(
            '%s: field "%s" must be an integer id, not %r' % (
                where, key, value))
    return value


def _items(data: Dict[str, Any], key: str, source: str,
           required: bool = True) -> List[Dict[str, Any]]:
    items = data.get(key)
    if items is None:
        if required:
            raise CaseValidationError(
                '%s: missing field "%s"' % (source, key))
        return []
    if not isinstance(items, list):
        raise CaseValidationError('%s: "%s" must be a list' % (source, key))
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise CaseValidationError(
                '%s: %s #%d must be an object' % (source, key, i + 1))
    return items


def _transmission(data: Dict[str, Any], source: str) -> TransmissionSystem:
    base_mva = _number(data, 'base_mva', source)
    if base_mva <= 0:
        raise CaseValidationError('%s: base_mva must be positive' % source)

    buses = []
    defined = {}
    for i, b in enumerate(_items(data, 'buses', source)):
        where = 'bus #%d' % (i + 1)
        bus_id = _integer(b, 'id', where)
        if bus_id in defined:
            raise CaseValidationError(
                'bus "%s" is already defined as bus #%d. '
                'Cannot be redefined as bus #%d.' % (
                    bus_id, defined[bus_id], i + 1))
        defined[bus_id] = i + 1
        buses.append(Bus(bus_id, _number(b, 'injection', where, 0.0)))
    if not buses:
        raise CaseValidationError('%s: no buses defined' % source)

    slack = _integer(data, 'slack_bus', source)
    if slack not in defined:
        raise CaseValidationError('slack bus "%s" does not exist' % slack)

    lines = []
    for i, ln in enumerate(_items(data, 'lines', source, required=False)):
        where = 'line #%d' % (i + 1)
        a = _integer(ln, 'from', where)
        b = _integer(ln, 'to', where)
        for end in (a, b):
            if end not in defined:
                raise CaseValidationError(
                    '%s references unknown bus "%s"' % (where, end))
        lines.append(TransmissionLine(a, b))

    generators = []
    gen_ids = set()
    for i, g in enumerate(_items(data, 'generators', source, required=False)):
        gen_id = str(g.get('id', i + 1))
        where = 'generator "%s"' % gen_id
        if gen_id in gen_ids:
            raise CaseValidationError('%s is already defined' % where)
        gen_ids.add(gen_id)
        bus_id = _integer(g, 'bus', where)
        if bus_id not in defined:
            raise CaseValidationError(
                '%s references unknown bus "%s"' % (where, bus_id))
        if bus_id == slack:
            raise CaseValidationError(
                '%s sits on the slack bus "%s"' % (where, slack))
        cost = _number(g, 'cost', where)
        if cost <= 0:
            raise CaseValidationError(
                '%s: cost coefficient must be positive' % where)
        p_min = _number(g, 'p_min', where)
        p_max = _number(g, 'p_max', where)
        if p_min > p_max:
            raise CaseValidationError('%s: p_min exceeds p_max' % where)
        online = g.get('online', True)
        if not isinstance(online, bool):
            raise CaseValidationError('%s: "online" must be true or false' % where)
        cost_model = _cost_model(g, where)
        generators.append(Generator(
            bus_id=bus_id,
            cost=cost,
            p_min=p_min,
            p_max=p_max,
            setpoint_initial=_number(g, 'setpoint', where, 0.0),
            online=online,
            gen_id=gen_id,
            cost_model=cost_model,
        ))

    graph = nx.Graph()
    graph.add_nodes_from(defined)
    graph.add_edges_from(lines)
    if not nx.is_connected(graph):
        reachable = nx.node_connected_component(graph, slack)
        stranded = sorted(set(defined) - reachable)
        raise CaseValidationError(
            'transmission network is not connected: bus "%s" is '
            'unreachable from the slack bus' % stranded[0])

    return TransmissionSystem(
        buses=tuple(buses),
        lines=tuple(lines),
        generators=tuple(generators),
        slack_bus_id=slack,
        base_mva=base_mva,
        slack_setpoint=_number(data, 'slack_setpoint', source, 0.0),
        name=str(data.get('name', '')),
    )


def _cost_model(obj: Dict[str, Any], where: str) -> str:
    name = obj.get('cost_model', 'quadratic')
    if name not in cost_models:
        raise CaseValidationError(
            '%s uses unknown cost model "%s"' % (where, name))
    return name


def _feeder(data: Dict[str, Any], source: str) -> DistributionFeeder:
    feeder_id = str(data.get('id') or data.get('name') or '')
    if not feeder_id:
        raise CaseValidationError('%s: missing field "id"' % source)
    where_feeder = 'feeder "%s"' % feeder_id
    base_mva = _number(data, 'base_mva', where_feeder)
    if base_mva <= 0:
        raise CaseValidationError('%s: base_mva must be positive' % where_feeder)
    v0 = _number(data, 'v0', where_feeder, 1.0)
    if v0 <= 0:
        raise CaseValidationError(
            '%s: substation voltage v0 must be positive' % where_feeder)
    substation = _integer(data, 'substation', where_feeder, 0)
    z_base = None
    if 'base_kv' in data:
        base_kv = _number(data, 'base_kv', where_feeder)
        if base_kv <= 0:
            raise CaseValidationError(
                '%s: base_kv must be positive' % where_feeder)
        z_base = base_kv * base_kv / base_mva

    nodes = []
    defined = {}
    for i, n in enumerate(_items(data, 'nodes', where_feeder)):
        where = '%s node #%d' % (where_feeder, i + 1)
        node_id = _integer(n, 'id', where)
        if node_id == substation:
            raise CaseValidationError(
                '%s: node "%s" is the substation' % (where_feeder, node_id))
        if node_id in defined:
            raise CaseValidationError(
                '%s: node "%s" is already defined as node #%d. '
                'Cannot be redefined as node #%d.' % (
                    where_feeder, node_id, defined[node_id], i + 1))
        defined[node_id] = i + 1
        nodes.append(FeederNode(
            node_id,
            _number(n, 'load_p', where, 0.0),
            _number(n, 'load_q', where, 0.0)))
    if not nodes:
        raise CaseValidationError('%s: no nodes defined' % where_feeder)

    lines = []
    for i, ln in enumerate(_items(data, 'lines', where_feeder)):
        where = '%s line #%d' % (where_feeder, i + 1)
        parent = _integer(ln, 'from', where)
        child = _integer(ln, 'to', where)
        if 'r' in ln or 'x' in ln or z_base is None:
            r = _number(ln, 'r', where)
            x = _number(ln, 'x', where)
        else:
            r = _number(ln, 'r_ohm', where) / z_base
            x = _number(ln, 'x_ohm', where) / z_base
        if r < 0:
            raise CaseValidationError('%s: resistance must not be negative' % where)
        lines.append(FeederLine(parent, child, r, x))

    check_radial(substation, [n.node_id for n in nodes], lines, feeder_id)
    for ln in lines:
        if ln.parent == substation and ln.r == 0 and ln.x == 0:
            log.warning('%s: substation line to node "%s" has zero impedance',
                        where_feeder, ln.child)

    ders = []
    der_nodes = set()
    for i, d in enumerate(_items(data, 'ders', where_feeder, required=False)):
        node_id = _integer(d, 'node', '%s der #%d' % (where_feeder, i + 1))
        where = '%s der at node "%s"' % (where_feeder, node_id)
        if node_id not in defined:
            raise CaseValidationError(
                '%s references an unknown node' % where)
        if node_id in der_nodes:
            raise CaseValidationError('%s is already defined' % where)
        der_nodes.add(node_id)
        der = Der(
            node_id=node_id,
            a_p=_number(d, 'a_p', where),
            a_q=_number(d, 'a_q', where),
            p_min=_number(d, 'p_min', where),
            p_max=_number(d, 'p_max', where),
            q_min=_number(d, 'q_min', where),
            q_max=_number(d, 'q_max', where),
            capacity_scale=_number(d, 'capacity_scale', where, 1.0),
            cost_model=_cost_model(d, where),
        )
        if der.a_p <= 0 or der.a_q <= 0:
            raise CaseValidationError(
                '%s: cost coefficients must be positive' % where)
        if der.p_min > der.p_max or der.q_min > der.q_max:
            raise CaseValidationError('%s: empty feasible box' % where)
        if der.capacity_scale <= 0:
            raise CaseValidationError(
                '%s: capacity_scale must be positive' % where)
        ders.append(der)

    host = data.get('host_bus')
    if host is not None:
        host = _integer(data, 'host_bus', where_feeder)

    return DistributionFeeder(
        feeder_id=feeder_id,
        host_bus_id=host,
        nodes=tuple(nodes),
        lines=tuple(lines),
        v0=v0,
        ders=tuple(ders),
        base_mva=base_mva,
        substation_id=substation,
        name=str(data.get('name', '')),
    )


def check_radial(substation: int, node_ids: Sequence[int],
                 lines: Iterable[FeederLine], name: str = ''):
    """
    Raise CaseValidationError unless the lines form a tree rooted at the
    substation that reaches every node through exactly one parent.
    """
    lines = list(lines)
    where = 'feeder "%s"' % name
    ids = set(node_ids)
    if len(lines) != len(ids):
        raise CaseValidationError(
            '%s is non-radial: %d lines for %d nodes' % (
                where, len(lines), len(ids)))
    parents = {}
    for ln in lines:
        if ln.parent != substation and ln.parent not in ids:
            raise CaseValidationError(
                '%s: line %s->%s references unknown node "%s"' % (
                    where, ln.parent, ln.child, ln.parent))
        if ln.child == substation:
            raise CaseValidationError(
                '%s is non-radial: line %s->%s feeds the substation' % (
                    where, ln.parent, ln.child))
        if ln.child not in ids:
            raise CaseValidationError(
                '%s: line %s->%s references unknown node "%s"' % (
                    where, ln.parent, ln.child, ln.child))
        if ln.child in parents:
            raise CaseValidationError(
                '%s is non-radial: node "%s" has two parents ("%s" and "%s")'
                % (where, ln.child, parents[ln.child], ln.parent))
        parents[ln.child] = ln.parent

    graph = nx.DiGraph()
    graph.add_node(substation)
    graph.add_nodes_from(ids)
    graph.add_edges_from((ln.parent, ln.child) for ln in lines)
    if not nx.is_arborescence(graph):
        try:
            cycle = nx.find_cycle(graph)
            culprit = cycle[0][0]
        except nx.NetworkXNoCycle:
            culprit = sorted(ids - nx.descendants(graph, substation))[0]
        raise CaseValidationError(
            '%s is non-radial: node "%s" is not reachable from the '
            'substation through a tree' % (where, culprit))


def serialize_case(model: Union[TransmissionSystem, DistributionFeeder]) -> str:
    """
    JSON text that parse_case reads back into an equal model
    """
    if isinstance(model, TransmissionSystem):
        data = {
            'kind': 'transmission',
            'name': model.name,
            'base_mva': model.base_mva,
            'slack_bus': model.slack_bus_id,
            'slack_setpoint': model.slack_setpoint,
            'buses': [{'id': b.bus_id, 'injection': b.injection}
                      for b in model.buses],
            'lines': [{'from': ln.from_bus, 'to': ln.to_bus}
                      for ln in model.lines],
            'generators': [{
                'id': g.gen_id,
                'bus': g.bus_id,
                'cost': g.cost,
                'p_min': g.p_min,
                'p_max': g.p_max,
                'setpoint': g.setpoint_initial,
                'online': g.online,
                'cost_model': g.cost_model,
            } for g in model.generators],
        }
    else:
        data = {
            'kind': 'feeder',
            'id': model.feeder_id,
            'name': model.name,
            'base_mva': model.base_mva,
            'v0': model.v0,
            'substation': model.substation_id,
            'nodes': [{'id': n.node_id, 'load_p': n.load_p,
                       'load_q': n.load_q} for n in model.nodes],
            'lines': [{'from': ln.parent, 'to': ln.child,
                       'r': ln.r, 'x': ln.x} for ln in model.lines],
            'ders': [{
                'node': d.node_id,
                'a_p': d.a_p,
                'a_q': d.a_q,
                'p_min': d.p_min,
                'p_max': d.p_max,
                'q_min': d.q_min,
                'q_max': d.q_max,
                'capacity_scale': d.capacity_scale,
                'cost_model': d.cost_model,
            } for d in model.ders],
        }
        if model.host_bus_id is not None:
            data['host_bus'] = model.host_bus_id
    return json.dumps(data, indent=2)


def voltage_limits(v_min: float = 0.95, v_max: float = 1.05) -> VoltageLimits:
    if not 0 < v_min < v_max:
        raise ConfigurationError(
            'voltage limits must satisfy 0 < v_min < v_max, got %r and %r' % (
                v_min, v_max))
    return VoltageLimits(float(v_min), float(v_max))


def attach_feeders(ts: TransmissionSystem,
                   feeders: Sequence[DistributionFeeder],
                   limits: VoltageLimits = VoltageLimits(),
                   allow_generator_hosts: bool = False) -> CoupledSystem:
    """
    Couple feeders to their host buses.

    Hosting on the slack bus, an unknown bus or a bus already hosting
    another feeder is an error.  So is hosting on a generator bus, unless
    allow_generator_hosts is set; then it is logged as a warning.
    """
    limits = voltage_limits(*limits)
    buses = set(ts.bus_ids())
    gen_buses = {g.bus_id: g.gen_id for g in ts.generators}
    hosts = {}
    ids = set()
    for f in feeders:
        where = 'feeder "%s"' % f.feeder_id
        if f.feeder_id in ids:
            raise CouplingError('%s is attached twice' % where)
        ids.add(f.feeder_id)
        if f.host_bus_id is None:
            raise CouplingError('%s has no host bus' % where)
        if f.host_bus_id not in buses:
            raise CouplingError(
                '%s: host bus "%s" does not exist' % (where, f.host_bus_id))
        if f.host_bus_id == ts.slack_bus_id:
            raise CouplingError(
                '%s: host bus "%s" is the slack bus' % (where, f.host_bus_id))
        if f.host_bus_id in hosts:
            raise CouplingError(
                '%s: host bus "%s" already hosts feeder "%s"' % (
                    where, f.host_bus_id, hosts[f.host_bus_id]))
        if f.host_bus_id in gen_buses:
            if not allow_generator_hosts:
                raise CouplingError(
                    '%s: host bus "%s" carries generator "%s"' % (
                        where, f.host_bus_id, gen_buses[f.host_bus_id]))
            log.warning('%s is hosted on bus "%s" of generator "%s"',
                        where, f.host_bus_id, gen_buses[f.host_bus_id])
        hosts[f.host_bus_id] = f.feeder_id
    return CoupledSystem(ts, tuple(feeders), limits)
