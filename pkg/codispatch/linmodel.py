"""
LinDistFlow sensitivity model of a radial feeder.

Voltage magnitude and substation draw are affine in the nodal DER
injections around the zero-DER, nominal-load operating point:

    v   = A p + B q + c
    P_L = M.p + N.q + d
"""
import functools
import logging
import os

from typing import Dict, List, NamedTuple, Tuple

import networkx as nx
import numpy as np
import unicodecsv

from codispatch.datatypes import (
    CoupledSystem,
    DistributionFeeder,
    VoltageLimits,
)
from codispatch.cases import check_radial
from codispatch.errors import DimensionError

log = logging.getLogger(__name__)


class FeederTopology(NamedTuple):
    """
    Array view of a radial feeder, in the order of feeder.nodes.

    Each node is the receiving end of exactly one line, so per-line
    quantities are indexed by their receiving node.
    """
    index: Dict[int, int]
    parent: np.ndarray
    r: np.ndarray
    x: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    # subtree[j, i] == 1 when node i is downstream of (or is) node j
    subtree: np.ndarray


class LinearFeederModel(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    M: np.ndarray
    N: np.ndarray
    d: float


@functools.lru_cache(maxsize=64)
def feeder_topology(feeder: DistributionFeeder) -> FeederTopology:
    check_radial(feeder.substation_id, feeder.node_ids(), feeder.lines,
                 feeder.feeder_id)
    index = feeder.node_index()
    n = len(index)
    parent = np.full(n, -1, dtype=int)
    r = np.zeros(n)
    x = np.zeros(n)
    graph = nx.DiGraph()
    graph.add_nodes_from(index)
    for ln in feeder.lines:
        i = index[ln.child]
        if ln.parent != feeder.substation_id:
            parent[i] = index[ln.parent]
            graph.add_edge(ln.parent, ln.child)
        r[i] = ln.r
        x[i] = ln.x
    subtree = np.zeros((n, n))
    for node_id, j in index.items():
        subtree[j, j] = 1.0
        for below in nx.descendants(graph, node_id):
            subtree[j, index[below]] = 1.0
    load_p = np.array([nd.load_p for nd in feeder.nodes])
    load_q = np.array([nd.load_q for nd in feeder.nodes])
    for a in (parent, r, x, load_p, load_q, subtree):
        a.setflags(write=False)
    return FeederTopology(index, parent, r, x, load_p, load_q, subtree)


def path_matrices(feeder: DistributionFeeder) -> Tuple[np.ndarray, np.ndarray]:
    """
    R[i, j] and X[i, j]: resistance and reactance of the path shared by
    the substation->i and substation->j paths
    """
    topo = feeder_topology(feeder)
    S = topo.subtree
    R = S.T @ (topo.r[:, None] * S)
    X = S.T @ (topo.x[:, None] * S)
    # exact symmetry regardless of summation order
    return 0.5 * (R + R.T), 0.5 * (X + X.T)


def path_impedance(feeder: DistributionFeeder) -> Tuple[np.ndarray, np.ndarray]:
    R, X = path_matrices(feeder)
    return np.diag(R).copy(), np.diag(X).copy()


def deepest_leaf(feeder: DistributionFeeder) -> int:
    """
    Node id of the leaf with the largest path impedance magnitude
    """
    topo = feeder_topology(feeder)
    r_path, x_path = path_impedance(feeder)
    leaves = [i for i in range(len(feeder.nodes))
              if topo.subtree[i].sum() == 1.0]
    best = max(leaves, key=lambda i: (np.hypot(r_path[i], x_path[i]), -i))
    return feeder.nodes[best].node_id


def build_lindistflow(feeder: DistributionFeeder,
                      limits: VoltageLimits = VoltageLimits()) -> LinearFeederModel:
    """
    Build the sensitivity model of a feeder on its own per-unit base.

    :param feeder: radial feeder
    :param limits: voltage limits the model will be checked against;
        they do not enter the sensitivities

    :return: LinearFeederModel with symmetric A and B
    """
    R, X = path_matrices(feeder)
    topo = feeder_topology(feeder)
    v0 = feeder.v0
    A = R / v0
    B = X / v0
    # loads are negative injections folded into the offset
    c = v0 - A @ topo.load_p - B @ topo.load_q
    n = len(feeder.nodes)
    model = LinearFeederModel(
        A=A,
        B=B,
        c=c,
        M=-np.ones(n),
        N=np.zeros(n),
        d=float(np.sum(topo.load_p)),
    )
    lowest = float(np.min(c))
    if lowest < limits.v_min:
        log.info('feeder "%s": linear voltage at nominal load drops to %.4f',
                 feeder.feeder_id, lowest)
    return model


def to_system_base(model: LinearFeederModel, kappa: float) -> LinearFeederModel:
    """
    Express the substation draw of a model in system per-unit.  Voltages
    are dimensionless and DER setpoints stay on the feeder base, so only
    M, N and d change.
    """
    return model._replace(M=kappa * model.M, N=kappa * model.N,
                          d=kappa * model.d)


def build_models(system: CoupledSystem) -> Tuple[LinearFeederModel, ...]:
    return tuple(
        to_system_base(build_lindistflow(f, system.limits), system.kappa(k))
        for k, f in enumerate(system.feeders))


def predict(model: LinearFeederModel, p: np.ndarray,
            q: np.ndarray) -> Tuple[np.ndarray, float]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(model.c)
    if p.shape != (n,) or q.shape != (n,):
        raise DimensionError(
            'model has %d nodes, got injections of shape %s and %s' % (
                n, p.shape, q.shape))
    v = model.A @ p + model.B @ q + model.c
    P_L = float(model.M @ p + model.N @ q + model.d)
    return v, P_L


def dump_model_csv(model: LinearFeederModel, directory: str) -> List[str]:
    """
    Write A, B, c, M, N and d as CSV matrices into directory, one row per
    matrix row, floats in repr() form.

    :return: paths written
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    for name in ('A', 'B', 'c', 'M', 'N', 'd'):
        path = os.path.join(directory, '%s.csv' % name)
        value = np.atleast_1d(getattr(model, name))
        if value.ndim == 1:
            value = value[:, None]
        with open(path, 'wb') as outf:
            out = unicodecsv.writer(outf, encoding='utf-8',
                                    lineterminator='\n')
            for row in value:
                out.writerow([repr(float(v)) for v in row])
        written.append(path)
    return written
