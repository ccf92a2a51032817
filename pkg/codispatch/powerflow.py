"""
Nonlinear power flow used as feedback and as a verification oracle.

Feeders get a vectorized backward/forward sweep on the branch-flow
equations.  The transmission level is the lossless balance, with the
slack bus output held at a recorded or scheduled value.
"""
import logging

from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from codispatch.datatypes import CoupledSystem, DistributionFeeder, TransmissionSystem
from codispatch.errors import (
    CodispatchException,
    DimensionError,
    SweepConvergenceError,
    VoltageCollapseError,
)
from codispatch.linmodel import LinearFeederModel, feeder_topology, predict

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100


class FeederFlow(NamedTuple):
    v: np.ndarray
    P_L: float
    losses: float
    iterations: int
    residual: float
    # sending-end branch flows, indexed by receiving node
    branch_p: np.ndarray
    branch_q: np.ndarray


class AcSolution(NamedTuple):
    v: Tuple[np.ndarray, ...]
    P_L: np.ndarray
    losses: np.ndarray
    iterations: int
    residual: float


class Feedback(NamedTuple):
    """
    Voltages and substation draws (system base) for one iteration
    """
    tag: int
    v: Tuple[np.ndarray, ...]
    P_L: np.ndarray
    source: str


def sweep_feeder(feeder: DistributionFeeder, p: np.ndarray, q: np.ndarray,
                 tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER) -> FeederFlow:
    """
    Backward/forward sweep for one radial feeder.

    :param feeder: radial feeder with its base loads
    :param p: DER real injections per node, feeder p.u.
    :param q: DER reactive injections per node, feeder p.u.
    :param tol: stop when no voltage magnitude moves more than this
    :param max_iter: sweeps allowed before giving up

    :return: FeederFlow on the feeder base

    Raises VoltageCollapseError when a squared voltage goes non-positive
    and SweepConvergenceError when max_iter is exhausted.
    """
    if tol <= 0:
        raise CodispatchException('sweep tolerance must be positive')
    topo = feeder_topology(feeder)
    n = len(topo.r)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (n,) or q.shape != (n,):
        raise DimensionError(
            'feeder "%s" has %d nodes, got injections of shape %s and %s' % (
                feeder.feeder_id, n, p.shape, q.shape))

    S = topo.subtree
    r = topo.r
    x = topo.x
    z2 = r * r + x * x
    root = topo.parent < 0
    parent = np.where(root, 0, topo.parent)
    # net consumption per node
    dp = topo.load_p - p
    dq = topo.load_q - q
    v0sq = feeder.v0 * feeder.v0

    v = np.full(n, feeder.v0)
    ell = np.zeros(n)
    change = np.inf
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        P = S @ (dp + r * ell)
        Q = S @ (dq + x * ell)
        w = v0sq - S.T @ (2.0 * (r * P + x * Q) - z2 * ell)
        if np.any(w <= 0):
            bad = int(np.flatnonzero(w <= 0)[0])
            raise VoltageCollapseError(
                'feeder "%s": voltage collapse at node "%s" in sweep %d' % (
                    feeder.feeder_id, feeder.nodes[bad].node_id, iterations))
        v_new = np.sqrt(w)
        w_parent = np.where(root, v0sq, w[parent])
        ell = (P * P + Q * Q) / w_parent
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        if change < tol:
            break
    else:
        raise SweepConvergenceError(
            'feeder "%s": sweep did not converge in %d iterations '
            '(last voltage change %.3g)' % (
                feeder.feeder_id, max_iter, change))

    P = S @ (dp + r * ell)
    Q = S @ (dq + x * ell)
    losses = float(np.sum(r * ell))
    log.debug('feeder "%s": sweep converged in %d iterations',
              feeder.feeder_id, iterations)
    return FeederFlow(
        v=v,
        P_L=float(np.sum(P[root])),
        losses=losses,
        iterations=iterations,
        residual=change,
        branch_p=P,
        branch_q=Q,
    )


def sweep_system(system: CoupledSystem, p: np.ndarray, q: np.ndarray,
                 tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER) -> AcSolution:
    """
    Sweep every feeder.  P_L and losses are returned on the system base.
    """
    vs = []
    pl = []
    losses = []
    iterations = 0
    residual = 0.0
    for k, (pk, qk) in enumerate(split_injections(system, p, q)):
        flow = sweep_feeder(system.feeders[k], pk, qk, tol, max_iter)
        kappa = system.kappa(k)
        vs.append(flow.v)
        pl.append(kappa * flow.P_L)
        losses.append(kappa * flow.losses)
        iterations = max(iterations, flow.iterations)
        residual = max(residual, flow.residual)
    return AcSolution(tuple(vs), np.array(pl), np.array(losses),
                      iterations, residual)


def split_injections(system: CoupledSystem, p: np.ndarray,
                     q: np.ndarray) -> Sequence[Tuple[np.ndarray, np.ndarray]]:
    """
    Per-feeder copies of the global injection vectors
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (system.n_der,) or q.shape != (system.n_der,):
        raise DimensionError(
            'system has %d DER slots, got injections of shape %s and %s' % (
                system.n_der, p.shape, q.shape))
    out = []
    for start, f in zip(system.offsets(), system.feeders):
        stop = start + len(f.nodes)
        out.append((p[start:stop].copy(), q[start:stop].copy()))
    return out


def ac_feedback(p: np.ndarray, q: np.ndarray, system: CoupledSystem,
                tag: int, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> Feedback:
    solution = sweep_system(system, p, q, tol, max_iter)
    return Feedback(tag, solution.v, solution.P_L, 'ac')


def linear_feedback(p: np.ndarray, q: np.ndarray, system: CoupledSystem,
                    models: Sequence[LinearFeederModel], tag: int) -> Feedback:
    """
    Feedback from the linear models, which must be on the system base
    """
    vs = []
    pl = []
    for model, (pk, qk) in zip(models, split_injections(system, p, q)):
        v, P_L = predict(model, pk, qk)
        vs.append(v)
        pl.append(P_L)
    return Feedback(tag, tuple(vs), np.array(pl), 'linear')


class SlackAccount(object):
    """
    Slack bus bookkeeping.  P0_slack is set exactly once, either from a
    schedule (fixed) or from the initial operating point (record).
    """
    def __init__(self, p0: Optional[float] = None):
        self._p0 = None if p0 is None else float(p0)
        self.current: Optional[float] = None

    @classmethod
    def fixed(cls, setpoint: float) -> 'SlackAccount':
        return cls(setpoint)

    @property
    def recorded(self) -> bool:
        return self._p0 is not None

    @property
    def p0(self) -> float:
        if self._p0 is None:
            raise CodispatchException(
                'initial slack output has not been recorded')
        return self._p0

    def record(self, value: float):
        if self._p0 is not None:
            raise CodispatchException(
                'initial slack output is already recorded as %r' % self._p0)
        self._p0 = float(value)
        self.current = self._p0
        log.info('recorded initial slack output %.6f p.u.', self._p0)


def slack_output(ts: TransmissionSystem, P_M: np.ndarray,
                 P_L: np.ndarray) -> float:
    """
    Slack bus output under the lossless transmission balance
    """
    return float(np.sum(P_L) - np.sum(P_M) - ts.total_injection())


def balance_residual(p0: float, ts: TransmissionSystem,
                     P_M: np.ndarray, P_L: np.ndarray) -> float:
    """
    P0_slack - P_slack(P_M, P_L): positive when generation exceeds what
    keeps the slack bus at p0
    """
    return p0 - slack_output(ts, P_M, P_L)


def slack_residual(account: SlackAccount, ts: TransmissionSystem,
                   P_M: np.ndarray, P_L: np.ndarray) -> float:
    """
    balance_residual against the account, updating its current output
    """
    account.current = slack_output(ts, P_M, P_L)
    return account.p0 - account.current
