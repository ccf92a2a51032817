import numpy as np
import pytest
from scipy.optimize import brentq

from codispatch.errors import (
    CodispatchException,
    DimensionError,
    SweepConvergenceError,
    VoltageCollapseError,
)
from codispatch.linmodel import build_models
from codispatch.powerflow import (
    SlackAccount,
    ac_feedback,
    linear_feedback,
    slack_output,
    slack_residual,
    sweep_feeder,
    sweep_system,
)
from codispatch.tests import (
    CodispatchTestBase,
    build_transmission,
    couple,
    single_node_feeder,
)


class TestSweep(CodispatchTestBase):
    def test_case33bw_nominal(self):
        n = len(self.case33.nodes)
        flow = sweep_feeder(self.case33, np.zeros(n), np.zeros(n))
        lowest = int(np.argmin(flow.v))
        assert self.case33.nodes[lowest].node_id == 18
        assert flow.v[lowest] == pytest.approx(0.9131, abs=1e-3)
        assert flow.P_L == pytest.approx(0.39177, abs=1e-3)
        assert flow.losses > 0
        assert flow.P_L == pytest.approx(
            sum(nd.load_p for nd in self.case33.nodes) + flow.losses)

    def test_case69_nominal(self):
        n = len(self.case69.nodes)
        flow = sweep_feeder(self.case69, np.zeros(n), np.zeros(n))
        lowest = int(np.argmin(flow.v))
        assert self.case69.nodes[lowest].node_id == 65
        assert flow.v[lowest] == pytest.approx(0.9092, abs=1e-3)
        # about 225 kW of losses
        assert flow.losses == pytest.approx(0.0225, abs=5e-4)

    def test_iteration_limit(self):
        n = len(self.case33.nodes)
        with pytest.raises(SweepConvergenceError):
            sweep_feeder(self.case33, np.zeros(n), np.zeros(n), max_iter=1)

    def test_dimension(self):
        with pytest.raises(DimensionError):
            sweep_feeder(self.case33, np.zeros(3), np.zeros(3))

    def test_der_injection_raises_voltage(self):
        feeder = self.feeder18
        n = len(feeder.nodes)
        base = sweep_feeder(feeder, np.zeros(n), np.zeros(n))
        p = np.zeros(n)
        p[feeder.node_index()[18]] = 0.2
        fed = sweep_feeder(feeder, p, np.zeros(n))
        assert np.all(fed.v >= base.v)
        assert fed.P_L < base.P_L

    def test_branch_flow_fixed_point(self):
        feeder = self.case33
        n = len(feeder.nodes)
        index = feeder.node_index()
        p = np.zeros(n)
        q = np.zeros(n)
        for d in feeder.ders:
            p[index[d.node_id]] = 0.05
            q[index[d.node_id]] = -0.02
        flow = sweep_feeder(feeder, p, q, tol=1e-12, max_iter=500)
        P, Q, v = flow.branch_p, flow.branch_q, flow.v

        sent_p = np.array([nd.load_p for nd in feeder.nodes]) - p
        sent_q = np.array([nd.load_q for nd in feeder.nodes]) - q
        losses = 0.0
        for ln in feeder.lines:
            j = index[ln.child]
            if ln.parent == feeder.substation_id:
                v_from = feeder.v0
            else:
                v_from = v[index[ln.parent]]
                sent_p[index[ln.parent]] += P[j]
                sent_q[index[ln.parent]] += Q[j]
            ell = (P[j] ** 2 + Q[j] ** 2) / v_from ** 2
            assert ell >= 0.0
            losses += ln.r * ell
            sent_p[j] += ln.r * ell
            sent_q[j] += ln.x * ell
            # voltage drop along the line
            assert v[j] ** 2 == pytest.approx(
                v_from ** 2 - 2.0 * (ln.r * P[j] + ln.x * Q[j])
                + (ln.r ** 2 + ln.x ** 2) * ell, abs=1e-10)
        # what enters a line leaves through the node and its children
        assert np.allclose(sent_p, P, atol=1e-10)
        assert np.allclose(sent_q, Q, atol=1e-10)
        assert flow.losses == pytest.approx(losses)
        assert flow.losses > 0
        roots = [index[ln.child] for ln in feeder.lines
                 if ln.parent == feeder.substation_id]
        assert flow.P_L == pytest.approx(float(np.sum(P[roots])))
        assert flow.P_L == pytest.approx(
            float(np.sum(-p)) + sum(nd.load_p for nd in feeder.nodes)
            + flow.losses)

    @pytest.mark.parametrize('scale', [0.0, 0.5, 1.0, 2.0])
    def test_losses_nonnegative(self, scale):
        feeder = self.feeder18
        n = len(feeder.nodes)
        rng = np.random.default_rng(int(10 * scale))
        p = scale * rng.uniform(0.0, 0.1, n)
        q = scale * rng.uniform(-0.05, 0.05, n)
        flow = sweep_feeder(feeder, p, q)
        assert flow.losses >= 0.0
        assert flow.P_L == pytest.approx(
            float(np.sum(-p)) + sum(nd.load_p for nd in feeder.nodes)
            + flow.losses)


def test_single_line_matches_root():
    r = 0.01
    feeder = single_node_feeder(r, 0.0, load=(0.1, 0.0))
    flow = sweep_feeder(feeder, np.zeros(1), np.zeros(1), tol=1e-13)
    # sending-end flow P satisfies P = load + r P**2 at v0 = 1
    P = brentq(lambda s: s - 0.1 - r * s * s, 0.0, 1.0, xtol=1e-15)
    assert flow.P_L == pytest.approx(P, abs=1e-10)
    assert flow.v[0] == pytest.approx(
        np.sqrt(1.0 - 2.0 * r * P + r * r * P * P), abs=1e-10)
    assert flow.losses == pytest.approx(r * P * P, abs=1e-10)


def test_voltage_collapse():
    feeder = single_node_feeder(0.5, 0.5, load=(5.0, 5.0))
    with pytest.raises(VoltageCollapseError) as e:
        sweep_feeder(feeder, np.zeros(1), np.zeros(1))
    assert 'node "1"' in str(e.value)


def test_system_base_draw():
    ts = build_transmission([1.0], base_mva=100.0)
    feeder = single_node_feeder(0.01, 0.02, load=(0.3, 0.1), base_mva=10.0)
    system = couple(ts, [feeder])
    solution = sweep_system(system, np.zeros(1), np.zeros(1))
    flow = sweep_feeder(feeder, np.zeros(1), np.zeros(1))
    assert solution.P_L[0] == pytest.approx(0.1 * flow.P_L)

    fb = ac_feedback(np.zeros(1), np.zeros(1), system, 4)
    assert fb.tag == 4
    assert fb.source == 'ac'
    lin = linear_feedback(np.zeros(1), np.zeros(1), system,
                          build_models(system), 4)
    assert lin.source == 'linear'
    assert lin.P_L[0] == pytest.approx(0.1 * 0.3)


def test_system_dimension():
    system = couple(build_transmission([1.0]),
                    [single_node_feeder(0.01, 0.02)])
    with pytest.raises(DimensionError):
        sweep_system(system, np.zeros(2), np.zeros(2))


def test_slack_account():
    account = SlackAccount()
    assert not account.recorded
    with pytest.raises(CodispatchException):
        account.p0
    account.record(0.7)
    assert account.p0 == 0.7
    with pytest.raises(CodispatchException):
        account.record(0.8)
    assert SlackAccount.fixed(1.5).p0 == 1.5


def test_slack_residual():
    ts = build_transmission([1.0], demand=1.0)
    P_M = np.array([0.4])
    P_L = np.array([0.1])
    assert slack_output(ts, P_M, P_L) == pytest.approx(0.7)
    account = SlackAccount.fixed(0.7)
    assert slack_residual(account, ts, P_M, P_L) == pytest.approx(0.0)
    # more generation than needed gives a positive residual
    assert slack_residual(account, ts, P_M + 0.2, P_L) == pytest.approx(0.2)
    assert account.current == pytest.approx(0.5)
