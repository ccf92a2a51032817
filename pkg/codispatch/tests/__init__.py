import os

from typing import Iterable, Optional, Sequence, Tuple

from codispatch.cases import attach_feeders, load_feeder, load_transmission
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

TESTS_DIR = os.path.dirname(__file__)
SAMPLES_DIR = os.path.join(TESTS_DIR, 'samples')
CASES_DIR = os.path.join(os.path.dirname(TESTS_DIR), 'cases')


def sample_path(name: str) -> str:
    return os.path.join(SAMPLES_DIR, name)


def case_path(name: str) -> str:
    return os.path.join(CASES_DIR, name)


def build_transmission(costs: Sequence[float], demand: float = 1.0,
                       p_min: float = 0.0, p_max: float = 10.0,
                       extra_buses: Iterable[int] = (),
                       base_mva: float = 10.0,
                       slack_setpoint: float = 0.0) -> TransmissionSystem:
    """
    Slack bus 1, load bus 2 with -demand, generators "G1".. on buses
    10, 11, ...; extra_buses are empty buses hanging off bus 2.
    """
    buses = [Bus(1, 0.0), Bus(2, -demand)]
    lines = [TransmissionLine(1, 2)]
    gens = []
    for i, c in enumerate(costs):
        bus_id = 10 + i
        buses.append(Bus(bus_id, 0.0))
        lines.append(TransmissionLine(2, bus_id))
        gens.append(Generator(bus_id, c, p_min, p_max, gen_id='G%d' % (i + 1)))
    for bus_id in extra_buses:
        buses.append(Bus(bus_id, 0.0))
        lines.append(TransmissionLine(2, bus_id))
    return TransmissionSystem(tuple(buses), tuple(lines), tuple(gens),
                              slack_bus_id=1, base_mva=base_mva,
                              slack_setpoint=slack_setpoint)


def single_node_feeder(r: float, x: float, a_p: float = 1.0, a_q: float = 0.1,
                       p_box: Tuple[float, float] = (0.0, 1.0),
                       q_box: Tuple[float, float] = (-0.5, 0.5),
                       load: Tuple[float, float] = (0.0, 0.0),
                       host_bus: Optional[int] = 2, feeder_id: str = 'f1',
                       base_mva: float = 10.0) -> DistributionFeeder:
    return DistributionFeeder(
        feeder_id=feeder_id,
        host_bus_id=host_bus,
        nodes=(FeederNode(1, load[0], load[1]),),
        lines=(FeederLine(0, 1, r, x),),
        v0=1.0,
        ders=(Der(1, a_p, a_q, p_box[0], p_box[1], q_box[0], q_box[1]),),
        base_mva=base_mva,
    )


def chain_feeder(feeder_id: str, host_bus: int, n: int = 3,
                 der_nodes: Sequence[int] = (2, 3), r: float = 0.03,
                 x: float = 0.02, load: float = 0.02,
                 base_mva: float = 5.0) -> DistributionFeeder:
    """
    Substation 0 -> 1 -> ... -> n with a uniform load on every node
    """
    return DistributionFeeder(
        feeder_id=feeder_id,
        host_bus_id=host_bus,
        nodes=tuple(FeederNode(i, load, 0.5 * load) for i in range(1, n + 1)),
        lines=tuple(FeederLine(i - 1, i, r, x) for i in range(1, n + 1)),
        v0=1.0,
        ders=tuple(Der(i, 0.8, 0.2, 0.0, 0.5, -0.2, 0.2) for i in der_nodes),
        base_mva=base_mva,
    )


def couple(ts: TransmissionSystem, feeders: Sequence[DistributionFeeder] = (),
           limits: VoltageLimits = VoltageLimits()) -> CoupledSystem:
    return attach_feeders(ts, feeders, limits)


class CodispatchTestBase(object):
    def setup_method(self, method):
        """Method is called at class level before EACH test methods of the class are called.
        Loads the bundled cases.
        """
        self.case39 = load_transmission(case_path('case39.json'))
        self.case33 = load_feeder(case_path('case33bw.json'))
        self.feeder18 = load_feeder(case_path('feeder18.json'))
        self.case22 = load_feeder(case_path('case22.json'))
        self.case69 = load_feeder(case_path('case69.json'))
