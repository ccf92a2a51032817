"""
Immutable domain types for the coupled transmission/distribution system.

Sign convention used everywhere: power injected into the network is
positive and consumption is negative.  A feeder's substation draw P_L is
the net power it takes from its host bus, so positive means load.
"""
from typing import NamedTuple, Tuple, Optional, Dict, List


class Bus(NamedTuple):
    bus_id: int
    # uncontrollable injection P0, p.u. on the system base
    injection: float = 0.0


class TransmissionLine(NamedTuple):
    from_bus: int
    to_bus: int


class Generator(NamedTuple):
    bus_id: int
    # quadratic cost coefficient, cost = c * P**2
    cost: float
    p_min: float
    p_max: float
    setpoint_initial: float = 0.0
    online: bool = True
    gen_id: str = ''
    cost_model: str = 'quadratic'

    def box(self) -> Tuple[float, float]:
        if not self.online:
            return 0.0, 0.0
        return self.p_min, self.p_max


class TransmissionSystem(NamedTuple):
    buses: Tuple[Bus, ...]
    lines: Tuple[TransmissionLine, ...]
    generators: Tuple[Generator, ...]
    slack_bus_id: int
    base_mva: float
    slack_setpoint: float = 0.0
    name: str = ''

    def bus_ids(self) -> List[int]:
        return [b.bus_id for b in self.buses]

    def total_injection(self) -> float:
        total = 0.0
        for b in self.buses:
            total += b.injection
        return total

    def generator_ids(self) -> List[str]:
        return [g.gen_id for g in self.generators]

    def generator_position(self, gen_id: str) -> int:
        for i, g in enumerate(self.generators):
            if g.gen_id == gen_id:
                return i
        raise KeyError(gen_id)


class FeederNode(NamedTuple):
    node_id: int
    # base load as consumption, p.u. on the feeder base
    load_p: float = 0.0
    load_q: float = 0.0


class FeederLine(NamedTuple):
    parent: int
    child: int
    r: float
    x: float


class Der(NamedTuple):
    node_id: int
    a_p: float
    a_q: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    capacity_scale: float = 1.0
    cost_model: str = 'quadratic'

    def box(self) -> Tuple[float, float, float, float]:
        """
        Effective (p_min, p_max, q_min, q_max) after capacity scaling
        """
        s = self.capacity_scale
        return (s * self.p_min, s * self.p_max,
                s * self.q_min, s * self.q_max)


class DistributionFeeder(NamedTuple):
    feeder_id: str
    host_bus_id: Optional[int]
    nodes: Tuple[FeederNode, ...]
    lines: Tuple[FeederLine, ...]
    v0: float
    ders: Tuple[Der, ...]
    base_mva: float
    substation_id: int = 0
    name: str = ''

    def node_ids(self) -> List[int]:
        return [n.node_id for n in self.nodes]

    def node_index(self) -> Dict[int, int]:
        return {n.node_id: i for i, n in enumerate(self.nodes)}

    def der_at(self, node_id: int) -> Optional[Der]:
        for d in self.ders:
            if d.node_id == node_id:
                return d
        return None


class VoltageLimits(NamedTuple):
    v_min: float = 0.95
    v_max: float = 1.05


class CoupledSystem(NamedTuple):
    """
    A transmission system with its feeders attached.

    DER decision vectors are indexed globally: feeder k owns positions
    offsets()[k] .. offsets()[k] + N_k - 1, one slot per feeder node in the
    order of feeder.nodes.  Slots without a DER keep a [0, 0] box.
    """
    transmission: TransmissionSystem
    feeders: Tuple[DistributionFeeder, ...]
    limits: VoltageLimits = VoltageLimits()

    @property
    def n_der(self) -> int:
        return sum(len(f.nodes) for f in self.feeders)

    def offsets(self) -> List[int]:
        out = []
        total = 0
        for f in self.feeders:
            out.append(total)
            total += len(f.nodes)
        return out

    def locate(self, position: int) -> Tuple[int, int]:
        """
        Global node slot -> (feeder index, local node index)
        """
        if position < 0:
            raise IndexError(position)
        for k, f in enumerate(self.feeders):
            if position < len(f.nodes):
                return k, position
            position -= len(f.nodes)
        raise IndexError(position)

    def global_index(self, feeder: int, node: int) -> int:
        if not 0 <= node < len(self.feeders[feeder].nodes):
            raise IndexError(node)
        return self.offsets()[feeder] + node

    def kappa(self, feeder: int) -> float:
        """
        Ratio of a feeder base to the system base, used to express
        substation draw in system per-unit.
        """
        return self.feeders[feeder].base_mva / self.transmission.base_mva

    def feeder_position(self, feeder_id: str) -> int:
        for k, f in enumerate(self.feeders):
            if f.feeder_id == feeder_id:
                return k
        raise KeyError(feeder_id)

    def with_generator_offline(self, gen_id: str) -> 'CoupledSystem':
        ts = self.transmission
        i = ts.generator_position(gen_id)
        gens = list(ts.generators)
        gens[i] = gens[i]._replace(online=False)
        return self._replace(
            transmission=ts._replace(generators=tuple(gens)))

    def with_der_capacity_scale(self, factor: float) -> 'CoupledSystem':
        return self._replace(feeders=tuple(
            f._replace(ders=tuple(
                d._replace(capacity_scale=d.capacity_scale * factor)
                for d in f.ders))
            for f in self.feeders))
