import logging

from typing import Iterable, List, NamedTuple, Optional, Sequence

from codispatch.datatypes import CoupledSystem
from codispatch.errors import ConfigurationError

log = logging.getLogger(__name__)

GENERATOR_OUTAGE = 'generator-outage'
DER_CAPACITY_SCALE = 'der-capacity-scale'
EVENT_KINDS = (GENERATOR_OUTAGE, DER_CAPACITY_SCALE)
ALL_DERS = 'all'


class ScenarioEvent(NamedTuple):
    iteration: int
    kind: str
    target: str = ALL_DERS
    factor: Optional[float] = None


def check_event(event: ScenarioEvent, system: Optional[CoupledSystem] = None,
                max_iter: Optional[int] = None) -> ScenarioEvent:
    where = 'event "%s" at iteration %s' % (event.kind, event.iteration)
    if event.kind not in EVENT_KINDS:
        raise ConfigurationError('unknown event kind "%s"' % event.kind)
    if event.iteration < 0:
        raise ConfigurationError('%s: iteration must not be negative' % where)
    if max_iter is not None and event.iteration >= max_iter:
        raise ConfigurationError(
            '%s is beyond the iteration limit %d' % (where, max_iter))
    if event.kind == DER_CAPACITY_SCALE:
        if event.factor is None or not event.factor > 0:
            raise ConfigurationError('%s: factor must be positive' % where)
        if event.target != ALL_DERS:
            raise ConfigurationError(
                '%s: only target "%s" is supported' % (where, ALL_DERS))
    elif system is not None and \
            event.target not in system.transmission.generator_ids():
        raise ConfigurationError(
            '%s: generator "%s" not found' % (where, event.target))
    return event


def events_at(events: Iterable[ScenarioEvent], iteration: int) -> List[ScenarioEvent]:
    return [e for e in events if e.iteration == iteration]


def last_event_iteration(events: Sequence[ScenarioEvent]) -> int:
    return max([e.iteration for e in events], default=0)


def apply_event(system: CoupledSystem, event: ScenarioEvent) -> CoupledSystem:
    if event.kind == GENERATOR_OUTAGE:
        log.info('iteration %d: generator "%s" goes offline',
                 event.iteration, event.target)
        return system.with_generator_offline(event.target)
    assert event.factor is not None
    log.info('iteration %d: DER capacity scaled by %g',
             event.iteration, event.factor)
    return system.with_der_capacity_scale(event.factor)
