"""
Solver settings, read from the "solver" block of a scenario file and
overridden from the command line.
"""
from typing import Any, Mapping, NamedTuple

from codispatch.errors import ConfigurationError

LOG_FORMAT = '%(asctime)s %(levelname)-5.5s [%(name)s] %(message)s'
LOG_LEVEL_ENV = 'CODISPATCH_LOG_LEVEL'

FEEDBACK_MODES = ('linear', 'ac')
SLACK_MODES = ('fixed', 'record')


class SolverConfig(NamedTuple):
    epsilon: float = 5e-4
    eta: float = 0.0
    max_iter: int = 20000
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    tol_balance: float = 1e-6
    feedback: str = 'linear'
    # False zeroes lambda in the DER prices only, generators still see it
    der_price_participation: bool = True
    blowup: float = 1e6
    slack_mode: str = 'fixed'
    sweep_tol: float = 1e-8
    sweep_max_iter: int = 100


_FLOATS = ('epsilon', 'eta', 'tol_primal', 'tol_dual', 'tol_balance',
           'blowup', 'sweep_tol')
_INTS = ('max_iter', 'sweep_max_iter')
_BOOLS = ('der_price_participation',)


def solver_config(data: Mapping[str, Any],
                  base: SolverConfig = SolverConfig()) -> SolverConfig:
    """
    Build a validated SolverConfig from a mapping of settings.

    :param data: settings to apply; None values are ignored
    :param base: config the settings are applied on top of

    Raises ConfigurationError on unknown keys or invalid values.
    """
    changes = {}
    for key, value in data.items():
        if value is None:
            continue
        if key not in SolverConfig._fields:
            raise ConfigurationError('unknown solver setting "%s"' % key)
        if key in _FLOATS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(
                    'solver setting "%s" must be a number, not %r' % (
                        key, value))
            value = float(value)
        elif key in _INTS:
            if isinstance(value, bool) or not isinstance(value, int):
                if isinstance(value, float) and value.is_integer():
                    value = int(value)
                else:
                    raise ConfigurationError(
                        'solver setting "%s" must be an integer, not %r' % (
                            key, value))
        elif key in _BOOLS:
            if not isinstance(value, bool):
                raise ConfigurationError(
                    'solver setting "%s" must be true or false' % key)
        changes[key] = value
    return validate_config(base._replace(**changes))


def validate_config(cfg: SolverConfig) -> SolverConfig:
    if not cfg.epsilon > 0:
        raise ConfigurationError('epsilon must be positive')
    if cfg.eta < 0:
        raise ConfigurationError('eta must not be negative')
    if cfg.max_iter < 0:
        raise ConfigurationError('max_iter must not be negative')
    for key in ('tol_primal', 'tol_dual', 'tol_balance', 'blowup', 'sweep_tol'):
        if not getattr(cfg, key) > 0:
            raise ConfigurationError('%s must be positive' % key)
    if cfg.sweep_max_iter < 1:
        raise ConfigurationError('sweep_max_iter must be at least 1')
    if cfg.feedback not in FEEDBACK_MODES:
        raise ConfigurationError(
            'feedback must be one of %s, not "%s"' % (
                ', '.join(FEEDBACK_MODES), cfg.feedback))
    if cfg.slack_mode not in SLACK_MODES:
        raise ConfigurationError(
            'slack_mode must be one of %s, not "%s"' % (
                ', '.join(SLACK_MODES), cfg.slack_mode))
    return cfg
