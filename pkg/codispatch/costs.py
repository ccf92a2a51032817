from typing import Any, Callable, Dict, NamedTuple, Optional, Sequence

import numpy as np

from codispatch.errors import CostModelError


# Codifies device cost functions available to generators and DERs:
#    'value': cost(x, coefficient)
#    'gradient': d cost / dx (x, coefficient)
#    'modulus': strong-convexity modulus (coefficient), None if unknown
#    'curvature': upper bound on the second derivative (coefficient)
class CostModel(NamedTuple):
    value: Callable[[Any, Any], Any]
    gradient: Callable[[Any, Any], Any]
    modulus: Optional[Callable[[Any], Any]] = None
    curvature: Optional[Callable[[Any], Any]] = None


def _quadratic_value(x: Any, a: Any) -> Any:
    return a * x * x


def _quadratic_gradient(x: Any, a: Any) -> Any:
    return 2.0 * a * x


def _quadratic_modulus(a: Any) -> Any:
    return 2.0 * a


cost_models: Dict[str, CostModel] = {
    'quadratic': CostModel(
        _quadratic_value, _quadratic_gradient,
        _quadratic_modulus, _quadratic_modulus),
}


def register_cost_model(name: str, model: CostModel, replace: bool = False):
    if name in cost_models and not replace:
        raise CostModelError(
            'cost model "%s" is already registered' % name)
    cost_models[name] = model


def get_cost_model(name: str) -> CostModel:
    try:
        return cost_models[name]
    except KeyError:
        raise CostModelError('cost model "%s" not found' % name)


class CostTable(object):
    """
    Vectorized cost evaluation over a block of devices that may use
    different registered cost models.

    :param names: cost model name per device
    :param coefficients: cost coefficient per device
    :param labels: device names used in error messages
    """
    def __init__(self, names: Sequence[str], coefficients: np.ndarray,
                 labels: Sequence[str]):
        self.names = tuple(names)
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.labels = tuple(labels)
        self._groups = []
        for name in sorted(set(self.names)):
            mask = np.array([n == name for n in self.names], dtype=bool)
            self._groups.append((get_cost_model(name), mask, name))

    def _single(self) -> Optional[CostModel]:
        if len(self._groups) == 1:
            return self._groups[0][0]
        return None

    def value(self, x: np.ndarray) -> float:
        single = self._single()
        if single is not None:
            return float(np.sum(single.value(x, self.coefficients)))
        total = 0.0
        for model, mask, _name in self._groups:
            total += float(np.sum(model.value(x[mask], self.coefficients[mask])))
        return total

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if not self._groups:
            return np.zeros_like(x)
        single = self._single()
        if single is not None:
            return single.gradient(x, self.coefficients)
        out = np.empty_like(x)
        for model, mask, _name in self._groups:
            out[mask] = model.gradient(x[mask], self.coefficients[mask])
        return out

    def moduli(self) -> np.ndarray:
        return self._per_device('modulus')

    def curvatures(self) -> np.ndarray:
        return self._per_device('curvature')

    def _per_device(self, field: str) -> np.ndarray:
        out = np.empty(len(self.names))
        for model, mask, name in self._groups:
            fn = getattr(model, field)
            if fn is None:
                first = self.labels[int(np.flatnonzero(mask)[0])]
                raise CostModelError(
                    'cost model "%s" used by %s has no %s' % (
                        name, first, field))
            out[mask] = fn(self.coefficients[mask])
        return out

    def __len__(self) -> int:
        return len(self.names)
