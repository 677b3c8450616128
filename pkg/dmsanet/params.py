"""Named parameter collections and seeded initialisers."""
import logging
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ShapeMismatch
from .tensor import Tensor, resolve_dtype

logger = logging.getLogger(__name__)


class ParamSet:
    """Ordered mapping of unique names to tensors.

    Tensors are held by reference, so a ParamSet built from a network's
    layers can be updated in place by an optimiser.
    """

    def __init__(self, items: Optional[Iterable[Tuple[str, Tensor]]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, value in items or ():
            self.add(name, value)

    def add(self, name: str, value: Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name '{name}'")
        if not name:
            raise KeyError("parameter names must be non-empty")
        self._tensors[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._tensors[name] = value

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._tensors.items())

    def numel(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def extend(self, other: "ParamSet") -> None:
        for name, t in other.items():
            self.add(name, t)

    def copy(self) -> "ParamSet":
        return ParamSet((name, t.copy()) for name, t in self._tensors.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((name, np.zeros_like(t)) for name, t in self._tensors.items())

    def assign(self, other: "ParamSet", cast: bool = False) -> None:
        """Copy values from ``other`` into the tensors held here, in place.

        Dtypes must match unless ``cast`` is set, in which case values are
        converted to the dtype held here.
        """
        missing = [n for n in self._tensors if n not in other]
        extra = [n for n in other if n not in self._tensors]
        if missing or extra:
            raise ShapeMismatch(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in self._tensors.items():
            src = other[name]
            if src.shape != t.shape:
                raise ShapeMismatch(f"'{name}': expected shape {t.shape}, got {src.shape}")
            if src.dtype != t.dtype and not cast:
                raise ShapeMismatch(f"'{name}': expected dtype {t.dtype}, got {src.dtype}")
        for name, t in self._tensors.items():
            src = other[name]
            if src.dtype != t.dtype:
                logger.warning(f"'{name}': casting {src.dtype} to {t.dtype}")
            np.copyto(t, src, casting="unsafe")

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t))) for t in self._tensors.values())

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t.astype(np.float64) ** 2)) for t in self._tensors.values())))


def kaiming_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype="float32") -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(resolve_dtype(dtype))


def lecun_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype="float32") -> Tensor:
    std = np.sqrt(1.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(resolve_dtype(dtype))


def constant(shape: Tuple[int, ...], value: float, dtype="float32") -> Tensor:
    return np.full(shape, value, dtype=resolve_dtype(dtype))
