import copy
import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config.errors import ShapeMismatch
from neural.tensor import DEFAULT_DTYPE, Tensor


@dataclass
class Param:
    name: str
    value: Tensor
    trainable: bool = True

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient, zeros when backward has not reached this param."""
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad


@dataclass
class ModelState:
    """Named parameters plus everything needed to resume or reproduce a run."""

    params: Dict[str, Param] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    opt_moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step_count: int = 0
    meta: Dict = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=trainable)
        self.params[name] = Param(name, value, trainable)
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    @property
    def dtype(self):
        for param in self.params.values():
            return param.value.dtype
        return np.dtype(DEFAULT_DTYPE)

    def trainable(self, prefix: str = "") -> List[Param]:
        return [p for p in self.params.values() if p.trainable and p.name.startswith(prefix)]

    def num_params(self, trainable_only: bool = True) -> int:
        return sum(p.value.size for p in self.params.values() if p.trainable or not trainable_only)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.value.zero_grad()

    def astype(self, dtype) -> "ModelState":
        """Copy with every tensor cast to `dtype` (64-bit shadow mode for grad checks)."""
        out = ModelState(config=copy.deepcopy(self.config), step_count=self.step_count,
                         meta=copy.deepcopy(self.meta))
        for p in self.params.values():
            out.params[p.name] = Param(p.name, Tensor(p.value.data.astype(dtype), requires_grad=p.trainable),
                                       p.trainable)
        out.opt_moments = {k: (m.astype(dtype), v.astype(dtype)) for k, (m, v) in self.opt_moments.items()}
        return out

    def snapshot(self) -> "ModelState":
        """Frozen deep copy: no tensor in the copy records gradients."""
        frozen = self.astype(self.dtype)
        for p in frozen.params.values():
            p.value.requires_grad = False
            p.trainable = False
        return frozen

    def copy(self) -> "ModelState":
        return self.astype(self.dtype)

    def checksum(self, prefix: str = "") -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                digest.update(name.encode("utf-8"))
                digest.update(np.ascontiguousarray(self.params[name].value.data).tobytes())
        return digest.hexdigest()

    def load_values(self, source: "ModelState", prefix: str = "", strict: bool = True) -> int:
        """Copy parameter values (not moments) from `source` for names under `prefix`."""
        copied = 0
        for name, param in self.params.items():
            if not name.startswith(prefix):
                continue
            if name not in source.params:
                if strict:
                    raise KeyError(f"parameter {name!r} missing from source state")
                continue
            incoming = source.params[name].value.data
            if incoming.shape != param.value.shape:
                raise ShapeMismatch(f"{name}: stored shape {incoming.shape} vs model shape {param.value.shape}")
            param.value.data = incoming.astype(param.value.dtype).copy()
            copied += 1
        return copied

    def blend_from(self, source: "ModelState", decay: float, prefix: str = "") -> None:
        """self <- decay * self + (1 - decay) * source, in place and without gradients."""
        for name, param in self.params.items():
            if name.startswith(prefix) and name in source.params:
                param.value.data = (decay * param.value.data
                                    + (1.0 - decay) * source.params[name].value.data).astype(param.value.dtype)


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_uniform_fan_in(rng: np.random.Generator, shape, fan_in: Optional[int] = None) -> np.ndarray:
    fan_in = fan_in or shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
