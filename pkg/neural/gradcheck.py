"""Central finite-difference verification of tape gradients."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable

import numpy as np

from neural.state import Param
from neural.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
MAX_COORDS = 64
REL_ERR_FLOOR = 1e-8


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_FLOOR)


@dataclass
class ParamCheck:
    name: str
    n_coords: int
    max_rel_err: float
    grad_norm: float


@dataclass
class GradCheckReport:
    checks: Dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks.values()), default=0.0)

    @property
    def worst(self) -> str:
        if not self.checks:
            return ""
        return max(self.checks.values(), key=lambda c: c.max_rel_err).name

    def passed(self, threshold: float) -> bool:
        return self.max_rel_err < threshold

    def to_dict(self) -> Dict:
        return {
            "max_rel_err": self.max_rel_err,
            "worst": self.worst,
            "params": {
                name: {"n_coords": c.n_coords, "max_rel_err": c.max_rel_err, "grad_norm": c.grad_norm}
                for name, c in self.checks.items()
            },
        }


def grad_check(f: Callable[[], Tensor], params: Iterable[Param], seed: int = 0,
               h: float = FD_STEP, max_coords: int = MAX_COORDS) -> GradCheckReport:
    """
    Compare backward() gradients of the scalar `f()` against central
    differences on up to `max_coords` sampled coordinates per trainable param.

    `f` must be deterministic (fixed dropout seeds) and should run in 64-bit.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.value.zero_grad()
    f().backward()
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for p in params:
        flat = p.value.data.reshape(-1)
        size = flat.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, size=max_coords, replace=False)
        worst = 0.0
        grad_flat = analytic[p.name].reshape(-1)
        for idx in coords:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + h
                f_plus = f().item()
                flat[idx] = original - h
                f_minus = f().item()
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, relative_error(float(grad_flat[idx]), numeric))
        report.checks[p.name] = ParamCheck(p.name, len(coords), worst, float(np.linalg.norm(analytic[p.name])))
        logger.debug("grad check %s: %d coords, max rel err %.3e", p.name, len(coords), worst)
    return report
