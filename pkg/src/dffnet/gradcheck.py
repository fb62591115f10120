"""Finite-difference validation of backpropagated gradients.

The checker re-evaluates the loss with each leaf coordinate perturbed by a
central difference and compares against the gradient the graph produced.
Finite differences are invalid within ~1e-6 of a relu/max kink, so callers
must either keep test points away from kinks or pass a skip mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tensor

DEFAULT_TOLERANCE = 1e-4
BASE_STEP = 1e-6
DENOM_FLOOR = 1e-8


def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    Raises if any evaluation is non-finite, naming the offending coordinate.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    base = np.array(x.data, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    probe = Tensor(base, requires_grad=False)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = _scalar(f(probe))
        flat[i] = orig - h
        f_minus = _scalar(f(probe))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite value at coordinate {i}: f+={f_plus}, f-={f_minus}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


@dataclass
class LeafReport:
    name: str
    max_rel_err: float
    worst_index: int
    checked: int
    skipped: int


@dataclass
class GradCheckReport:
    tolerance: float
    leaves: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(leaf.max_rel_err <= self.tolerance for leaf in self.leaves)

    @property
    def max_rel_err(self) -> float:
        return max((leaf.max_rel_err for leaf in self.leaves), default=0.0)

    def failures(self) -> list:
        return [leaf for leaf in self.leaves if leaf.max_rel_err > self.tolerance]

    def __str__(self) -> str:
        lines = []
        for leaf in self.leaves:
            status = "PASS" if leaf.max_rel_err <= self.tolerance else "FAIL"
            lines.append(
                f"  {status} {leaf.name}: max_rel_err={leaf.max_rel_err:.3e}"
                f" ({leaf.checked} coords, {leaf.skipped} skipped)"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"  => {verdict} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    skip_mask: Optional[Mapping[str, np.ndarray]] = None,
    base_step: float = BASE_STEP,
) -> GradCheckReport:
    """Compare backpropagated gradients against central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current ``leaves``
    values on every call; the checker perturbs ``leaf.data`` in place. Each
    coordinate uses step ``base_step`` * max(1, |x_i|); deep compositions
    with near-zero true gradients need a step above the default 1e-6 or
    the difference drowns in float64 roundoff. The per-leaf figure of
    merit is max over coordinates of |g_ad - g_fd| / max(|g_fd|, 1e-8).
    Requires float64 leaves.
    """
    for name, leaf in leaves.items():
        if leaf.dtype != np.float64:
            raise TypeError(f"gradient check requires float64 leaves; {name!r} is {leaf.dtype}")
        if not leaf.requires_grad:
            raise ValueError(f"leaf {name!r} does not require grad")

    for leaf in leaves.values():
        leaf.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }

    report = GradCheckReport(tolerance=tolerance)
    for name, leaf in leaves.items():
        flat = leaf.data.reshape(-1)
        g_ad = analytic[name].reshape(-1)
        mask = None
        if skip_mask is not None and name in skip_mask:
            mask = np.asarray(skip_mask[name], dtype=bool).reshape(-1)
        worst = 0.0
        worst_index = -1
        checked = 0
        skipped = 0
        for i in range(flat.size):
            if mask is not None and mask[i]:
                skipped += 1
                continue
            orig = flat[i]
            h = base_step * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(g_ad[i] - fd) / max(abs(fd), DENOM_FLOOR)
            checked += 1
            if rel > worst:
                worst = rel
                worst_index = i
        report.leaves.append(LeafReport(name, worst, worst_index, checked, skipped))
    return report
