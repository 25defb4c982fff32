"""Central finite-difference gradient checks (forward passes only)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensorcore import Tensor, backward


def numerical_grad(f: Callable[[], float], t: Tensor, step: float = 1e-5, entries=None) -> np.ndarray:
    """d f / d t by central differences; ``f`` re-reads ``t.data`` on each call.

    If ``entries`` (flat indices) is given only those components are estimated
    and the rest of the returned array is NaN.
    """
    base = t.data
    out = np.full(base.shape, np.nan)
    flat_ids = range(base.size) if entries is None else entries
    for i in flat_ids:
        arr = base.copy()
        orig = arr.flat[i]
        arr.flat[i] = orig + step
        t.data = arr
        fp = float(f())
        arr = base.copy()
        arr.flat[i] = orig - step
        t.data = arr
        fm = float(f())
        out.flat[i] = (fp - fm) / (2 * step)
    t.data = base
    return out


ZERO_GRAD_NORM = 1e-5  # above central-difference round-off (~eps * |f| / step)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ZERO_GRAD_NORM) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor).

    The floor keeps gradients that vanish identically (e.g. a key bias under
    softmax shift invariance) from turning round-off into a relative error of 1.
    """
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Relative error between reverse-mode and central-difference gradients, per tensor.

    ``max_entries`` limits how many components of each tensor are probed
    (sampled without replacement); None probes all of them.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn(), params=tensors)
    rng = np.random.default_rng(seed)
    errors = []
    for t in tensors:
        if max_entries is None or t.data.size <= max_entries:
            entries = np.arange(t.data.size)
        else:
            entries = np.sort(rng.choice(t.data.size, size=max_entries, replace=False))
        num = numerical_grad(lambda: loss_fn().data, t, step, entries)
        errors.append(relative_error(t.grad.ravel()[entries], num.ravel()[entries]))
    return errors


def directional_error(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5, seed: int = 0) -> float:
    """Compare <grad, v> with (f(x + h v) - f(x - h v)) / 2h for one random direction over all tensors."""
    for t in tensors:
        t.grad = None
    backward(loss_fn(), params=tensors)
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(t.shape) for t in tensors]
    analytic = sum(float((t.grad * v).sum()) for t, v in zip(tensors, dirs))
    bases = [t.data for t in tensors]

    def shifted(sign):
        for t, b, v in zip(tensors, bases, dirs):
            t.data = b + sign * step * v
        val = float(loss_fn().data)
        for t, b in zip(tensors, bases):
            t.data = b
        return val

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * step)
    return relative_error(np.array([analytic]), np.array([numeric]))
