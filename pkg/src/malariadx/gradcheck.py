"""Central finite differences, used as an independent check on :func:`backward`."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Union

import numpy as np

from .tensor import Tensor

Scalar = Union[float, Tensor]


def _value(out: Scalar) -> float:
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_diff_gradient(f: Callable[[Tensor], Scalar], params: Tensor, step: float = 1e-5,
                         indices: Optional[Iterable[int]] = None) -> Tensor:
    """Estimate d f / d params element by element with central differences.

    ``indices`` restricts the estimate to a subset of flat positions; the
    remaining entries of the result are zero.  ``f`` must be deterministic.
    """
    base = np.array(params.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        hi = _value(f(Tensor(base)))
        flat[i] = orig - step
        lo = _value(f(Tensor(base)))
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return Tensor(grad.reshape(base.shape))


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative difference ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).ravel()
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
