"""Central finite-difference check of backpropagated gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .autograd import Tensor, no_grad

Params = Union[Sequence[Tensor], Mapping[str, Tensor]]


def grad_check(f: Callable[[], Tensor], params: Params, eps: float = 1e-5,
               max_coords: Optional[int] = 20, seed: int = 0) -> float:
    """Max relative error between backprop and finite-difference gradients.

    ``f`` recomputes a scalar from the current parameter values. Up to
    ``max_coords`` coordinates per tensor are sampled (all if None). The error
    for one coordinate is ``|fd - bp| / max(|fd|, |bp|, 1e-8)``.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        t.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise ValueError("function value is not finite")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        bp_all = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + eps
                plus = float(f().data)
                flat[c] = orig - eps
                minus = float(f().data)
            flat[c] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise ValueError("function value is not finite under perturbation")
            fd = (plus - minus) / (2 * eps)
            bp = float(bp_all.reshape(-1)[c])
            err = abs(fd - bp) / max(abs(fd), abs(bp), 1e-8)
            worst = max(worst, err)
    return worst
