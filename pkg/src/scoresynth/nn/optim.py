"""Adam with global-norm clipping and the transformer learning-rate schedule."""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .autograd import Tensor


class TrainingError(RuntimeError):
    """Non-finite gradients or losses."""


class ModelParams:
    """Named parameters plus Adam moment buffers and the step counter."""

    def __init__(self, tensors: Mapping[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9, clip_norm: Optional[float] = 1.0):
        self.tensors: Dict[str, Tensor] = dict(tensors)
        self.m = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.tensors.items()
        }

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for k in self.tensors:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, state: Mapping[str, np.ndarray], step: int) -> None:
        for k in self.tensors:
            self.m[k] = np.array(state[f"adam.m.{k}"], dtype=self.tensors[k].data.dtype)
            self.v[k] = np.array(state[f"adam.v.{k}"], dtype=self.tensors[k].data.dtype)
        self.step = step


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        flat = g.reshape(-1)
        total += float(np.dot(flat, flat))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    if norm <= max_norm or norm == 0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params: ModelParams, grads: Optional[Mapping[str, np.ndarray]] = None,
              lr: float = 1e-3) -> float:
    """Clip, then apply one in-place Adam update; returns the pre-clip grad norm."""
    if grads is None:
        grads = params.grads()
    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise TrainingError(f"non-finite gradient in {', '.join(bad[:3])}")
    scale = 1.0
    if params.clip_norm is not None and norm > params.clip_norm:
        scale = params.clip_norm / norm
    params.step += 1
    b1, b2 = params.beta1, params.beta2
    c1 = 1.0 - b1**params.step
    c2 = 1.0 - b2**params.step
    for k, t in params.tensors.items():
        g = grads[k]
        m = params.m[k]
        v = params.v[k]
        tmp = np.multiply(g, scale * (1.0 - b1), dtype=m.dtype)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= scale * scale * (1.0 - b2)
        v *= b2
        v += tmp
        # tmp <- lr/c1 · m / (sqrt(v/c2) + eps)
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += params.eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        t.data -= tmp
    return norm


def lr_schedule(step: int, model_dim: int = 128, warmup: int = 4000,
                anneal_steps: Sequence[int] = (), anneal_rate: float = 1.0) -> float:
    """``dim^-0.5 · min(step^-0.5, step · warmup^-1.5)``, times ``anneal_rate``
    once for every boundary in ``anneal_steps`` already passed."""
    if step < 1:
        raise ValueError("learning-rate schedule is defined for step ≥ 1")
    base = model_dim**-0.5 * min(step**-0.5, step * warmup**-1.5)
    passed = sum(1 for s in anneal_steps if step > s)
    return base * anneal_rate**passed
