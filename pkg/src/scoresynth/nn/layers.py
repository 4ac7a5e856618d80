"""Layer vocabulary shared by the alignment and synthesis models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor

NEG_INF = -1e9


class Module:
    """Minimal parameter container with train/eval switching."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, n_in, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 1e-2):
        self.table = Parameter(rng.normal(0.0, std, size=(num, dim)))

    @property
    def num(self) -> int:
        return self.table.shape[0]

    def __call__(self, indices) -> Tensor:
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num):
            raise IndexError(f"embedding index out of range [0, {self.num})")
        return ag.embedding(self.table, idx)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return ag.dropout(x, self.p, self.rng, self.training)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd for 'same' padding")
        self.weight = Parameter(_uniform(rng, c_in * kernel, (kernel, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.weight, self.bias)


@dataclass(frozen=True)
class TransformerLayerConfig:
    model_dim: int = 128
    mha_hidden: int = 128
    num_heads: int = 2
    ffn_hidden: int = 512
    ffn_kernel_sizes: Tuple[int, int] = (9, 1)
    dropout: float = 0.2

    def __post_init__(self):
        if self.mha_hidden % self.num_heads:
            raise ValueError("mha_hidden must be divisible by num_heads")
        if any(k % 2 == 0 for k in self.ffn_kernel_sizes):
            raise ValueError("FFN kernel sizes must be odd")


def key_padding_bias(mask: Optional[np.ndarray], dtype) -> Optional[np.ndarray]:
    """``mask`` is ``B × L`` with True at padded positions."""
    if mask is None:
        return None
    return np.where(mask, NEG_INF, 0.0).astype(dtype)[:, None, None, :]


class MultiHeadAttention(Module):
    """Self-attention sub-layer: attention → dropout → residual add → layer norm."""

    def __init__(self, cfg: TransformerLayerConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, h = cfg.model_dim, cfg.mha_hidden
        self.q = Linear(d, h, rng)
        self.k = Linear(d, h, rng)
        self.v = Linear(d, h, rng)
        self.out = Linear(h, d, rng)
        self.dropout = Dropout(cfg.dropout, rng)
        self.norm = LayerNorm(d)
        self.last_attention: Optional[np.ndarray] = None

    def attend(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.cfg.model_dim:
            raise ValueError(f"expected B × L × {self.cfg.model_dim} input, got {x.shape}")
        B, L, _ = x.shape
        nh = self.cfg.num_heads
        dh = self.cfg.mha_hidden // nh

        def heads(t):
            return t.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = ag.softmax(scores, axis=-1, bias=key_padding_bias(mask, x.data.dtype))
        self.last_attention = attn.data
        ctx = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, nh * dh)
        return self.out(ctx)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.norm(x + self.dropout(self.attend(x, mask)))


class ConvFeedForward(Module):
    """Position-wise FFN of two 1-D convolutions: conv(k=9) → ReLU → conv(k=1),
    then dropout, residual add and layer norm."""

    def __init__(self, cfg: TransformerLayerConfig, rng: np.random.Generator):
        k1, k2 = cfg.ffn_kernel_sizes
        self.conv1 = Conv1d(cfg.model_dim, cfg.ffn_hidden, k1, rng)
        self.conv2 = Conv1d(cfg.ffn_hidden, cfg.model_dim, k2, rng)
        self.dropout = Dropout(cfg.dropout, rng)
        self.norm = LayerNorm(cfg.model_dim)

    def transform(self, x: Tensor) -> Tensor:
        return self.conv2(ag.relu(self.conv1(x)))

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.dropout(self.transform(x)))


def _zero_padded(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None or not mask.any():
        return x
    return x * (~mask)[..., None].astype(x.data.dtype)


class TransformerLayer(Module):
    def __init__(self, cfg: TransformerLayerConfig, rng: np.random.Generator):
        self.attention = MultiHeadAttention(cfg, rng)
        self.ffn = ConvFeedForward(cfg, rng)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        # padded rows are zeroed so the k=9 convolution cannot leak them
        x = _zero_padded(self.attention(x, mask), mask)
        return _zero_padded(self.ffn(x), mask)


class TransformerStack(Module):
    def __init__(self, num_layers: int, cfg: TransformerLayerConfig, rng: np.random.Generator):
        self.layers = [TransformerLayer(cfg, rng) for _ in range(num_layers)]

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = _zero_padded(x, mask)
        for layer in self.layers:
            x = layer(x, mask)
        return x


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Standard sin/cos table; even columns hold sines, odd columns cosines."""
    if dim % 2:
        raise ValueError(f"positional encoding dim must be even, got {dim}")
    pos = np.arange(length)[:, None]
    freq = np.power(10000.0, -np.arange(0, dim, 2) / dim)[None, :]
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe
