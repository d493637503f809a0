"""Small neural building blocks on top of :mod:`siamst.numcore`."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class Module:
    """Container that discovers parameters and sub-modules from attributes.

    Every :class:`Tensor` attribute is a parameter; constants are kept as
    plain numpy arrays.
    """

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.value.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state, strict: bool = True):
        from .errors import CheckpointError

        own = self.named_parameters()
        problems = []
        for key, p in own.items():
            if key not in state:
                if strict:
                    problems.append(f"{key}: missing")
                continue
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != p.shape:
                problems.append(f"{key}: shape {value.shape} != {p.shape}")
                continue
            p.value = value.copy()
        if strict:
            problems += [f"{k}: unexpected" for k in state if k not in own]
        if problems:
            raise CheckpointError("cannot load checkpoint: " + "; ".join(problems))


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = nc.parameter(_init(rng, d_in, (d_in, d_out)))
        self.bias = nc.parameter(np.zeros((1, d_out))) if bias else None

    def __call__(self, x) -> Tensor:
        out = nc.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = nc.parameter(np.ones((1, d)))
        self.shift = nc.parameter(np.zeros((1, d)))

    def __call__(self, x) -> Tensor:
        return nc.layer_norm(x, self.gain, self.shift)


class FeedForwardBlock(Module):
    """Pre-norm residual block: ``x + W2 gelu(W1 LN(x))``."""

    def __init__(self, d: int, rng: np.random.Generator, expansion: int = 2):
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, expansion * d, rng)
        self.fc2 = Linear(expansion * d, d, rng)

    def __call__(self, x) -> Tensor:
        return x + self.fc2(nc.gelu(self.fc1(self.norm(x))))


class Attention(Module):
    """Single-head scaled dot-product attention with a pre-norm residual."""

    def __init__(self, d: int, rng: np.random.Generator, causal: bool = False):
        self.norm = LayerNorm(d)
        self.query = Linear(d, d, rng, bias=False)
        self.key = Linear(d, d, rng, bias=False)
        self.value = Linear(d, d, rng, bias=False)
        self.out = Linear(d, d, rng)
        self.causal = causal
        self.scale = 1.0 / math.sqrt(d)

    def __call__(self, x, memory=None) -> Tensor:
        h = self.norm(x)
        src = h if memory is None else memory
        scores = nc.matmul(self.query(h), nc.transpose(self.key(src))) * self.scale
        if self.causal:
            n = scores.shape[0]
            scores = scores + np.triu(np.full((n, n), -1e9), k=1)
        weights = nc.softmax(scores, axis=1)
        return x + self.out(nc.matmul(weights, self.value(src)))


class EncoderStack(Module):
    """``layers`` blocks of optional self-attention followed by a feed-forward block."""

    def __init__(self, d: int, layers: int, rng: np.random.Generator, attention: bool = False):
        self.attention = [Attention(d, rng) for _ in range(layers)] if attention else []
        self.ffn = [FeedForwardBlock(d, rng) for _ in range(layers)]
        self.final_norm = LayerNorm(d) if layers else None

    def __call__(self, x) -> Tensor:
        for i, block in enumerate(self.ffn):
            if self.attention:
                x = self.attention[i](x)
            x = block(x)
        return self.final_norm(x) if self.final_norm is not None else x
