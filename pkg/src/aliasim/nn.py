"""Small layer library over :mod:`aliasim.tensor`.

Activations are batched ``[..., tokens, width]`` tensors. Parameters are
registered by attribute name so a model exposes a stable, ordered list of
``(name, Tensor)`` pairs for optimizers and checkpoints.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


class ConfigError(ValueError):
    """Invalid model or layer configuration."""


class Module:
    """Owns trainable tensors and child modules, discovered by attribute order."""

    frozen: bool = False

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val, self.frozen
            elif isinstance(val, Module):
                for n, t, fr in val.named_tensors(name + "."):
                    yield n, t, fr or self.frozen
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for n, t, fr in item.named_tensors(f"{name}.{i}."):
                            yield n, t, fr or self.frozen

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t, fr in self.named_tensors() if not fr]

    def frozen_tensors(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t, fr in self.named_tensors() if fr]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for _, t in self.parameters()))

    def zero_grad(self) -> None:
        for _, t, _ in self.named_tensors():
            t.grad = None


def _normal(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    return gen.standard_normal(shape) * std


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, gen: np.random.Generator,
                 bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else _normal(gen, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return T.permute(x, (*range(k), k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = T.permute(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    w = T.softmax(T.matmul(q, T.swap_last(k)) * scale, axis=-1)
    return T.matmul(w, v)


class MultiHeadAttention(Module):
    """Q from ``x``, K and V from ``context``; learned Q/K/V/output projections."""

    def __init__(self, d: int, heads: int, gen: np.random.Generator, zero_out: bool = False):
        if heads < 1 or d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, gen)
        # no key bias: it shifts every logit of a query equally, so softmax cancels it
        self.k = Linear(d, d, gen, bias=False)
        self.v = Linear(d, d, gen)
        self.out = Linear(d, d, gen, zero=zero_out)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        if x.shape[-1] != context.shape[-1]:
            raise ShapeError("query and context widths differ")
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        v = split_heads(self.v(context), self.heads)
        return self.out(merge_heads(attention(q, k, v)))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: MultiHeadAttention | None = None) -> Tensor:
    """Functional form: with ``params`` None the projections are identities."""
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    if params is not None:
        q, k, v = params.q(q), params.k(k), params.v(v)
    out = merge_heads(attention(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)))
    if params is not None:
        out = params.out(out)
    return out


class MLP(Module):
    def __init__(self, d: int, hidden: int, gen: np.random.Generator, zero_out: bool = False):
        self.fc1 = Linear(d, hidden, gen)
        self.fc2 = Linear(hidden, d, gen, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class SelfAttentionBlock(Module):
    """Pre-norm transformer block: x + MHA(LN x), then x + MLP(LN x)."""

    def __init__(self, d: int, heads: int, mlp_hidden: int, gen: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, gen)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_hidden, gen)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.ln2(x))


class CrossAttentionBlock(Module):
    """Self-attention, cross-attention to a context, MLP; each pre-norm residual."""

    def __init__(self, d: int, heads: int, mlp_hidden: int, gen: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, gen)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, gen)
        self.ln3 = LayerNorm(d)
        self.mlp = MLP(d, mlp_hidden, gen)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.ln2(x), context)
        return x + self.mlp(self.ln3(x))
