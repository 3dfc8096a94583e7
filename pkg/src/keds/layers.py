"""Shared transformer building blocks for the composer and projection stacks.

Everything here operates on (B, L, d) tensors and is written against the
numeric module's restricted op set. Blocks are pre-norm residual with a
x4 feed-forward expansion.
"""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from .errors import ConfigError
from .numeric import Tensor


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    """Scaled-uniform init, scale 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, L, d) -> (B, h, L, d/h)."""
    b, l, d = x.shape
    return nm.transpose(nm.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, h, L, d/h) -> (B, L, d)."""
    b, h, l, dh = x.shape
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def multi_head_attention(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    heads: int,
) -> Tensor:
    """Scaled dot-product attention; query (B, Lq, d), keys/values (B, Lk, d)."""
    d = query.shape[-1]
    if d % heads:
        raise ConfigError(f"hidden dim {d} not divisible by {heads} heads")
    q = split_heads(nm.add(nm.matmul(query, wq), bq), heads)
    k = split_heads(nm.add(nm.matmul(keys, wk), bk), heads)
    v = split_heads(nm.add(nm.matmul(values, wv), bv), heads)
    scores = nm.scale(nm.matmul(q, nm.swap_last2(k)), 1.0 / np.sqrt(d // heads))
    mixed = nm.matmul(nm.softmax_rows(scores), v)
    return nm.add(nm.matmul(merge_heads(mixed), wo), bo)


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return nm.add(nm.matmul(nm.gelu(nm.add(nm.matmul(x, w1), b1)), w2), b2)
