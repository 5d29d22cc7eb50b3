"""Pre-LN transformer encoder layer with an additive hook for local features."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LN_EPS = 1e-6
MLP_RATIO = 4


@dataclass
class TransformerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    heads: int = 1

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self) if f.name != "heads"}


def init_transformer(rng: np.random.Generator, width: int, heads: int, mlp_ratio: int = MLP_RATIO) -> TransformerParams:
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")
    hidden = mlp_ratio * width

    def w(i, o):
        return nx.parameter(nx.trunc_normal((i, o), rng))

    def zeros(k):
        return nx.parameter(np.zeros(k))

    def ones(k):
        return nx.parameter(np.ones(k))

    return TransformerParams(
        ln1_gain=ones(width), ln1_bias=zeros(width),
        wq=w(width, width), bq=zeros(width),
        wk=w(width, width), bk=zeros(width),
        wv=w(width, width), bv=zeros(width),
        wo=w(width, width), bo=zeros(width),
        ln2_gain=ones(width), ln2_bias=zeros(width),
        w1=w(width, hidden), b1=zeros(hidden),
        w2=w(hidden, width), b2=zeros(width),
        heads=heads,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def mhsa(x: Tensor, p: TransformerParams, return_attention: bool = False):
    """Multi-head scaled dot-product self-attention over ``[B, T, D]``."""
    b, t, d = x.shape
    h = p.heads
    q = _split_heads(nx.matmul(x, p.wq) + p.bq, h)
    k = _split_heads(nx.matmul(x, p.wk) + p.bk, h)
    v = _split_heads(nx.matmul(x, p.wv) + p.bv, h)
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // h))
    attn = nx.softmax(scores, axis=-1)
    out = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = nx.matmul(out, p.wo) + p.bo
    return (out, attn) if return_attention else out


def mlp(x: Tensor, p: TransformerParams) -> Tensor:
    return nx.matmul(nx.gelu(nx.matmul(x, p.w1) + p.b1), p.w2) + p.b2


def layer_forward(tokens: Tensor, local_in: Tensor | None, p: TransformerParams) -> Tensor:
    """One encoder layer on ``[B, N+1, D]`` tokens.

    ``local_in`` (``[B, N, D]``, patch view of the LCG output) is added to the
    patch rows before attention; the class row is left alone.
    """
    x = tokens
    if local_in is not None:
        b, _, d = tokens.shape
        pad = nx.Tensor(np.zeros((b, 1, d), dtype=tokens.dtype))
        x = x + nx.concat([pad, local_in], axis=1)
    x = mhsa(nx.layer_norm(x, p.ln1_gain, p.ln1_bias, LN_EPS), p) + x
    return mlp(nx.layer_norm(x, p.ln2_gain, p.ln2_bias, LN_EPS), p) + x
