"""Local correlation graph: per-patch node graphs built from sub-patch blocks.

Each patch vector is viewed as a square grid of cells with a channel depth.
Sampling cuts the grid into square blocks (the nodes); a cosine-similarity
softmax gives every patch its own adjacency, one symmetric-normalised
propagation step with a shared Hadamard weight updates the nodes, and
LN + GELU finishes the block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .embedding import ConfigError
from .numerics import Tensor

COSINE_EPS = 1e-8
LN_EPS = 1e-6


@dataclass(frozen=True)
class NodeView:
    """How a flat patch vector of width ``grid**2 * channels`` splits into nodes.

    The vector is read as a ``(grid, grid, channels)`` array in raster order;
    node ``m`` is the ``m``-th ``(block, block)`` tile, also in raster order.
    """

    grid: int
    block: int
    channels: int

    def __post_init__(self):
        if self.block <= 0 or self.grid % self.block:
            raise ConfigError(f"sampling block {self.block} does not tile a grid of {self.grid}")

    @property
    def per_side(self) -> int:
        return self.grid // self.block

    @property
    def n(self) -> int:
        return self.per_side**2

    @property
    def d(self) -> int:
        return self.block * self.block * self.channels

    @property
    def width(self) -> int:
        return self.grid * self.grid * self.channels

    def split(self, x: Tensor) -> Tensor:
        """``[..., width]`` -> ``[..., n, d]``."""
        return sample_nodes(x, self)

    def merge(self, nodes: Tensor) -> Tensor:
        """``[..., n, d]`` -> ``[..., width]``; exact inverse of :meth:`split`."""
        return desample_nodes(nodes, self)


def sample_nodes(x: Tensor, view: NodeView) -> Tensor:
    if x.shape[-1] != view.width:
        raise ConfigError(f"patch width {x.shape[-1]} does not match node view width {view.width}")
    lead = x.shape[:-1]
    k = len(lead)
    g, s, c, q = view.grid, view.block, view.channels, view.per_side
    t = x.reshape(*lead, q, s, q, s, c)
    t = t.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return t.reshape(*lead, view.n, view.d)


def desample_nodes(nodes: Tensor, view: NodeView) -> Tensor:
    if nodes.shape[-2:] != (view.n, view.d):
        raise ConfigError(f"node tensor {nodes.shape} does not match view n={view.n}, d={view.d}")
    lead = nodes.shape[:-2]
    k = len(lead)
    s, c, q = view.block, view.channels, view.per_side
    t = nodes.reshape(*lead, q, q, s, s, c)
    t = t.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return t.reshape(*lead, view.width)


@dataclass
class LcgParams:
    W: Tensor  # [n, d'] shared over all patches
    ln_gain: Tensor  # [d']
    ln_bias: Tensor  # [d']
    E: Tensor | None = None  # [d, d'], raw-pixel entry block only
    E_pos: Tensor | None = None  # [n, d'], raw-pixel entry block only

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.W": self.W, f"{prefix}.ln_gain": self.ln_gain, f"{prefix}.ln_bias": self.ln_bias}
        if self.E is not None:
            out[f"{prefix}.E"] = self.E
            out[f"{prefix}.E_pos"] = self.E_pos
        return out


def init_lcg(rng: np.random.Generator, n: int, d_out: int, d_in: int | None = None) -> LcgParams:
    params = LcgParams(
        W=nx.parameter(nx.trunc_normal((n, d_out), rng)),
        ln_gain=nx.parameter(np.ones(d_out)),
        ln_bias=nx.parameter(np.zeros(d_out)),
    )
    if d_in is not None:
        params.E = nx.parameter(nx.trunc_normal((d_in, d_out), rng))
        params.E_pos = nx.parameter(nx.trunc_normal((n, d_out), rng))
    return params


def embed_nodes(raw: Tensor, E: Tensor, E_pos: Tensor) -> Tensor:
    """``raw @ E + E_pos`` with ``E_pos`` broadcast over batch and patches."""
    return nx.matmul(raw, E) + E_pos


def build_adjacency(X: Tensor) -> Tensor:
    """Row-wise softmax over pairwise cosine similarities of the nodes in each patch."""
    norm = nx.l2_norm(X, axis=-1, keepdims=True)
    norm = norm + nx.relu(COSINE_EPS - norm)  # max(norm, eps): exact cosines above eps, no 0/0
    unit = X / norm
    cos = nx.matmul(unit, nx.swapaxes(unit, -1, -2))
    return nx.softmax(cos, axis=-1)


def aggregate(X: Tensor, A: Tensor, W: Tensor, reduced: bool = False) -> Tensor:
    """``(D^-1/2 A D^-1/2 X) * W`` with ``D`` the row-degree matrix of ``A``.

    ``reduced=True`` skips the degree normalisation, which is exact only when
    the rows of ``A`` sum to one.
    """
    if not reduced:
        inv_sqrt = 1.0 / nx.sqrt(A.sum(axis=-1, keepdims=True))  # [..., n, 1]
        A = inv_sqrt * A * nx.swapaxes(inv_sqrt, -1, -2)
    return nx.matmul(A, X) * W


def activate(U: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return nx.gelu(nx.layer_norm(U, gain, bias, eps=LN_EPS))


def lcg_entry(raw_patches: Tensor, params: LcgParams, raw_view: NodeView) -> Tensor:
    """Initial node embedding of raw pixel patches ``[B, N, P*P*C]``."""
    return embed_nodes(raw_view.split(raw_patches), params.E, params.E_pos)


def lcg_forward(local_in: Tensor, global_in: Tensor | None, params: LcgParams, view: NodeView) -> Tensor:
    """One LCG step on ``[B, N, n, d']`` nodes.

    ``global_in`` is the transformer's patch-row view ``[B, N, D]``; when given
    it is split into the same node layout and added to ``local_in``.
    """
    x = local_in
    if global_in is not None:
        x = x + view.split(global_in)
    A = build_adjacency(x)
    U = aggregate(x, A, params.W)
    return activate(U, params.ln_gain, params.ln_bias)
