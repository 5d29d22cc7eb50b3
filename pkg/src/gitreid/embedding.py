"""Image to token sequence: patches, linear projection, class token, positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    """Raised when shapes and hyper-parameters do not fit together."""


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """Split ``[..., C, H, W]`` into ``[..., N, P*P*C]`` raster-ordered patches.

    Each row is one patch flattened in (row, column, channel) order.
    """
    *lead, c, h, w = img.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, c, gh, patch, gw, patch)
    nd = len(lead)
    # -> [..., gh, gw, py, px, c]
    x = x.transpose(*range(nd), nd + 1, nd + 3, nd + 2, nd + 4, nd)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch * c))


def unpatchify(patches: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    *lead, n, m = patches.shape
    gh, gw = height // patch, width // patch
    if n != gh * gw or m != patch * patch * channels:
        raise ConfigError(f"patch array {patches.shape} does not match a {channels}x{height}x{width} image")
    nd = len(lead)
    x = patches.reshape(*lead, gh, gw, patch, patch, channels)
    x = x.transpose(*range(nd), nd + 4, nd, nd + 2, nd + 1, nd + 3)
    return np.ascontiguousarray(x.reshape(*lead, channels, height, width))


@dataclass
class EmbeddingParams:
    proj: Tensor  # [P*P*C, D]
    proj_bias: Tensor  # [D]
    class_token: Tensor  # [1, D]
    pos: Tensor  # [N+1, D]

    def named(self, prefix: str = "embed"):
        return {
            f"{prefix}.proj": self.proj,
            f"{prefix}.proj_bias": self.proj_bias,
            f"{prefix}.class_token": self.class_token,
            f"{prefix}.pos": self.pos,
        }


def init_embedding(rng: np.random.Generator, patch_dim: int, width: int, num_patches: int) -> EmbeddingParams:
    return EmbeddingParams(
        proj=nx.parameter(nx.trunc_normal((patch_dim, width), rng)),
        proj_bias=nx.parameter(np.zeros(width)),
        class_token=nx.parameter(nx.trunc_normal((1, width), rng)),
        pos=nx.parameter(nx.trunc_normal((num_patches + 1, width), rng)),
    )


def embed(patches: Tensor, params: EmbeddingParams) -> Tensor:
    """``concat(class_token, patches @ proj + b) + pos`` for ``[B, N, M]`` patches."""
    b = patches.shape[0]
    tokens = nx.matmul(patches, params.proj) + params.proj_bias
    cls = nx.add(nx.Tensor(np.zeros((b, 1, 1), dtype=tokens.dtype)), params.class_token)
    return nx.concat([cls, tokens], axis=1) + params.pos
