"""GiT model assembly: stages, coupling topologies, accounting, checkpoints."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .embedding import ConfigError, EmbeddingParams, embed, init_embedding, patchify
from .lcg import LcgParams, NodeView, init_lcg, lcg_entry, lcg_forward
from .losses import HeadParams, bnneck, init_head
from .numerics import Tensor
from .transformer import MLP_RATIO, TransformerParams, init_transformer, layer_forward

COUPLING_MODES = ("interactive", "global_to_local", "local_to_global", "none", "baseline_global")

# which cross-stream additions each mode keeps: (global->local, local->global)
_EDGES = {
    "interactive": (True, True),
    "global_to_local": (True, False),
    "local_to_global": (False, True),
    "none": (False, False),
    "baseline_global": (False, False),
}


@dataclass
class StageConfig:
    sampling: int
    blocks: int


@dataclass
class GitConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 64
    heads: int = 4
    depth: int = 6
    stages: list[StageConfig] = field(
        default_factory=lambda: [StageConfig(2, 2), StageConfig(2, 2), StageConfig(4, 2)]
    )
    coupling: str = "interactive"
    classes: int = 8
    mlp_ratio: int = MLP_RATIO

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        self.validate()

    # -- derived quantities -------------------------------------------------
    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch) * (self.image_width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def has_local(self) -> bool:
        return self.coupling != "baseline_global"

    @property
    def grid(self) -> int:
        """Side of the finest node grid the patch-view vector is read as."""
        return self.patch // min(s.sampling for s in self.stages)

    def stage_view(self, stage: StageConfig) -> NodeView:
        finest = min(s.sampling for s in self.stages)
        return NodeView(self.grid, stage.sampling // finest, self.width // self.grid**2)

    def raw_view(self) -> NodeView:
        return NodeView(self.patch, self.stages[0].sampling, self.channels)

    def block_stages(self) -> list[int]:
        return [i for i, s in enumerate(self.stages) for _ in range(s.blocks)]

    def validate(self) -> None:
        if self.coupling not in COUPLING_MODES:
            raise ConfigError(f"unknown coupling mode {self.coupling!r}; expected one of {COUPLING_MODES}")
        if self.image_height % self.patch or self.image_width % self.patch:
            raise ConfigError(f"image {self.image_height}x{self.image_width} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if sum(s.blocks for s in self.stages) != self.depth:
            raise ConfigError(f"stage blocks sum to {sum(s.blocks for s in self.stages)}, depth is {self.depth}")
        finest = min(s.sampling for s in self.stages)
        for s in self.stages:
            if s.sampling <= 0 or self.patch % s.sampling:
                raise ConfigError(f"sampling size {s.sampling} does not tile patch size {self.patch}")
            if s.sampling % finest:
                raise ConfigError(f"sampling size {s.sampling} is not a multiple of the finest size {finest}")
        if self.width % self.grid**2:
            raise ConfigError(f"width {self.width} cannot be read as a {self.grid}x{self.grid} node grid")
        for s in self.stages:
            view = self.stage_view(s)
            if view.n * view.d != self.width:
                raise ConfigError(f"stage n*d' = {view.n * view.d} != width {self.width}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GitConfig":
        return cls(**d)


def progressive_stages(blocks_per_stage: int, sizes=(2, 4, 8)) -> list[StageConfig]:
    return [StageConfig(s, blocks_per_stage) for s in sizes]


def preset(name: str, **overrides) -> GitConfig:
    """Named configurations: ``desk``, ``tiny``/``small``/``base`` and ``vit-*``."""
    name = name.lower()
    if name == "desk":
        cfg = {}
    else:
        vit = name.startswith("vit-")
        size = name[4:] if vit else name
        heads = {"tiny": 3, "small": 6, "base": 12}.get(size)
        if heads is None:
            raise ConfigError(f"unknown preset {name!r}")
        depth = overrides.pop("depth", 12)
        if depth % 3:
            raise ConfigError("full-scale presets need depth divisible by 3 stages")
        cfg = dict(
            image_height=256, image_width=256, channels=3, patch=16,
            width=64 * heads, heads=heads, depth=depth,
            stages=progressive_stages(depth // 3),
            coupling="baseline_global" if vit else "interactive",
            classes=576,
        )
    cfg.update(overrides)
    return GitConfig(**cfg)


# -- model container -----------------------------------------------------------------
@dataclass
class GitModel:
    config: GitConfig
    embedding: EmbeddingParams
    transformers: list[TransformerParams]
    lcgs: list[LcgParams]
    head: HeadParams
    local_head: HeadParams | None = None

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.embedding.named("embed"))
        for i, lp in enumerate(self.lcgs):
            out.update(lp.named(f"blocks.{i}.lcg"))
        for i, tp in enumerate(self.transformers):
            out.update(tp.named(f"blocks.{i}.attn"))
        out.update(self.head.named("head"))
        if self.local_head is not None:
            out.update(self.local_head.named("local_head"))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.head.buffers("head"))
        if self.local_head is not None:
            out.update(self.local_head.buffers("local_head"))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype) -> "GitModel":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for t in clone.parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for b in (clone.head, clone.local_head):
            if b is not None:
                b.running_mean = b.running_mean.astype(dtype)
                b.running_var = b.running_var.astype(dtype)
        return clone


def param_family(name: str) -> str:
    if name.startswith("embed."):
        return "embedding"
    if ".lcg." in name:
        return "lcg"
    if ".attn." in name:
        return "transformer"
    return "head"


def build_model(config: GitConfig, seed: int = 0) -> GitModel:
    rng = np.random.default_rng(seed)
    embedding = init_embedding(rng, config.patch_dim, config.width, config.num_patches)
    transformers, lcgs = [], []
    raw = config.raw_view()
    for i, stage_idx in enumerate(config.block_stages()):
        transformers.append(init_transformer(rng, config.width, config.heads, config.mlp_ratio))
        if config.has_local:
            view = config.stage_view(config.stages[stage_idx])
            lcgs.append(init_lcg(rng, view.n, view.d, d_in=raw.d if i == 0 else None))
    head = init_head(rng, config.width, config.classes)
    local_head = init_head(rng, config.width, config.classes) if config.coupling == "none" else None
    return GitModel(config, embedding, transformers, lcgs, head, local_head)


# -- bridge ---------------------------------------------------------------------------
def reshape_bridge(nodes: Tensor, view: NodeView) -> Tensor:
    """Node view ``[..., N, n, d']`` to patch view ``[..., N, D]``."""
    if view.n * view.d != view.width:
        raise ConfigError("node view does not cover the patch width")
    return view.merge(nodes)


def inverse_bridge(patch_view: Tensor, view: NodeView) -> Tensor:
    return view.split(patch_view)


# -- forward ----------------------------------------------------------------------------
def forward(model: GitModel, images: np.ndarray, training: bool = False, update_stats: bool = True,
            return_blocks: bool = False) -> dict:
    """Run the two streams over ``[B, C, H, W]`` images.

    Within each block the LCG runs first and the transformer layer consumes
    its output. Stage changes re-slice the local state through the patch view.
    """
    cfg = model.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_height, cfg.image_width):
        raise ConfigError(f"images of shape {images.shape} do not match the config")
    raw = nx.Tensor(patchify(images, cfg.patch))
    tokens = embed(raw, model.embedding)
    to_local, to_global = _EDGES[cfg.coupling]
    local, view, prev_view = None, None, None
    blocks_t, blocks_l = [], []
    for i, stage_idx in enumerate(cfg.block_stages()):
        from_local = None
        if cfg.has_local:
            lp = model.lcgs[i]
            view = cfg.stage_view(cfg.stages[stage_idx])
            if i == 0:
                local = lcg_forward(lcg_entry(raw, lp, cfg.raw_view()), None, lp, view)
            else:
                if view != prev_view:
                    local = inverse_bridge(reshape_bridge(local, prev_view), view)
                global_in = tokens[:, 1:] if to_local else None
                local = lcg_forward(local, global_in, lp, view)
            if to_global:
                from_local = reshape_bridge(local, view)
            prev_view = view
            blocks_l.append(local)
        tokens = layer_forward(tokens, from_local, model.transformers[i])
        blocks_t.append(tokens)

    class_feature = tokens[:, 0]
    neck = bnneck(class_feature, model.head, training, update_stats)
    out = {
        "class_feature": class_feature,
        "triplet_feature": neck["triplet_feature"],
        "bn_feature": neck["ce_feature"],
        "logits": neck["logits"],
    }
    if cfg.has_local:
        out["local_nodes"] = local
        patch_view = reshape_bridge(local, view)
        out["local_patch_view"] = patch_view
        if model.local_head is not None:
            pooled = patch_view.mean(axis=1)
            lneck = bnneck(pooled, model.local_head, training, update_stats)
            out["local_feature"] = pooled
            out["local_bn_feature"] = lneck["ce_feature"]
            out["local_logits"] = lneck["logits"]
    if return_blocks:
        out["block_tokens"] = blocks_t
        out["block_nodes"] = blocks_l
    return out


def inference_features(model: GitModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Post-BN retrieval features in inference mode.

    With ``coupling="none"`` the two streams' BN features are concatenated
    and L2-normalised.
    """
    chunks = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            out = forward(model, images[start:start + batch_size], training=False)
            feat = out["bn_feature"].data
            if "local_bn_feature" in out:
                both = np.concatenate([feat, out["local_bn_feature"].data], axis=1)
                feat = both / np.maximum(np.linalg.norm(both, axis=1, keepdims=True), 1e-12)
            chunks.append(feat)
    return np.concatenate(chunks, axis=0)


# -- parameter accounting --------------------------------------------------------------
def count_params(config: GitConfig, include_head: bool = True) -> int:
    return sum(param_breakdown(config, include_head).values())


def param_breakdown(config: GitConfig, include_head: bool = True) -> dict[str, int]:
    """Learnable scalar counts per parameter family, derived from the config alone."""
    D, N, L = config.width, config.num_patches, config.depth
    hidden = config.mlp_ratio * D
    embedding = config.patch_dim * D + D + D + (N + 1) * D
    per_layer = 4 * (D * D + D) + 2 * (2 * D) + (D * hidden + hidden) + (hidden * D + D)
    counts = {"embedding": embedding, "transformer": L * per_layer, "lcg": 0, "head": 0}
    if config.has_local:
        raw = config.raw_view()
        lcg = 0
        for i, stage_idx in enumerate(config.block_stages()):
            view = config.stage_view(config.stages[stage_idx])
            lcg += view.n * view.d + 2 * view.d
            if i == 0:
                lcg += raw.d * view.d + view.n * view.d
        counts["lcg"] = lcg
    if include_head:
        heads = 2 if config.coupling == "none" else 1
        counts["head"] = heads * (2 * D + D * config.classes)
    return counts


# -- checkpoints ----------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"GITCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: GitModel, path) -> None:
    """Binary container: magic, version, JSON config, then named float32 records.

    Every integer is little-endian; a record is ``name_len:u16 name ndim:u8
    dims:u32* payload`` with the payload as raw little-endian float32.
    """
    records = {**{k: t.data for k, t in model.parameters().items()}, **model.buffers()}
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records.items():
            raw_name = name.encode()
            fh.write(struct.pack("<HB", len(raw_name), arr.ndim))
            fh.write(raw_name)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> GitModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a GiT checkpoint")
    version, cfg_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 16
    config = GitConfig.from_dict(json.loads(data[pos:pos + cfg_len]))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    model = build_model(config)
    params, buffers = model.parameters(), model.buffers()
    seen = set()
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", data, pos)
        pos += 3
        name = data[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        if target.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape}, model expects {target.shape}")
        target[...] = arr
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return model
