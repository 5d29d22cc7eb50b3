"""Flat ``section.key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. A top-level ``preset``
key (``desk`` or ``paper``) selects the defaults the rest of the file
overrides. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .model import GitConfig, StageConfig, preset as model_preset
from .training import Schedule


class ConfigKeyError(KeyError):
    pass


DEFAULTS: dict[str, object] = {
    "preset": "desk",
    "model.preset": "desk",
    "model.image_height": 32,
    "model.image_width": 32,
    "model.channels": 3,
    "model.patch": 8,
    "model.width": 64,
    "model.heads": 4,
    "model.depth": 6,
    "model.stages": "2:2,2:2,4:2",
    "model.coupling": "interactive",
    "model.classes": 0,  # 0 = number of training identities
    "model.mlp_ratio": 4,
    "optim.peak_lr": 1e-2,
    "optim.warmup_start_lr": 1e-4,
    "optim.warmup_epochs": 5,
    "optim.milestones": "",
    "optim.gamma": 0.1,
    "optim.momentum": 0.9,
    "optim.weight_decay": 1e-4,
    "train.epochs": 200,
    "train.p_ids": 8,
    "train.k_imgs": 6,
    "train.seed": 0,
    "train.eval_every": 50,
    "train.alpha": 1.0,
    "train.beta": 1.0,
    "train.triplet_mode": "soft",
    "augment.flip_p": 0.5,
    "augment.erase_p": 0.5,
    "data.source": "synthetic",
    "data.root": "",
    "data.query_root": "",
    "data.gallery_root": "",
    "synthetic.id_count": 8,
    "synthetic.images_per_id": 6,
    "synthetic.jitter": 0.05,
    "synthetic.blocks": 4,
    "synthetic.cameras": 4,
    "synthetic.seed": 0,
    "eval.protocol": "self",
    "eval.draws": 10,
    "eval.split": "gallery_single",
    "eval.cross_camera": True,
    "gradcheck.samples": 50,
    "gradcheck.seed": 0,
    "gradcheck.step": 1e-6,
    "output.dir": "runs/desk",
}

# full-scale recipe: 150 epochs, warm 1e-4 -> 1e-2 over 5 epochs, x0.1 at 51/86/120
PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "paper": {
        "model.preset": "base",
        "optim.milestones": "51,86,120",
        "train.epochs": 150,
        "train.eval_every": 10,
        "output.dir": "runs/paper",
    },
}

_MODEL_KEYS = ("image_height", "image_width", "channels", "patch", "width", "heads", "depth",
               "coupling", "classes", "mlp_ratio")


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_stages(text: str) -> list[StageConfig]:
    stages = []
    for item in text.split(","):
        sampling, blocks = item.strip().split(":")
        stages.append(StageConfig(int(sampling), int(blocks)))
    return stages


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))
    explicit: set[str] = field(default_factory=set)

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw) -> None:
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigKeyError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
        self.explicit.add(key)

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]]) -> "RunConfig":
        cfg = cls()
        for key, raw in pairs:
            if key.strip() not in DEFAULTS:
                raise ConfigKeyError(f"unknown config key {key.strip()!r}")
        presets = [raw.strip() for key, raw in pairs if key.strip() == "preset"]
        name = presets[-1] if presets else "desk"
        if name not in PRESETS:
            raise ConfigKeyError(f"unknown preset {name!r}")
        cfg.values["preset"] = name
        cfg.values.update(PRESETS[name])
        for key, raw in pairs:
            cfg.set(key, raw)
        return cfg

    @classmethod
    def load(cls, path=None, overrides: list[str] = ()) -> "RunConfig":
        pairs = []
        if path is not None:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                pairs.append((key.strip(), value.strip()))
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            pairs.append((key.strip(), value.strip()))
        return cls.from_pairs(pairs)

    def dump(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)

    # -- builders ----------------------------------------------------------------
    def git_config(self, classes: int | None = None) -> GitConfig:
        name = self["model.preset"]
        base = model_preset(name)
        kwargs = base.to_dict()
        # model.* keys only override the preset when given explicitly, except on desk
        for k in _MODEL_KEYS:
            key = f"model.{k}"
            if key in self.explicit or name == "desk":
                kwargs[k] = self[key]
        if "model.stages" in self.explicit or name == "desk":
            kwargs["stages"] = parse_stages(self["model.stages"])
        else:
            kwargs["stages"] = base.stages
        if classes is not None and not kwargs["classes"]:
            kwargs["classes"] = classes
        if not kwargs["classes"]:
            kwargs["classes"] = self["synthetic.id_count"]
        return GitConfig(**kwargs)

    def schedule(self) -> Schedule:
        ms = tuple(int(m) for m in str(self["optim.milestones"]).split(",") if m.strip())
        return Schedule(peak=self["optim.peak_lr"], warmup_start=self["optim.warmup_start_lr"],
                        warmup_epochs=self["optim.warmup_epochs"], milestones=ms, gamma=self["optim.gamma"])

    def synthetic_spec(self, height: int, width: int, channels: int) -> SyntheticSpec:
        return SyntheticSpec(
            id_count=self["synthetic.id_count"], images_per_id=self["synthetic.images_per_id"],
            height=height, width=width, channels=channels, blocks=self["synthetic.blocks"],
            jitter=self["synthetic.jitter"], cameras=self["synthetic.cameras"], seed=self["synthetic.seed"],
        )
