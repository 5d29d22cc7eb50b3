"""GiT re-identification model (local graphs coupled with global attention) on a small numpy autodiff core."""

from .model import GitConfig, GitModel, StageConfig, build_model, count_params, forward, preset

__all__ = ["GitConfig", "GitModel", "StageConfig", "build_model", "count_params", "forward", "preset"]
__version__ = "0.1.0"
