"""Dense-boundary temporal action proposals with multi-path temporal context
aggregation and coarse-to-fine matching, on a small numpy autodiff core."""

from .inference import FusionConfig, Proposal, proposals_from_maps, soft_nms
from .loss import LossConfig, total_loss
from .model import DCAN, ConfigError, ModelConfig
from .pipeline import RunConfig, evaluate, infer, load_config, train
from .tensor import ContractError, NumericError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "DCAN",
    "ConfigError",
    "ContractError",
    "FusionConfig",
    "LossConfig",
    "ModelConfig",
    "NumericError",
    "Proposal",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "evaluate",
    "infer",
    "load_config",
    "no_grad",
    "proposals_from_maps",
    "soft_nms",
    "total_loss",
    "train",
]
