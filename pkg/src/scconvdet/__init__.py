"""Numpy detector toolkit for splicing SE / SCConv blocks into a small YOLO-style network."""

__version__ = "0.1.0"

from .blocks import BlockConfig, BlockKind, CRUConfig, SEConfig, SRUConfig, block_param_count  # noqa: E402
from .config import RunConfig  # noqa: E402
from .gradcheck import grad_check  # noqa: E402
from .metrics import EvalReport, compare_reports, evaluate  # noqa: E402
from .model import BackboneConfig, build_model, model_stats  # noqa: E402
from .tensor import Tape, Tensor  # noqa: E402
from .train import TrainConfig, train  # noqa: E402

__all__ = [
    "BackboneConfig", "BlockConfig", "BlockKind", "CRUConfig", "EvalReport", "RunConfig", "SEConfig",
    "SRUConfig", "Tape", "Tensor", "TrainConfig", "block_param_count", "build_model", "compare_reports",
    "evaluate", "grad_check", "model_stats", "train",
]
