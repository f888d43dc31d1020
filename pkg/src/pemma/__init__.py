"""LoRA-based multi-modal adaptation of a CT-pretrained 3D segmentation transformer."""
from .autograd import Tensor, backward, grad_check, no_grad
from .layers import Parameter, set_trainable_groups
from .lora import count_params, count_trainable, inject_lora, merge_weights
from .models import (
    LateFusionPair,
    ModelConfig,
    SegModel,
    build_early_fusion,
    build_pemma,
    combine_skips,
    infer_with_missing,
    late_fusion_combine,
    route_tokens,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad", "Parameter", "set_trainable_groups",
    "count_params", "count_trainable", "inject_lora", "merge_weights", "LateFusionPair",
    "ModelConfig", "SegModel", "build_early_fusion", "build_pemma", "combine_skips",
    "infer_with_missing", "late_fusion_combine", "route_tokens",
]
