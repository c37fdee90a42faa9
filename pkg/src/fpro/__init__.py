"""Frequency-prompted image restoration on a small numpy autodiff core."""

from .freq import FilterBank, FrequencyPair, GatedDynamicDecoupler
from .model import FPro, ModelConfig, build_model, fpro_forward, param_count
from .tensor import Tensor, backward, finite_diff_check, no_grad

__all__ = [
    "FPro", "FilterBank", "FrequencyPair", "GatedDynamicDecoupler", "ModelConfig",
    "Tensor", "backward", "build_model", "finite_diff_check", "fpro_forward",
    "no_grad", "param_count",
]
