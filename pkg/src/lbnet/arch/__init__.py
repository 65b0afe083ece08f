"""LBNet architecture: config, blocks, forward pass and profiling."""
from lbnet.arch.config import PRESETS, ModelConfig, preset
from lbnet.arch.model import (
    LBNetModel, LayerSpec, Scope, build_model, channel_attention, count_params, frdab_forward,
    lbnet_forward, lffm_forward, lffm_groups, recursive_transformer_forward,
    scaled_dot_product_attention, spatial_attention, symmetric_cnn_forward,
    transformer_module_forward, transformer_tokens_forward,
)
from lbnet.arch.profile import DEFAULT_HR_SIZE, ProfileReport, ProfileRow, count_mult_adds, format_count

__all__ = [
    "PRESETS", "ModelConfig", "preset", "LBNetModel", "LayerSpec", "Scope", "build_model",
    "count_params", "lbnet_forward", "lffm_groups", "channel_attention", "spatial_attention",
    "frdab_forward", "lffm_forward", "symmetric_cnn_forward", "scaled_dot_product_attention",
    "transformer_module_forward", "transformer_tokens_forward", "recursive_transformer_forward",
    "DEFAULT_HR_SIZE", "ProfileReport", "ProfileRow", "count_mult_adds", "format_count",
]
