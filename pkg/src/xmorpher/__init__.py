"""Dual-stream cross-attention transformer for deformable 3D registration, on a small numpy autodiff engine."""
from .architecture import ArchConfig, Trace, init_params, no_cross_forward, param_count, xmorpher_forward
from .attention import AttentionParams, cat_block, fusion_module, no_cross_block, w_mca
from .registration import (
    TrainConfig,
    Volume,
    dsc,
    jacobian_nonpositive_fraction,
    spatial_transform,
    synth_pair,
    train,
)
from .tensorcore import Tensor, backward, no_grad
from .windowing import WindowConfig, WindowSet, window_area_partition, window_merge, window_partition

__version__ = "0.1.0"
