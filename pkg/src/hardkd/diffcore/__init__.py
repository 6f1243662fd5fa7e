from .tensor import (
    Tensor,
    grad,
    make_rng,
    repeat,
    set_default_dtype,
    get_default_dtype,
)
from .functional import (
    softmax_with_temperature,
    kl_divergence,
    mse,
    affine_grid,
    grid_sample_bilinear,
    reparam_sample,
    conv2d,
    extract_patches,
    combine_patches,
    softmax_over_axis,
    KL_FLOOR,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Tensor", "grad", "make_rng", "repeat", "set_default_dtype", "get_default_dtype",
    "softmax_with_temperature", "kl_divergence", "mse", "affine_grid",
    "grid_sample_bilinear", "reparam_sample", "conv2d", "extract_patches",
    "combine_patches", "softmax_over_axis", "KL_FLOOR",
    "Adam", "AdamState", "adam_step",
]
