"""Single-shot color-coded-mask light field toolkit.

Simulates a compressive plenoptic camera whose random color mask multiplexes
angular and chromatic information onto a monochrome sensor, reconstructs the
4D color light field from the coded 2D measurement (sparse-coding baselines
and a mask-conditioned convolutional network), and estimates disparity from
the result with an unsupervised warping loss.
"""

from .lightfield import (
    BoundsError,
    CodedImage,
    CoverageError,
    LightField,
    PatchSpec,
    SensingTensor,
    devectorize,
    extract_patch,
    matrix_form,
    patch_grid,
    ray_index,
    stitch_patches,
    vectorize,
)
from .optics import (
    MaskDistribution,
    NoiseModel,
    add_noise,
    compression_ratio,
    forward,
    gen_sensing_tensor,
    mean_backprojection,
)

__version__ = "0.1.0"

__all__ = [
    "BoundsError",
    "CodedImage",
    "CoverageError",
    "LightField",
    "MaskDistribution",
    "NoiseModel",
    "PatchSpec",
    "SensingTensor",
    "add_noise",
    "compression_ratio",
    "devectorize",
    "extract_patch",
    "forward",
    "gen_sensing_tensor",
    "matrix_form",
    "mean_backprojection",
    "patch_grid",
    "ray_index",
    "stitch_patches",
    "vectorize",
]
