"""vsrpp: a desk-scale, CPU-only video super-resolution pipeline.

Recurrent bidirectional propagation over a grid of branches, second-order
temporal connections, and flow-guided deformable alignment, built on a small
numpy autodiff core.  No GPU, no deep-learning framework.
"""

import os

# Cap BLAS parallelism before numpy loads anywhere in this package; a single
# thread is the reproducibility default, VSRPP_THREADS overrides it.
_threads = os.environ.get("VSRPP_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)
del _var, _threads

from .errors import (  # noqa: E402
    ClipFormatError,
    ConfigError,
    DimensionError,
    GraphError,
    NumericsError,
    TrainingDiverged,
    VsrppError,
    WeightFormatError,
)
from .tensor import Tensor, no_grad  # noqa: E402
from .ops import (  # noqa: E402
    ConvSpec,
    bilinear_sample,
    charbonnier_loss,
    concat,
    conv2d,
    deform_conv2d,
    leaky_relu,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    resize_bilinear,
    sigmoid,
    warp,
)

__version__ = "0.1.0"

__all__ = [
    "ClipFormatError", "ConfigError", "ConvSpec", "DimensionError",
    "GraphError", "NumericsError", "Tensor", "TrainingDiverged",
    "VsrppError", "WeightFormatError", "bilinear_sample", "charbonnier_loss",
    "concat", "conv2d", "deform_conv2d", "leaky_relu", "no_grad",
    "pixel_shuffle", "pixel_unshuffle", "relu", "resize_bilinear", "sigmoid",
    "warp",
]
