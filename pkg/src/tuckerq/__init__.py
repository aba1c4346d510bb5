"""Tucker compression and fixed-point quantization of convolution kernels."""

from .conv import ConvSpec, conv2d_direct, conv2d_tucker, count_macs
from .quantize import (
    ActivationRange,
    QuantParams,
    activation_range,
    quantize_activations,
    quantize_weights,
    ste_backward,
    weight_params,
)
from .tensor import frobenius_norm, mode_fold, mode_product, mode_unfold, multilinear_product, truncated_svd
from .tucker import (
    PartialTucker2,
    TuckerFactors,
    hooi,
    hosvd,
    macs_compression_ratio,
    param_compression_ratio,
    partial_tucker2,
    reconstruct,
    tucker_compression_ratio,
)

__version__ = "0.1.0"
