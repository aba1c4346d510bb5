"""Reference 2-D convolution and the three-stage Tucker-factorized convolution.

Feature maps are channels-last ``(H, W, S)``; kernels are ``(D_h, D_w, S, S_out)``.
Padding is zero padding and output pixel ``(h, w)`` reads input rows
``h * stride + i - padding`` for kernel offsets ``i``.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConvSpec:
    kernel_shape: tuple
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if len(self.kernel_shape) != 4 or min(self.kernel_shape) < 1:
            raise ValueError(f"invalid kernel shape {self.kernel_shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    def output_hw(self, input_hw):
        d_h, d_w = self.kernel_shape[:2]
        h, w = input_hw
        ho = output_extent(h, d_h, self.stride, self.padding)
        wo = output_extent(w, d_w, self.stride, self.padding)
        return ho, wo


def output_extent(n, d, stride, padding):
    return (n + 2 * padding - d) // stride + 1


def _conv(x, w, stride=(1, 1), padding=(0, 0)):
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError("expected an (H, W, S) input and (D, D, S, S_out) kernel")
    if x.shape[2] != w.shape[2]:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {w.shape[2]}")
    (sh, sw), (ph, pw) = stride, padding
    d_h, d_w = w.shape[:2]
    ho = output_extent(x.shape[0], d_h, sh, ph)
    wo = output_extent(x.shape[1], d_w, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError("convolution produces an empty output")
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    y = np.zeros((ho, wo, w.shape[3]))
    for i in range(d_h):
        for j in range(d_w):
            patch = xp[i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
            y += patch @ w[i, j]
    return y


def conv2d_direct(x, w, spec):
    """Direct convolution of a feature map with a full kernel."""
    if tuple(np.shape(w)) != tuple(spec.kernel_shape):
        raise ValueError(f"kernel shape {np.shape(w)} does not match spec {spec.kernel_shape}")
    s = spec.stride
    p = spec.padding
    return _conv(x, w, (s, s), (p, p))


def conv2d_generic(x, w, stride=1, padding=0):
    """Convolution with a possibly non-square kernel and per-axis stride/padding."""
    stride = (stride, stride) if np.isscalar(stride) else tuple(stride)
    padding = (padding, padding) if np.isscalar(padding) else tuple(padding)
    return _conv(x, w, stride, padding)


def pointwise(x, m):
    """1x1 convolution: ``y[h, w, k] = sum_s x[h, w, s] * m[s, k]``."""
    x = np.asarray(x, dtype=float)
    if x.shape[2] != m.shape[0]:
        raise ValueError(f"input has {x.shape[2]} channels, matrix expects {m.shape[0]}")
    return x @ m


def conv2d_tucker(x, f, spec):
    """Convolve through the factors: pointwise ``u3``, core conv, pointwise ``u4^T``.

    Stride and padding apply only to the core convolution.
    """
    if tuple(f.kernel_shape) != tuple(spec.kernel_shape):
        raise ValueError(f"factors of kernel {f.kernel_shape} do not match spec {spec.kernel_shape}")
    y1 = pointwise(x, f.u3)
    s, p = spec.stride, spec.padding
    y2 = _conv(y1, f.core, (s, s), (p, p))
    return pointwise(y2, f.u4.T)


def count_macs(spec, input_hw, rank=None):
    """Multiply-accumulate count of the full (``rank=None``) or factorized layer."""
    d, _, s, s_out = spec.kernel_shape
    h, w = input_hw
    ho, wo = spec.output_hw(input_hw)
    if rank is None:
        return d * d * s * s_out * ho * wo
    r3, r4 = rank
    return s * r3 * h * w + d * d * r3 * r4 * ho * wo + s_out * r4 * ho * wo
