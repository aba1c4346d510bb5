"""Simulated fixed-point quantization of weights and activations.

Values stay in float64; quantized tensors hold integer multiples of the step.
Rounding is round-half-to-even.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tucker import PartialTucker2

SCHEMES = ("per-tensor", "per-filter", "quantile")
DEFAULT_QUANTILE_GRID = (0.95, 0.99, 0.995, 1.0)


def level_bounds(bits, signed=True):
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


def _check_bits(bits, signed):
    if not 1 <= bits <= 8:
        raise ValueError(f"bit-width must be in 1..8, got {bits}")
    if signed and bits < 2:
        raise ValueError("signed symmetric quantization needs at least 2 bits")


@dataclass(frozen=True)
class QuantParams:
    """Threshold(s) and step(s) of a symmetric fixed-point grid.

    ``threshold`` and ``step`` are scalars for per-tensor schemes and vectors
    along ``axis`` for the per-filter scheme. A zero threshold yields a zero
    step and ``degenerate`` is set.
    """

    bits: int
    scheme: str
    threshold: object
    step: object
    signed: bool = True
    quantile: float = 1.0
    axis: int = -1

    @property
    def degenerate(self):
        return bool(np.any(np.asarray(self.step) == 0))

    @property
    def bounds(self):
        return level_bounds(self.bits, self.signed)


def _step_for(threshold, bits, signed):
    lo, hi = level_bounds(bits, signed)
    return np.asarray(threshold, dtype=float) / hi


def weight_threshold_per_tensor(w):
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise ValueError("empty tensor")
    return float(np.max(np.abs(w)))


def weight_threshold_per_filter(w, axis=-1):
    """Max-abs per slice along ``axis`` (per output filter for a 4-D kernel, per column for a matrix)."""
    w = np.asarray(w, dtype=float)
    if w.ndim not in (2, 4):
        raise ValueError(f"per-filter thresholds need a kernel or matrix, got order {w.ndim}")
    if w.size == 0:
        raise ValueError("empty tensor")
    axis = axis % w.ndim
    others = tuple(k for k in range(w.ndim) if k != axis)
    return np.max(np.abs(w), axis=others)


def weight_threshold_quantile(w, q):
    """Lower quantile of ``|w|``: the sorted element at index ``ceil(q * n) - 1``."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {q}")
    a = np.sort(np.abs(np.ravel(np.asarray(w, dtype=float))))
    if a.size == 0:
        raise ValueError("empty tensor")
    # round() guards against q * n landing a hair above an integer
    k = max(1, math.ceil(round(q * a.size, 9)))
    return float(a[k - 1])


def weight_params(w, bits=8, scheme="per-tensor", q=1.0, axis=-1):
    """Estimate thresholds and steps for quantizing ``w``."""
    _check_bits(bits, True)
    if scheme == "per-tensor":
        t = weight_threshold_per_tensor(w)
    elif scheme == "per-filter":
        t = weight_threshold_per_filter(w, axis)
    elif scheme == "quantile":
        t = weight_threshold_quantile(w, q)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    step = _step_for(t, bits, True)
    if np.ndim(t) == 0:
        t, step = float(t), float(step)
    return QuantParams(bits, scheme, t, step, True, q, axis)


def _broadcast(v, ndim, axis):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return v
    shape = [1] * ndim
    shape[axis % ndim] = v.size
    return v.reshape(shape)


def quantize_levels(w, p):
    """Integer grid indices of ``w`` under ``p`` (before multiplying by the step)."""
    w = np.asarray(w, dtype=float)
    step = _broadcast(p.step, w.ndim, p.axis)
    if step.ndim and step.shape[p.axis % w.ndim] != w.shape[p.axis % w.ndim]:
        raise ValueError("per-filter parameters do not match the tensor")
    zero = step == 0
    if np.any(zero):
        if np.any((w != 0) & zero):
            raise ValueError("zero quantization step with nonzero weights")
    safe = np.where(zero, 1.0, step)
    lo, hi = p.bounds
    return np.clip(np.rint(w / safe), lo, hi)


def quantize_weights(w, p):
    """``Clamp(round(w / s), lo, hi) * s``."""
    w = np.asarray(w, dtype=float)
    return quantize_levels(w, p) * _broadcast(p.step, w.ndim, p.axis)


def quantize(w, bits=8, scheme="per-tensor", q=1.0, axis=-1):
    return quantize_weights(w, weight_params(w, bits, scheme, q, axis))


def search_quantile(w, bits, metric=None, grid=DEFAULT_QUANTILE_GRID):
    """Pick the quantile threshold minimizing ``metric(w, w_q)`` over ``grid``.

    The default metric is the squared quantization error. Returns
    ``(best_q, scores)`` with one score per grid entry.
    """
    if metric is None:
        def metric(a, b):
            return float(np.sum((a - b) ** 2))
    scores = []
    for q in grid:
        scores.append(metric(w, quantize(w, bits, "quantile", q)))
    best = int(np.argmin(scores))
    return grid[best], scores


@dataclass(frozen=True)
class ActivationRange:
    t_left: float
    t_right: float
    nonnegative: bool

    def __post_init__(self):
        if self.t_left > self.t_right:
            raise ValueError("t_left must not exceed t_right")
        if self.nonnegative and self.t_left < 0:
            raise ValueError("nonnegative range with negative left border")

    @property
    def width(self):
        return self.t_right - self.t_left


def activation_range(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty tensor")
    lo, hi = float(np.min(x)), float(np.max(x))
    return ActivationRange(lo, hi, lo >= 0)


def activation_step(rng, bits):
    signed = not rng.nonnegative
    _check_bits(bits, signed)
    return rng.width / level_bounds(bits, signed)[1]


def quantize_activations(x, rng, bits=8):
    """Quantize a feature map on the grid implied by its range.

    Unsigned levels ``[0, 2^N - 1]`` are used for nonnegative ranges, signed
    levels ``[-2^(N-1), 2^(N-1) - 1]`` otherwise. A zero-width range maps every
    entry to the single representable value, the range's border.
    """
    x = np.asarray(x, dtype=float)
    s = activation_step(rng, bits)
    if s == 0.0:
        return np.full_like(x, rng.t_left)
    lo, hi = level_bounds(bits, not rng.nonnegative)
    return np.clip(np.rint(x / s), lo, hi) * s


class ActivationQuantizer:
    """Stateful activation quantizer.

    In ``"static"`` mode the range is calibrated on the first call (or by
    :meth:`calibrate`) and frozen; in ``"dynamic"`` mode it is re-estimated on
    every call.
    """

    def __init__(self, bits=8, mode="static"):
        if mode not in ("static", "dynamic"):
            raise ValueError(f"unknown mode {mode!r}")
        self.bits = bits
        self.mode = mode
        self.range = None

    def calibrate(self, x):
        self.range = activation_range(x)
        return self.range

    def __call__(self, x):
        if self.mode == "dynamic" or self.range is None:
            self.calibrate(x)
        return quantize_activations(x, self.range, self.bits)


def ste_backward(upstream_grad, x, rng):
    """Straight-through gradient masked to entries inside ``[t_left, t_right]``."""
    g = np.asarray(upstream_grad, dtype=float)
    x = np.asarray(x, dtype=float)
    if g.shape != x.shape:
        raise ValueError(f"gradient shape {g.shape} differs from input shape {x.shape}")
    mask = (x >= rng.t_left) & (x <= rng.t_right)
    return g * mask


def quantize_tucker(f, bits=8, scheme="per-tensor", q=1.0, parts=("core", "u3", "u4")):
    """Quantize the core and channel factors of a partial Tucker form independently.

    With ``scheme="per-filter"`` the factor matrices get per-column thresholds
    and the core per-output-slice thresholds.
    """
    def one(a):
        return quantize(a, bits, scheme, q, axis=-1)

    core = one(f.core) if "core" in parts else f.core
    u3 = one(f.u3) if "u3" in parts else f.u3
    u4 = one(f.u4) if "u4" in parts else f.u4
    return PartialTucker2(core, u3, u4, list(f.errors))


def pack_levels(w, p):
    """Integer level codes of ``w`` as one byte per entry (int8 or uint8)."""
    levels = quantize_levels(w, p)
    dtype = np.int8 if p.signed else np.uint8
    return levels.astype(dtype)
