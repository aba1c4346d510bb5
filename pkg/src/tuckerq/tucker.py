"""Tucker decomposition by higher-order orthogonal iteration (HOOI).

Includes the partial rank-(R3, R4) variant used for convolution kernels of
shape ``(D, D, S, S_out)`` and the compression-ratio formulas.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tensor import frobenius_norm, leading_subspace, mode_unfold, multilinear_product


@dataclass
class TuckerFactors:
    """Core tensor plus one orthonormal factor per decomposed mode.

    ``modes`` lists the modes carrying a factor; the others are left
    uncompressed (identity factor). ``errors`` is the relative reconstruction
    error after HOSVD initialization followed by one entry per HOOI sweep.
    """

    core: np.ndarray
    factors: list
    modes: tuple
    errors: list = field(default_factory=list)

    @property
    def rank(self):
        return tuple(self.core.shape[n] for n in self.modes)

    @property
    def shape(self):
        shape = list(self.core.shape)
        for n, u in zip(self.modes, self.factors):
            shape[n] = u.shape[0]
        return tuple(shape)


@dataclass
class PartialTucker2:
    """Rank-(R3, R4) Tucker form of a ``(D, D, S, S_out)`` kernel.

    ``kernel[i, j, s, t] ~ sum core[i, j, a, b] * u3[s, a] * u4[t, b]``.
    """

    core: np.ndarray
    u3: np.ndarray
    u4: np.ndarray
    errors: list = field(default_factory=list)

    @property
    def rank(self):
        return self.u3.shape[1], self.u4.shape[1]

    @property
    def kernel_shape(self):
        d1, d2 = self.core.shape[:2]
        return d1, d2, self.u3.shape[0], self.u4.shape[0]

    def to_tucker(self):
        return TuckerFactors(self.core, [self.u3, self.u4], (2, 3), list(self.errors))

    def reconstruct(self):
        return reconstruct(self.to_tucker())


def _validate_rank(shape, rank, modes):
    if len(rank) != len(modes):
        raise ValueError(f"rank {tuple(rank)} does not match modes {tuple(modes)}")
    for n, r in zip(modes, rank):
        if r < 1:
            raise ValueError(f"degenerate rank {r} for mode {n}")
        if r > shape[n]:
            raise ValueError(f"rank {r} exceeds extent {shape[n]} of mode {n}")


def _project_except(t, factors, modes, skip):
    out = t
    for n, u in zip(modes, factors):
        if n != skip:
            out = np.moveaxis(np.tensordot(u.T, out, axes=(1, n)), 0, n)
    return out


def _core(t, factors, modes):
    return multilinear_product(t, [u.T for u in factors], modes)


def reconstruct(f):
    """Expand Tucker factors back to a dense tensor."""
    for n, u in zip(f.modes, f.factors):
        if u.shape[1] != f.core.shape[n]:
            raise ValueError(
                f"factor for mode {n} has {u.shape[1]} columns, core extent is {f.core.shape[n]}"
            )
    return multilinear_product(f.core, f.factors, f.modes)


def _rel_error(t, tnorm, core, factors, modes):
    if tnorm == 0.0:
        return 0.0
    return frobenius_norm(t - multilinear_product(core, factors, modes)) / tnorm


def hosvd(t, rank, modes=None):
    """Truncated higher-order SVD; the HOOI warm start."""
    t = np.asarray(t, dtype=float)
    modes = tuple(range(t.ndim)) if modes is None else tuple(modes)
    rank = tuple(int(r) for r in rank)
    _validate_rank(t.shape, rank, modes)
    factors = [leading_subspace(mode_unfold(t, n), r) for n, r in zip(modes, rank)]
    return TuckerFactors(_core(t, factors, modes), factors, modes)


def hooi(t, rank, max_iters=50, tol=1e-6, modes=None):
    """Best rank-``rank`` orthogonal Tucker approximation by HOOI.

    Args:
        t: dense tensor.
        rank: target extent for each mode in ``modes``.
        max_iters: maximum number of full sweeps over the modes.
        tol: stop when the relative error improves by less than ``tol``
            (relative to the previous error).
        modes: modes to decompose, default all. Other modes keep identity
            factors.

    Returns:
        TuckerFactors with the relative error history in ``errors``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    t = np.asarray(t, dtype=float)
    init = hosvd(t, rank, modes)
    modes, factors = init.modes, list(init.factors)
    rank = init.rank
    tnorm = frobenius_norm(t)
    err = _rel_error(t, tnorm, init.core, factors, modes)
    errors = [err]
    for _ in range(max_iters):
        if err <= 1e-14:
            break
        for k, (n, r) in enumerate(zip(modes, rank)):
            partial = _project_except(t, factors, modes, n)
            factors[k] = leading_subspace(mode_unfold(partial, n), r)
        core = _core(t, factors, modes)
        new_err = _rel_error(t, tnorm, core, factors, modes)
        errors.append(new_err)
        improvement = err - new_err
        err = new_err
        if improvement < tol * errors[-2]:
            break
    return TuckerFactors(_core(t, factors, modes), factors, modes, errors)


def partial_tucker2(kernel, r3, r4, max_iters=50, tol=1e-6):
    """HOOI over the channel modes of a ``(D, D, S, S_out)`` kernel."""
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 4:
        raise ValueError(f"expected an order-4 kernel, got shape {kernel.shape}")
    f = hooi(kernel, (r3, r4), max_iters=max_iters, tol=tol, modes=(2, 3))
    return PartialTucker2(f.core, f.factors[0], f.factors[1], f.errors)


def tucker_compression_ratio(shape, rank):
    """``prod(I) / (prod(R) + sum(I * R))`` as an exact fraction converted to float."""
    if len(shape) != len(rank) or any(r > i for i, r in zip(shape, rank)):
        raise ValueError(f"rank {tuple(rank)} incompatible with shape {tuple(shape)}")
    num = int(np.prod(shape, dtype=object))
    den = int(np.prod(rank, dtype=object)) + sum(int(i) * int(r) for i, r in zip(shape, rank))
    return float(Fraction(num, den))


def tucker_param_count(d, s, s_out, r3, r4):
    return d * d * r3 * r4 + s * r3 + s_out * r4


def param_compression_ratio(spec, r3, r4):
    """``D^2 S S_out / (D^2 R3 R4 + S R3 + S_out R4)``."""
    d, _, s, s_out = spec.kernel_shape
    if not (1 <= r3 <= s and 1 <= r4 <= s_out):
        raise ValueError(f"rank ({r3}, {r4}) out of range for S={s}, S_out={s_out}")
    return float(Fraction(d * d * s * s_out, tucker_param_count(d, s, s_out, r3, r4)))


def macs_compression_ratio(spec, input_hw, output_hw, r3, r4):
    """``D^2 S S_out / (D^2 R3 R4 + S R3 HW/(H_out W_out) + S_out R4)``."""
    d, _, s, s_out = spec.kernel_shape
    h, w = input_hw
    ho, wo = output_hw
    if min(h, w, ho, wo, r3, r4) < 1:
        raise ValueError("extents and ranks must be positive")
    den = d * d * r3 * r4 + Fraction(s * r3 * h * w, ho * wo) + s_out * r4
    return float(Fraction(d * d * s * s_out) / den)
