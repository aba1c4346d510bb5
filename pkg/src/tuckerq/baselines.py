"""Comparison factorizations of convolution kernels.

Reshape-SVD, spatial SVD, tensor-train and lasso channel pruning. Every
factorization can reconstruct its kernel and run its own factorized
convolution path.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .conv import conv2d_generic, pointwise
from .tensor import truncated_svd

logger = logging.getLogger(__name__)

METHODS = ("reshape-svd", "spatial-svd", "tt", "tucker", "lasso")


def _check_kernel(w):
    w = np.asarray(w, dtype=float)
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ValueError(f"expected a (D, D, S, S_out) kernel, got shape {w.shape}")
    return w


def _split_svd(m, r):
    u, s, v = truncated_svd(m, r)
    root = np.sqrt(s)
    return u * root, (v * root).T


@dataclass
class SvdFactorPair:
    """``D x D`` conv into ``r`` channels followed by a pointwise ``r -> S_out`` conv."""

    w1: np.ndarray
    w2: np.ndarray

    @property
    def rank(self):
        return self.w2.shape[0]

    def reconstruct(self):
        return np.tensordot(self.w1, self.w2, axes=(3, 0))

    def conv(self, x, spec):
        y = conv2d_generic(x, self.w1, spec.stride, spec.padding)
        return pointwise(y, self.w2)

    def param_count(self):
        return self.w1.size + self.w2.size


def reshape_svd_factorize(w, r):
    """Rank-``r`` SVD of the ``D^2 S x S_out`` reshaping."""
    w = _check_kernel(w)
    d, _, s, s_out = w.shape
    if not 1 <= r <= min(d * d * s, s_out):
        raise ValueError(f"rank {r} out of range for kernel {w.shape}")
    a, b = _split_svd(w.reshape(d * d * s, s_out), r)
    return SvdFactorPair(a.reshape(d, d, s, r), b)


@dataclass
class SpatialSvdPair:
    """Vertical ``D x 1`` conv into ``r`` channels, then horizontal ``1 x D`` conv.

    ``w_vert[s, i, r]`` and ``w_horz[r, t, j]`` for kernel row ``i``, column
    ``j``, input channel ``s`` and output channel ``t``.
    """

    w_vert: np.ndarray
    w_horz: np.ndarray

    @property
    def rank(self):
        return self.w_vert.shape[2]

    def reconstruct(self):
        # kernel[i, j, s, t] = sum_r w_vert[s, i, r] * w_horz[r, t, j]
        return np.einsum("sir,rtj->ijst", self.w_vert, self.w_horz)

    def conv(self, x, spec):
        vert = np.transpose(self.w_vert, (1, 0, 2))[:, None]  # (D, 1, S, R)
        horz = np.transpose(self.w_horz, (2, 0, 1))[None]  # (1, D, R, S_out)
        y = conv2d_generic(x, vert, (spec.stride, 1), (spec.padding, 0))
        return conv2d_generic(y, horz, (1, spec.stride), (0, spec.padding))

    def param_count(self):
        return self.w_vert.size + self.w_horz.size


def spatial_matrix(w):
    """The ``DS x D S_out`` reshaping with rows ``(s, i)`` and columns ``(t, j)``."""
    w = _check_kernel(w)
    d, _, s, s_out = w.shape
    return np.transpose(w, (2, 0, 3, 1)).reshape(s * d, s_out * d)


def spatial_svd_factorize(w, r):
    w = _check_kernel(w)
    d, _, s, s_out = w.shape
    if not 1 <= r <= min(d * s, d * s_out):
        raise ValueError(f"rank {r} out of range for kernel {w.shape}")
    a, b = _split_svd(spatial_matrix(w), r)
    return SpatialSvdPair(a.reshape(s, d, r), b.reshape(r, s_out, d))


@dataclass
class TTFactors:
    """Tensor-train cores of the ``(S, D, D, S_out)`` reordering of a kernel."""

    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g4: np.ndarray

    @property
    def ranks(self):
        return self.g1.shape[1], self.g2.shape[2], self.g3.shape[2]

    def reconstruct(self):
        # kernel[i, j, s, t] = sum g1[s, a] g2[a, i, b] g3[b, j, c] g4[c, t]
        return np.einsum("sa,aib,bjc,ct->ijst", self.g1, self.g2, self.g3, self.g4)

    def conv(self, x, spec):
        y = pointwise(x, self.g1)
        vert = np.transpose(self.g2, (1, 0, 2))[:, None]  # (D, 1, R1, R2)
        y = conv2d_generic(y, vert, (spec.stride, 1), (spec.padding, 0))
        horz = np.transpose(self.g3, (1, 0, 2))[None]  # (1, D, R2, R3)
        y = conv2d_generic(y, horz, (1, spec.stride), (0, spec.padding))
        return pointwise(y, self.g4)

    def param_count(self):
        return self.g1.size + self.g2.size + self.g3.size + self.g4.size


def tt_svd(t, ranks):
    """TT-SVD with prescribed internal ranks; returns the list of 3-D cores."""
    t = np.asarray(t, dtype=float)
    dims = t.shape
    if len(ranks) != len(dims) - 1:
        raise ValueError(f"need {len(dims) - 1} TT-ranks for an order-{len(dims)} tensor")
    cores = []
    c = t
    r_prev = 1
    for k, r in enumerate(ranks):
        c = c.reshape(r_prev * dims[k], -1)
        if not 1 <= r <= min(c.shape):
            raise ValueError(f"TT-rank {r} at position {k} exceeds bound {min(c.shape)}")
        u, s, v = truncated_svd(c, r)
        cores.append(u.reshape(r_prev, dims[k], r))
        c = s[:, None] * v.T
        r_prev = r
    cores.append(c.reshape(r_prev, dims[-1], 1))
    return cores


def max_tt_ranks(dims):
    """Largest admissible TT-ranks for a tensor with the given extents."""
    ranks = []
    r_prev = 1
    for k in range(len(dims) - 1):
        r = min(r_prev * dims[k], int(np.prod(dims[k + 1:])))
        ranks.append(r)
        r_prev = r
    return tuple(ranks)


def tt_factorize(w, ranks):
    """Rank-``(R1, R2, R3)`` TT-SVD of a ``(D, D, S, S_out)`` kernel (reordered to ``(S, D, D, S_out)``)."""
    w = _check_kernel(w)
    cores = tt_svd(np.transpose(w, (2, 0, 1, 3)), ranks)
    return TTFactors(cores[0][0], cores[1], cores[2], cores[3][:, :, 0])


@dataclass
class ChannelSelection:
    """Lasso channel-pruning result.

    ``beta`` are coefficients of unit-norm channels, ``refit_w`` is the full
    kernel with dropped input channels zeroed and the kept ones refit by least
    squares.
    """

    beta: np.ndarray
    kept: tuple
    refit_w: np.ndarray
    lam: float
    objective: list = field(default_factory=list)
    converged: bool = True

    def reconstruct(self):
        return self.refit_w

    def conv(self, x, spec):
        kept = list(self.kept)
        if not kept:
            ho, wo = spec.output_hw(np.shape(x)[:2])
            return np.zeros((ho, wo, self.refit_w.shape[3]))
        x = np.asarray(x, dtype=float)[:, :, kept]
        return conv2d_generic(x, self.refit_w[:, :, kept], spec.stride, spec.padding)

    def param_count(self):
        d = self.refit_w.shape[0]
        return d * d * len(self.kept) * self.refit_w.shape[3]


def extract_patches(x, spec, positions):
    """Input patches under output pixels; returns the ``(n, S, D^2)`` sample stack."""
    x = np.asarray(x, dtype=float)
    d = spec.kernel_shape[0]
    p, st = spec.padding, spec.stride
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.empty((len(positions), x.shape[2], d * d))
    for k, (h, w) in enumerate(positions):
        block = xp[h * st:h * st + d, w * st:w * st + d, :]  # (D, D, S)
        out[k] = block.reshape(d * d, -1).T
    return out


def channel_matrices(w):
    """Per-input-channel filter matrices ``W_i`` of shape ``(S_out, D^2)``."""
    w = _check_kernel(w)
    d, _, s, s_out = w.shape
    return np.transpose(w, (2, 3, 0, 1)).reshape(s, s_out, d * d)


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _ista(gram, aty, yy, lam, lipschitz, beta0, max_iter, tol):
    def objective(b):
        return float(yy - 2 * b @ aty + b @ gram @ b + lam * np.sum(np.abs(b)))

    beta = beta0.copy()
    history = [objective(beta)]
    for _ in range(max_iter):
        grad = 2 * (gram @ beta - aty)
        beta = _soft(beta - grad / lipschitz, lam / lipschitz)
        history.append(objective(beta))
        if abs(history[-2] - history[-1]) <= tol * max(1.0, abs(history[-2])):
            return beta, history, True
    return beta, history, False


def channel_prune_lasso(x_samples, w, budget, lam=0.0, y=None, max_iter=5000, tol=1e-8,
                        bisect_iters=60):
    """Select at most ``budget`` input channels by lasso, then refit their filters.

    Args:
        x_samples: ``(n, S, D^2)`` input patches.
        w: ``(D, D, S, S_out)`` kernel; channel filters are normalized to unit
            Frobenius norm before the solve.
        budget: maximum number of kept channels.
        lam: starting L1 penalty. It is increased by bisection until at most
            ``budget`` coefficients are nonzero.
        y: ``(n, S_out)`` target responses; defaults to the kernel's own
            response ``sum_i X_i W_i^T``.

    Returns:
        ChannelSelection. ``converged`` is False when ISTA hit ``max_iter``;
        the last iterate is reported in that case.
    """
    x_samples = np.asarray(x_samples, dtype=float)
    n, s, k = x_samples.shape
    mats = channel_matrices(w)
    if mats.shape[0] != s or mats.shape[2] != k:
        raise ValueError("sample stack does not match the kernel")
    if not 0 <= budget <= s:
        raise ValueError(f"channel budget {budget} out of range for {s} channels")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")

    contrib = np.einsum("nik,iok->ino", x_samples, mats)  # (S, n, S_out)
    if y is None:
        y = contrib.sum(axis=0)
    y = np.asarray(y, dtype=float)
    norms = np.linalg.norm(mats.reshape(s, -1), axis=1)
    live = norms > 0
    design = np.zeros((n * y.shape[1], s))
    design[:, live] = (contrib[live] / norms[live, None, None]).reshape(int(live.sum()), -1).T
    yv = y.ravel()
    gram = design.T @ design
    aty = design.T @ yv
    yy = float(yv @ yv)
    lipschitz = max(2 * np.linalg.norm(design, 2) ** 2, 1e-300)

    def solve(l, start):
        return _ista(gram, aty, yy, l, lipschitz, start, max_iter, tol)

    beta, history, converged = solve(lam, np.zeros(s))
    if np.count_nonzero(beta) > budget:
        lo, hi = lam, max(lam, 2 * float(np.max(np.abs(aty))))
        best = solve(hi, np.zeros(s))
        for _ in range(bisect_iters):
            mid = 0.5 * (lo + hi)
            trial = solve(mid, beta)
            if np.count_nonzero(trial[0]) <= budget:
                hi, best = mid, trial
                if np.count_nonzero(trial[0]) == budget:
                    break
            else:
                lo = mid
        lam = hi
        beta, history, converged = best
    if not converged:
        logger.warning("ISTA did not converge in %d iterations (lambda=%g)", max_iter, lam)

    kept = tuple(int(i) for i in np.flatnonzero(beta))
    refit = np.zeros_like(np.asarray(w, dtype=float))
    if kept:
        xk = x_samples[:, kept, :].reshape(n, -1)
        sol = np.linalg.lstsq(xk, y, rcond=None)[0]  # (|K| * D^2, S_out)
        d = refit.shape[0]
        sol = sol.reshape(len(kept), d, d, -1)
        for slot, i in enumerate(kept):
            refit[:, :, i, :] = sol[slot]
    return ChannelSelection(beta, kept, refit, float(lam), history, converged)


def lasso_residual(x_samples, y, refit_w):
    mats = channel_matrices(refit_w)
    pred = np.einsum("nik,iok->no", x_samples, mats)
    return float(np.sum((y - pred) ** 2))


def baseline_param_count(method, shape, rank):
    """Parameter total of a factorized ``(D, D, S, S_out)`` kernel.

    ``rank`` is an int for the SVD methods and the channel budget for lasso,
    a triple for ``"tt"`` and a pair for ``"tucker"``.
    """
    d, _, s, s_out = shape
    if method == "reshape-svd":
        return d * d * s * rank + rank * s_out
    if method == "spatial-svd":
        return d * s * rank + d * s_out * rank
    if method == "tt":
        r1, r2, r3 = rank
        return s * r1 + r1 * d * r2 + r2 * d * r3 + r3 * s_out
    if method == "tucker":
        r3, r4 = rank
        return d * d * r3 * r4 + s * r3 + s_out * r4
    if method == "lasso":
        return d * d * rank * s_out
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
