"""Dense tensor arithmetic: unfoldings, mode products, norms and truncated SVD.

Tensors are plain ``numpy.ndarray`` objects in float64. Modes are 0-based.

Unfolding convention: the mode-``n`` unfolding of a tensor of shape
``(I_0, ..., I_{N-1})`` is the ``I_n x prod(I_k, k != n)`` matrix whose columns
are the mode-``n`` fibers, ordered so that the remaining indices vary with the
lowest-numbered mode fastest.
"""

import numpy as np


def _check_mode(ndim, n):
    if not 0 <= n < ndim:
        raise ValueError(f"mode {n} out of range for order-{ndim} tensor")


def mode_unfold(t, n):
    """Mode-``n`` matricization of ``t`` (fibers as columns)."""
    t = np.asarray(t, dtype=float)
    _check_mode(t.ndim, n)
    return np.reshape(np.moveaxis(t, n, 0), (t.shape[n], -1), order="F")


def mode_fold(m, n, shape):
    """Inverse of :func:`mode_unfold`."""
    m = np.asarray(m, dtype=float)
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), n)
    rest = int(np.prod(shape)) // shape[n] if shape[n] else 0
    if m.ndim != 2 or m.shape != (shape[n], rest):
        raise ValueError(f"matrix of shape {m.shape} cannot fold into {shape} along mode {n}")
    moved = (shape[n],) + shape[:n] + shape[n + 1:]
    return np.moveaxis(np.reshape(m, moved, order="F"), 0, n)


def mode_product(t, b, n):
    """Mode-``n`` product ``t x_n b``.

    ``c[..., l, ...] = sum_i t[..., i, ...] * b[l, i]``; the mode-``n`` extent
    is replaced by ``b.shape[0]``.
    """
    t = np.asarray(t, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_mode(t.ndim, n)
    if b.ndim != 2 or b.shape[1] != t.shape[n]:
        raise ValueError(
            f"matrix of shape {b.shape} incompatible with mode {n} of extent {t.shape[n]}"
        )
    return np.moveaxis(np.tensordot(b, t, axes=(1, n)), 0, n)


def multilinear_product(core, factors, modes=None):
    """Full multilinear product ``[[core; B_0, ..., B_{N-1}]]``.

    ``modes`` restricts the product to a subset of modes, pairing
    ``factors[k]`` with ``modes[k]``.
    """
    core = np.asarray(core, dtype=float)
    if modes is None:
        modes = range(core.ndim)
    modes = list(modes)
    if len(factors) != len(modes):
        raise ValueError(f"expected {len(modes)} factors, got {len(factors)}")
    out = core
    for n, b in zip(modes, factors):
        out = mode_product(out, b, n)
    return out


def frobenius_norm(t):
    return float(np.linalg.norm(np.ravel(t)))


def _fix_signs(u, v):
    # largest-magnitude entry of each left singular vector is made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def truncated_svd(m, r):
    """Rank-``r`` truncated SVD of a matrix.

    Returns ``(U, s, V)`` with ``U`` of shape ``(rows, r)``, ``s`` non-increasing
    and ``V`` of shape ``(cols, r)`` so that ``U @ diag(s) @ V.T`` is the best
    rank-``r`` approximation of ``m``. Signs are fixed so that the largest
    magnitude entry of every column of ``U`` is positive.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError("truncated_svd expects a matrix")
    r = int(r)
    if not 1 <= r <= min(m.shape):
        raise ValueError(f"rank {r} out of range for matrix of shape {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, v = _fix_signs(u[:, :r], vt[:r].T)
    return u, s[:r], v


def leading_subspace(m, r):
    """Orthonormal basis of the dominant ``r``-dimensional column space of ``m``.

    ``r`` may exceed the number of columns (up to the number of rows); the
    basis is then completed with left singular vectors of the null space.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim == 2 and m.shape[1] < r <= m.shape[0]:
        u = np.linalg.svd(m, full_matrices=True)[0][:, :r]
        return _fix_signs(u, np.zeros((0, r)))[0]
    return truncated_svd(m, r)[0]
