"""Acceptance criteria, one test each.

Every test records a ``PASS`` or ``FAIL`` line that pytest prints in an
"acceptance criteria" section of the terminal summary. Run just this module
with ``pytest tests/test_acceptance.py``.
"""

import itertools
import math
import struct
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, rel
from synthetic import exact_rank_kernel, two_layer_instance
from tuckerq.baselines import channel_matrices, channel_prune_lasso, reshape_svd_factorize, spatial_svd_factorize, tt_factorize
from tuckerq.conv import ConvSpec, _conv, conv2d_direct, conv2d_tucker, count_macs, pointwise
from tuckerq.objectives import KDConfig, kd_loss, kd_loss_grad
from tuckerq.quantize import (
    ActivationRange,
    pack_levels,
    quantize_tucker,
    quantize_weights,
    ste_backward,
    weight_params,
)
from tuckerq.ranksearch import (
    LayerEntry,
    OutputErrorOracle,
    SearchConfig,
    greedy_multi_pass,
    greedy_single_pass,
    layerwise_rank_select,
)
from tuckerq.tensorfile import (
    BadHeaderError,
    BadMagicError,
    BadVersionError,
    ExtentOverflowError,
    TruncatedPayloadError,
    parse_tensor,
    serialize_packed,
    serialize_tensor,
)
from tuckerq.tucker import (
    PartialTucker2,
    hooi,
    hosvd,
    macs_compression_ratio,
    param_compression_ratio,
    partial_tucker2,
    reconstruct,
    tucker_compression_ratio,
)


def verdict(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_full_rank_exactness():
    rng = np.random.default_rng(1)
    worst, slowest = 0.0, 0.0
    for shape in [(4, 5, 6), (3, 4, 2, 5), (2, 3, 4, 5, 2)]:
        t = rng.standard_normal(shape)
        f = hooi(t, shape)
        worst = max(worst, rel(reconstruct(f), t))
    for _ in range(3):
        k = rng.standard_normal((3, 3, 64, 64))
        start = time.perf_counter()
        f = partial_tucker2(k, 64, 64)
        slowest = max(slowest, time.perf_counter() - start)
        worst = max(worst, rel(f.reconstruct(), k))
        start = time.perf_counter()
        g = hooi(k, k.shape)
        slowest = max(slowest, time.perf_counter() - start)
        worst = max(worst, rel(reconstruct(g), k))
    verdict("full-rank exactness", worst < 1e-10 and slowest < 1.0,
            f"max rel error {worst:.2e} (< 1e-10), slowest (3,3,64,64) kernel {slowest:.3f}s (< 1s)")


def test_hooi_monotone():
    rng = np.random.default_rng(2)
    worst_rise, worst_vs_init = -math.inf, -math.inf
    for _ in range(100):
        t = rng.standard_normal((6, 6, 6, 6))
        f = hooi(t, (3, 3, 3, 3), tol=0.0)
        init = rel(reconstruct(hosvd(t, (3, 3, 3, 3))), t)
        worst_rise = max(worst_rise, float(np.max(np.diff(f.errors))))
        worst_vs_init = max(worst_vs_init, f.errors[-1] - init)
    ok = worst_rise <= 1e-12 and worst_vs_init <= 1e-12
    verdict("HOOI monotonicity", ok,
            f"largest per-iteration rise {worst_rise:.2e}, final minus HOSVD init {worst_vs_init:.2e} over 100 tensors")


def test_factorized_conv_equivalence():
    rng = np.random.default_rng(3)
    worst = 0.0
    start = time.perf_counter()
    for stride, pad in itertools.product((1, 2), (0, 1)):
        for _ in range(20):
            d = int(rng.choice([1, 3, 5]))
            s, so = (int(v) for v in rng.integers(2, 9, size=2))
            k = rng.standard_normal((d, d, s, so))
            f = partial_tucker2(k, int(rng.integers(1, s + 1)), int(rng.integers(1, so + 1)))
            spec = ConvSpec(k.shape, stride, pad)
            x = rng.standard_normal((int(rng.integers(d, 12)), int(rng.integers(d, 12)), s))
            worst = max(worst, rel(conv2d_tucker(x, f, spec), conv2d_direct(x, f.reconstruct(), spec)))
    elapsed = time.perf_counter() - start
    verdict("factorized-convolution equivalence", worst < 1e-10 and elapsed < 5.0,
            f"max rel deviation {worst:.2e} over 80 instances in {elapsed:.2f}s")


def literal_counts(f, spec, x):
    """Parameter and MAC counts read off materialized factors and stage outputs."""
    d, _, s, so = spec.kernel_shape
    r3, r4 = f.rank
    y1 = pointwise(x, f.u3)
    y2 = _conv(y1, f.core, (spec.stride,) * 2, (spec.padding,) * 2)
    y3 = pointwise(y2, f.u4.T)
    full_out = conv2d_direct(x, f.reconstruct(), spec)
    params = f.core.size + f.u3.size + f.u4.size
    macs = y1.size * s + y2.size * d * d * r3 + y3.size * r4
    return params, macs, full_out.size * d * d * s, full_out.shape[:2]


def test_ratio_arithmetic():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(50):
        d = int(rng.choice([1, 3, 5, 7]))
        s, so = (int(v) for v in rng.integers(1, 17, size=2))
        r3, r4 = int(rng.integers(1, s + 1)), int(rng.integers(1, so + 1))
        spec = ConvSpec((d, d, s, so), int(rng.integers(1, 3)), int(rng.integers(0, d // 2 + 1)))
        hw = (int(rng.integers(d, 15)), int(rng.integers(d, 15)))
        f = PartialTucker2(rng.standard_normal((d, d, r3, r4)), rng.standard_normal((s, r3)),
                           rng.standard_normal((so, r4)))
        x = rng.standard_normal((*hw, s))
        params, macs, macs_full, out_hw = literal_counts(f, spec, x)
        full = d * d * s * so
        mismatches += param_compression_ratio(spec, r3, r4) != float(Fraction(full, params))
        mismatches += macs_compression_ratio(spec, hw, out_hw, r3, r4) != float(Fraction(macs_full, macs))
        mismatches += count_macs(spec, hw, (r3, r4)) != macs or count_macs(spec, hw) != macs_full
        t_shape = tuple(int(n) for n in rng.integers(2, 6, size=3))
        t_rank = tuple(int(rng.integers(1, n + 1)) for n in t_shape)
        g = hooi(rng.standard_normal(t_shape), t_rank, max_iters=2)
        stored = g.core.size + sum(u.size for u in g.factors)
        mismatches += tucker_compression_ratio(t_shape, t_rank) != float(Fraction(int(np.prod(t_shape)), stored))
    verdict("ratio arithmetic", mismatches == 0, f"{mismatches} mismatches against literal counts on 50 configurations")


def test_quantization_bound():
    rng = np.random.default_rng(5)
    worst_excess, non_idem, most_levels = -math.inf, 0, 0
    for _ in range(100):
        w = rng.standard_normal(tuple(int(n) for n in rng.integers(1, 9, size=4))) * rng.uniform(0.01, 10)
        p = weight_params(w, 8, "per-tensor")
        wq = quantize_weights(w, p)
        inside = np.abs(w) <= p.threshold
        worst_excess = max(worst_excess, float(np.max(np.abs(w - wq)[inside])) - p.step / 2)
        non_idem += not np.array_equal(quantize_weights(wq, p), wq)
        most_levels = max(most_levels, len(np.unique(wq)))
    ok = worst_excess <= 1e-12 and non_idem == 0 and most_levels <= 256
    verdict("quantization bound", ok,
            f"max error minus s/2 {worst_excess:.2e}, {non_idem} non-idempotent, at most {most_levels} levels")


def test_packed_memory():
    rng = np.random.default_rng(6)
    bad = 0
    for shape in [(3, 3, 64, 64), (1, 1, 7, 5), (5, 5, 3, 17)]:
        w = rng.standard_normal(shape)
        p = weight_params(w, 8)
        header = 6 + 8 * len(shape)
        packed = serialize_packed(pack_levels(w, p), p.step, 8)[header + 10 + 8:]
        fp32 = np.asarray(w, dtype="<f4").tobytes()
        bad += 4 * len(packed) != len(fp32)
    verdict("packed 8-bit memory", bad == 0, f"packed payload is 1/4 of fp32 for {3 - bad}/3 tensors")


def brute_force_rank(layer, x, y, eps):
    best = None
    for r3, r4 in itertools.product(range(1, 7), range(1, 9)):
        f = quantize_tucker(partial_tucker2(layer.kernel, r3, r4), 8)
        e = np.sum((y - conv2d_direct(x, f.reconstruct(), layer.spec)) ** 2)
        if e <= eps and (best is None or r3 + r4 < best):
            best = r3 + r4
    return best


def test_layerwise_rank_selection():
    rng = np.random.default_rng(7)
    agree = 0
    start = time.perf_counter()
    for _ in range(20):
        layer = LayerEntry("a", rng.standard_normal((3, 3, 6, 8)), bits=8)
        x = rng.standard_normal((6, 6, 6))
        y = conv2d_direct(x, layer.kernel, layer.spec)
        eps = 0.01 * np.sum(y ** 2)
        r = layerwise_rank_select(layer, x, y, eps)
        f = quantize_tucker(partial_tucker2(layer.kernel, *r), 8)
        feasible = np.sum((y - conv2d_direct(x, f.reconstruct(), layer.spec)) ** 2) <= eps
        agree += feasible and sum(r) == brute_force_rank(layer, x, y, eps)
    elapsed = time.perf_counter() - start
    verdict("layerwise rank selection", agree == 20 and elapsed < 60,
            f"{agree}/20 match brute force in {elapsed:.1f}s")


def test_multi_pass_vs_single_pass():
    diffs = []
    for seed in range(50):
        layers = two_layer_instance(seed)
        cfg = SearchConfig(-0.05, passes=100)
        single = greedy_single_pass(layers, cfg, OutputErrorOracle(layers, input_hw=(6, 6), seed=seed))
        multi = greedy_multi_pass(layers, cfg, OutputErrorOracle(layers, input_hw=(6, 6), seed=seed))
        diffs.append(single.total_rank() - multi.total_rank())
    wins = sum(d >= 0 for d in diffs)
    dist = ", ".join(f"{k:+d}:{v}" for k, v in sorted(Counter(diffs).items()))
    verdict("multi-pass vs single-pass", wins >= 45,
            f"multi <= single in {wins}/50; single minus multi total rank {{{dist}}}")


def spatial_matrix_loops(w):
    d, _, s, so = w.shape
    m = np.zeros((d * s, d * so))
    for i, j, c, t in itertools.product(range(d), range(d), range(s), range(so)):
        m[c * d + i, t * d + j] = w[i, j, c, t]
    return m


def planted_lasso(seed, n=40, s=6, d=3, so=4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, s, d * d))
    w = rng.standard_normal((d, d, s, so))
    mats = channel_matrices(w)
    planted = tuple(sorted(int(c) for c in rng.choice(s, 2, replace=False)))
    y = sum(x[:, i, :] @ mats[i].T for i in planted) + 0.01 * rng.standard_normal((n, so))
    return x, w, y, planted


def test_baseline_optimality():
    rng = np.random.default_rng(8)
    ey_worst, tt_worst = 0.0, 0.0
    for _ in range(10):
        w = rng.standard_normal((3, 3, 5, 7))
        r = int(rng.integers(1, 6))
        sv = np.linalg.svd(w.reshape(45, 7), compute_uv=False)
        got = np.linalg.norm(w - reshape_svd_factorize(w, r).reconstruct())
        ey_worst = max(ey_worst, abs(got - math.sqrt(np.sum(sv[r:] ** 2))) / np.linalg.norm(w))
        r = int(rng.integers(1, 15))
        sv = np.linalg.svd(spatial_matrix_loops(w), compute_uv=False)
        got = np.linalg.norm(w - spatial_svd_factorize(w, r).reconstruct())
        ey_worst = max(ey_worst, abs(got - math.sqrt(np.sum(sv[r:] ** 2))) / np.linalg.norm(w))
        ranks = (2, int(rng.integers(1, 5)), 3)
        g1 = rng.standard_normal((5, ranks[0]))
        g2 = rng.standard_normal((ranks[0], 3, ranks[1]))
        g3 = rng.standard_normal((ranks[1], 3, ranks[2]))
        g4 = rng.standard_normal((ranks[2], 7))
        k = np.einsum("sa,aib,bjc,ct->ijst", g1, g2, g3, g4)
        tt_worst = max(tt_worst, rel(tt_factorize(k, ranks).reconstruct(), k))
    hits = 0
    for seed in range(100):
        x, w, y, planted = planted_lasso(seed)
        hits += channel_prune_lasso(x, w, 2, y=y).kept == planted
    ok = ey_worst < 1e-8 and tt_worst < 1e-8 and hits >= 95
    verdict("baseline optimality", ok,
            f"Eckart-Young deviation {ey_worst:.2e}, TT recovery {tt_worst:.2e}, lasso planted {hits}/100")


def softmax_ref(z, tau=1.0):
    e = np.exp(z / tau - np.max(z / tau, axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_kd_loss():
    rng = np.random.default_rng(9)
    t, s = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    y = rng.integers(0, 3, size=5)
    tau = 2.5
    hard = -np.mean(np.log(softmax_ref(s)[np.arange(5), y]))
    soft = -np.mean(np.sum(softmax_ref(t, tau) * np.log(softmax_ref(s, tau)), axis=1))
    red0 = abs(kd_loss(t, s, y, KDConfig(0.0, tau)) - hard)
    red1 = abs(kd_loss(t, s, y, KDConfig(1.0, tau)) - tau ** 2 * soft)
    cfg = KDConfig(0.3, tau)
    g = kd_loss_grad(t, s, y, cfg)
    fd = np.zeros_like(s)
    h = 1e-6
    for idx in np.ndindex(s.shape):
        e = np.zeros_like(s)
        e[idx] = h
        fd[idx] = (kd_loss(t, s + e, y, cfg) - kd_loss(t, s - e, y, cfg)) / (2 * h)
    grad_rel = rel(g, fd)
    shift = abs(kd_loss(t + 3.7, s - 11.2, y, cfg) - kd_loss(t, s, y, cfg))
    ok = red0 <= 1e-12 and red1 <= 1e-12 and grad_rel < 1e-5 and shift < 1e-10
    verdict("KD loss", ok,
            f"alpha=0 gap {red0:.1e}, alpha=1 gap {red1:.1e}, gradient rel {grad_rel:.1e}, shift {shift:.1e}")


def test_ste_backward():
    x = np.array([[-1.0, 0.5], [2.0, 1.0]])
    out = ste_backward(np.ones((2, 2)), x, ActivationRange(0.0, 1.0, True))
    example = np.array_equal(out, [[0.0, 1.0], [0.0, 1.0]])
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal((4, 5, 3))
        r = ActivationRange(*sorted(rng.standard_normal(2)), False)
        g1, g2 = rng.standard_normal((2, 4, 5, 3))
        a, b = rng.standard_normal(2)
        lhs = ste_backward(a * g1 + b * g2, x, r)
        rhs = a * ste_backward(g1, x, r) + b * ste_backward(g2, x, r)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    verdict("STE backward", example and worst <= 1e-12,
            f"2x2 example {'matches' if example else 'differs'}, linearity deviation {worst:.1e}")


def test_file_format():
    rng = np.random.default_rng(11)
    exact = 0
    for _ in range(1000):
        shape = tuple(int(n) for n in rng.integers(1, 6, size=rng.integers(1, 6)))
        t = rng.standard_normal(shape) * 10.0 ** float(rng.integers(-200, 200))
        exact += parse_tensor(serialize_tensor(t)).tobytes() == t.tobytes()
    golden = bytes.fromhex("5451543101030200000000000000020000000000000002000000000000000000000000000000"
                           "000000000000f03f00000000000000400000000000000840000000000000104000000000"
                           "0000144000000000000018400000000000001c40")
    golden_ok = np.array_equal(parse_tensor(golden), np.arange(8.0).reshape(2, 2, 2))
    good = serialize_tensor(np.arange(8.0).reshape(2, 2, 2))
    cases = {
        BadMagicError: b"XXXX" + good[4:],
        BadVersionError: good[:4] + b"\x09" + good[5:],
        TruncatedPayloadError: good[:-3],
        ExtentOverflowError: good[:5] + b"\x02" + struct.pack("<2Q", 2 ** 62, 2 ** 62),
        BadHeaderError: good[:6] + struct.pack("<Q", 0) + good[14:],
    }
    categories = 0
    for err, data in cases.items():
        try:
            parse_tensor(data)
        except err:
            categories += 1
        except Exception:
            pass
    ok = exact == 1000 and golden_ok and categories == len(cases)
    verdict("file format", ok,
            f"{exact}/1000 bitwise round-trips, golden {'ok' if golden_ok else 'mismatch'}, "
            f"{categories}/{len(cases)} corrupt-input categories")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
