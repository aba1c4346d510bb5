"""Command-line interface: ``tuckerq <command> [options]``."""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import baselines, plotting
from .conv import conv2d_direct, conv2d_tucker
from .manifest import ManifestError, load_manifest
from .quantize import pack_levels, quantize_tucker, quantize_weights, weight_params
from .ranksearch import (
    InfeasibleBudget,
    LinearHeadOracle,
    OutputErrorOracle,
    SearchConfig,
    SearchError,
    greedy_multi_pass,
    greedy_single_pass,
    threshold_from_drop,
    ModelState,
)
from .report import REPORT_COLUMNS, report_row, to_csv
from .tensor import frobenius_norm
from .tensorfile import (
    TensorFileError,
    atomic_write,
    load_tensor,
    save_tensor,
    serialize_packed,
)
from .tucker import param_compression_ratio, partial_tucker2

logger = logging.getLogger("tuckerq")


class UsageError(ValueError):
    category = "usage"


def _ints(text, n=None):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} comma-separated integers, got {text!r}")
    return vals


def _select(entries, name):
    if name is None:
        return entries[0]
    for rec, layer in entries:
        if rec.name == name:
            return rec, layer
    raise UsageError(f"no layer named {name!r} in manifest")


def _rel_dev(a, b):
    scale = float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b))) / scale if scale else float(np.max(np.abs(a - b)))


def _sibling(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def cmd_decompose(args):
    rec, layer = _select(load_manifest(args.manifest), args.layer)
    r3, r4 = _ints(args.rank, 2) if args.rank else layer.rank
    bits = layer.bits if args.bits is None else args.bits
    f = partial_tucker2(layer.kernel, r3, r4)
    if bits:
        f = quantize_tucker(f, bits, args.scheme)
    os.makedirs(args.out, exist_ok=True)
    for part in ("core", "u3", "u4"):
        save_tensor(os.path.join(args.out, f"{rec.name}.{part}.tqt"), getattr(f, part))
    err = frobenius_norm(layer.kernel - f.reconstruct()) / frobenius_norm(layer.kernel)
    print(json.dumps({
        "layer": rec.name, "rank": [r3, r4], "bits": bits, "rel_error": err,
        "param_ratio": param_compression_ratio(layer.spec, r3, r4),
    }))
    return 0


def _parse_scheme(text):
    if text.startswith("quantile"):
        _, _, q = text.partition(":")
        return "quantile", float(q) if q else 0.99
    if text not in ("per-tensor", "per-filter"):
        raise UsageError(f"unknown scheme {text!r}")
    return text, 1.0


def cmd_quantize(args):
    w = load_tensor(args.input)
    scheme, q = _parse_scheme(args.scheme)
    p = weight_params(w, args.bits, scheme, q)
    wq = quantize_weights(w, p)
    save_tensor(args.out, wq)
    summary = {
        "bits": args.bits, "scheme": scheme, "quantile": q,
        "threshold": np.atleast_1d(p.threshold).tolist(),
        "max_abs_error": float(np.max(np.abs(w - wq))),
        "fp32_payload_bytes": w.size * 4,
        "fp64_payload_bytes": w.size * 8,
    }
    if args.packed:
        blob = serialize_packed(pack_levels(w, p), p.step, p.bits, p.signed)
        atomic_write(args.packed, blob)
        summary["packed_payload_bytes"] = w.size
        summary["packed_vs_fp32"] = summary["fp32_payload_bytes"] / w.size
    print(json.dumps(summary))
    return 0


def cmd_ratio(args):
    entries = load_manifest(args.manifest)
    rows = [report_row(layer, rec.input_hw) for rec, layer in entries]
    text = to_csv(rows, REPORT_COLUMNS)
    if args.out:
        atomic_write(args.out, text)
        plotting.plot_ratio_report(rows, args.figure or _sibling(args.out, ".png"))
    else:
        sys.stdout.write(text)
    return 0


def cmd_search(args):
    entries = load_manifest(args.manifest)
    layers = [layer for _, layer in entries]
    if args.oracle == "output-error":
        oracle = OutputErrorOracle(layers, input_hw=(args.hw, args.hw), seed=args.seed,
                                   act_bits=args.act_bits)
    else:
        oracle = LinearHeadOracle(layers, seed=args.seed)
    threshold = args.threshold
    if args.max_drop is not None:
        threshold = threshold_from_drop(oracle.evaluate(ModelState.initial(layers)), args.max_drop)
    if threshold is None:
        raise UsageError("give --threshold or --max-drop")
    cfg = SearchConfig(threshold, args.epochs, args.passes)
    run = greedy_single_pass if args.algorithm == "single" else greedy_multi_pass
    plan = run(layers, cfg, oracle)
    atomic_write(args.out, json.dumps(plan.to_dict(), indent=2) + "\n")
    atomic_write(_sibling(args.out, ".audit.csv"), to_csv(plan.audit_rows(),
                 ["step", "pass", "layer", "r3", "r4", "metric_before", "metric_after", "accepted"]))
    plotting.plot_search_trace(plan, _sibling(args.out, ".png"))
    print(json.dumps({"total_rank": plan.total_rank(), "metric": plan.metric, "steps": len(plan.audit)}))
    return 0


def _factorize(method, kernel, rank, rec, layer, seed):
    if method == "reshape-svd":
        return baselines.reshape_svd_factorize(kernel, _ints(rank, 1)[0])
    if method == "spatial-svd":
        return baselines.spatial_svd_factorize(kernel, _ints(rank, 1)[0])
    if method == "tt":
        return baselines.tt_factorize(kernel, _ints(rank, 3))
    if method == "tucker":
        return partial_tucker2(kernel, *_ints(rank, 2))
    if method == "lasso":
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((*rec.input_hw, kernel.shape[2]))
        ho, wo = layer.spec.output_hw(rec.input_hw)
        pos = [(h, w) for h in range(ho) for w in range(wo)]
        samples = baselines.extract_patches(x, layer.spec, pos)
        return baselines.channel_prune_lasso(samples, kernel, _ints(rank, 1)[0])
    raise UsageError(f"unknown method {method!r}")


def _factor_arrays(f):
    if isinstance(f, baselines.ChannelSelection):
        return {"refit_w": f.refit_w, "beta": f.beta}
    names = {
        baselines.SvdFactorPair: ("w1", "w2"),
        baselines.SpatialSvdPair: ("w_vert", "w_horz"),
        baselines.TTFactors: ("g1", "g2", "g3", "g4"),
    }.get(type(f), ("core", "u3", "u4"))
    return {n: getattr(f, n) for n in names}


def cmd_baseline(args):
    rec, layer = _select(load_manifest(args.manifest), args.layer)
    kernel = layer.kernel
    methods = baselines.METHODS if args.method == "all" else (args.method,)
    rows = []
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((*rec.input_hw, kernel.shape[2]))
    for method in methods:
        rank = args.rank if args.method != "all" else _default_rank(method, kernel)
        f = _factorize(method, kernel, rank, rec, layer, args.seed)
        for name, arr in _factor_arrays(f).items():
            save_tensor(os.path.join(args.out, f"{rec.name}.{method}.{name}.tqt"), arr)
        approx = f.reconstruct()
        fast = conv2d_tucker(x, f, layer.spec) if method == "tucker" else f.conv(x, layer.spec)
        params = int(sum(a.size for k, a in _factor_arrays(f).items() if k != "beta"))
        if method == "lasso":
            params = f.param_count()
        rows.append({
            "layer": rec.name, "method": method, "rank": rank, "params": params,
            "param_ratio": kernel.size / params,
            "rel_error": frobenius_norm(kernel - approx) / frobenius_norm(kernel),
            "conv_deviation": _rel_dev(fast, conv2d_direct(x, approx, layer.spec)),
        })
    atomic_write(os.path.join(args.out, "baselines.csv"), to_csv(rows))
    plotting.plot_baselines(rows, os.path.join(args.out, "baselines.png"))
    sys.stdout.write(to_csv(rows))
    return 0


def _default_rank(method, kernel):
    d, _, s, s_out = kernel.shape
    half = max(1, min(s, s_out) // 2)
    if method == "tt":
        return f"{half},{half * d // 2 or 1},{half}"
    if method == "tucker":
        return f"{half},{half}"
    return str(half)


def cmd_check(args):
    rec, layer = _select(load_manifest(args.manifest), args.layer)
    r3, r4 = _ints(args.rank, 2) if args.rank else layer.full_rank
    f = partial_tucker2(layer.kernel, r3, r4)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((*rec.input_hw, layer.kernel.shape[2]))
    fast = conv2d_tucker(x, f, layer.spec)
    vs_recon = _rel_dev(fast, conv2d_direct(x, f.reconstruct(), layer.spec))
    vs_orig = _rel_dev(fast, conv2d_direct(x, layer.kernel, layer.spec))
    print(json.dumps({"layer": rec.name, "rank": [r3, r4],
                      "max_rel_deviation": vs_recon, "max_rel_deviation_original": vs_orig}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="tuckerq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0, help="seed for synthetic inputs")
        return p

    p = add("decompose", cmd_decompose, "partial Tucker decomposition of one layer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer")
    p.add_argument("--rank", help="R3,R4 (default: manifest rank)")
    p.add_argument("--bits", type=int, help="factor bit-width, 0 for none")
    p.add_argument("--scheme", default="per-tensor", choices=["per-tensor", "per-filter"])
    p.add_argument("--out", required=True, help="output directory")

    p = add("quantize", cmd_quantize, "quantize a tensor file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--scheme", default="per-tensor", help="per-tensor, per-filter or quantile[:q]")
    p.add_argument("--out", required=True)
    p.add_argument("--packed", help="also write packed integer levels here")

    p = add("ratio", cmd_ratio, "compression report CSV (and figure)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="CSV path; a .png is written next to it")
    p.add_argument("--figure")

    p = add("search", cmd_search, "greedy rank search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--algorithm", choices=["single", "multi"], default="multi")
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-drop", type=float, help="threshold = uncompressed metric - drop")
    p.add_argument("--passes", type=int, default=10)
    p.add_argument("--epochs", type=int, default=0, help="fine-tune epochs per step")
    p.add_argument("--oracle", choices=["output-error", "linear-head"], default="output-error")
    p.add_argument("--act-bits", type=int, help="quantize oracle inputs to this many bits")
    p.add_argument("--hw", type=int, default=8, help="synthetic input height/width")
    p.add_argument("--out", required=True, help="plan JSON path")

    p = add("baseline", cmd_baseline, "baseline factorizations of one layer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer")
    p.add_argument("--method", required=True, choices=list(baselines.METHODS) + ["all"])
    p.add_argument("--rank", help="R (svd, lasso budget), R1,R2,R3 (tt) or R3,R4 (tucker)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("check", cmd_check, "verify factorized convolution against direct convolution")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layer")
    p.add_argument("--rank", help="R3,R4 (default: full rank)")
    return parser


_ERRORS = (TensorFileError, ManifestError, UsageError, InfeasibleBudget, SearchError,
           ValueError, OSError)


def _category(exc):
    if isinstance(exc, InfeasibleBudget):
        return "infeasible"
    if isinstance(exc, SearchError):
        return "search"
    if isinstance(exc, OSError):
        return "io"
    return getattr(exc, "category", "invalid-argument")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "baseline" and args.method != "all" and not args.rank:
        parser.error("--rank is required unless --method all")
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(json.dumps({"error": _category(exc), "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
