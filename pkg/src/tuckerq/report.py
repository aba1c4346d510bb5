"""Compression reports and CSV emission."""

import csv
import io
import math

from .conv import ConvSpec, count_macs
from .quantize import quantize_tucker
from .tensor import frobenius_norm
from .tucker import macs_compression_ratio, param_compression_ratio, partial_tucker2, tucker_param_count

REPORT_COLUMNS = (
    "name", "D", "S", "S_out", "r3", "r4", "stride", "padding", "H", "W", "H_out", "W_out",
    "bits", "param_ratio", "macs_ratio", "rel_error", "params_full", "params_tucker",
    "macs_full", "macs_tucker", "bytes_full_fp32", "bytes_tucker_fp32", "bytes_tucker_quant",
)


def packed_bytes(count, bits):
    """Bytes needed for ``count`` values at ``bits`` each (32 for full precision)."""
    return math.ceil(count * bits / 8)


def report_row(layer, input_hw, rank=None):
    """One CompressionReport row for ``layer`` factorized at ``rank`` (default its manifest rank)."""
    spec = layer.spec
    d, _, s, s_out = spec.kernel_shape
    r3, r4 = rank or layer.rank
    ho, wo = spec.output_hw(input_hw)
    f = partial_tucker2(layer.kernel, r3, r4)
    if layer.bits:
        f = quantize_tucker(f, layer.bits)
    knorm = frobenius_norm(layer.kernel)
    err = frobenius_norm(layer.kernel - f.reconstruct()) / knorm if knorm else 0.0
    full = d * d * s * s_out
    tucker = tucker_param_count(d, s, s_out, r3, r4)
    bits = layer.bits or 32
    return {
        "name": layer.name, "D": d, "S": s, "S_out": s_out, "r3": r3, "r4": r4,
        "stride": spec.stride, "padding": spec.padding,
        "H": input_hw[0], "W": input_hw[1], "H_out": ho, "W_out": wo,
        "bits": layer.bits,
        "param_ratio": param_compression_ratio(spec, r3, r4),
        "macs_ratio": macs_compression_ratio(spec, input_hw, (ho, wo), r3, r4),
        "rel_error": err,
        "params_full": full, "params_tucker": tucker,
        "macs_full": count_macs(spec, input_hw), "macs_tucker": count_macs(spec, input_hw, (r3, r4)),
        "bytes_full_fp32": packed_bytes(full, 32),
        "bytes_tucker_fp32": packed_bytes(tucker, 32),
        "bytes_tucker_quant": packed_bytes(tucker, bits),
    }


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def to_csv(rows, columns=None):
    """Comma-separated text with a header row; floats keep full repr precision."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def recompute_ratios(row):
    """``(P, M)`` recomputed from the shape and rank columns of a parsed report row."""
    g = {k: int(row[k]) for k in ("D", "S", "S_out", "r3", "r4", "stride", "padding", "H", "W", "H_out", "W_out")}
    spec = ConvSpec((g["D"], g["D"], g["S"], g["S_out"]), g["stride"], g["padding"])
    p = param_compression_ratio(spec, g["r3"], g["r4"])
    m = macs_compression_ratio(spec, (g["H"], g["W"]), (g["H_out"], g["W_out"]), g["r3"], g["r4"])
    return p, m
