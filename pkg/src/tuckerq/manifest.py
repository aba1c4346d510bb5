"""Line-oriented model manifests.

One layer per line, whitespace separated::

    # name  tensor-file  [key=value ...]
    conv1   conv1.tqt    stride=1 padding=1 bits=8 rank=32,32 step=4,4 input=32,32

``tensor-file`` is resolved relative to the manifest. Keys and defaults:
``stride`` (1), ``padding`` (``D // 2``), ``bits`` (8, 0 disables
quantization), ``rank`` (full ``S,S_out``), ``step`` (1,1), ``input``
(32,32, the input feature-map height and width). Blank lines and ``#``
comments are ignored.
"""

import os
from dataclasses import dataclass

from .conv import ConvSpec
from .ranksearch import LayerEntry
from .tensorfile import load_tensor

_PAIR_KEYS = ("rank", "step", "input")
_INT_KEYS = ("stride", "padding", "bits")


class ManifestError(ValueError):
    category = "manifest"


@dataclass
class LayerRecord:
    name: str
    path: str
    stride: int = 1
    padding: int = None
    bits: int = 8
    rank: tuple = None
    step: tuple = (1, 1)
    input_hw: tuple = (32, 32)
    line: int = 0


def _pair(text, key, lineno):
    parts = text.split(",")
    if len(parts) != 2:
        raise ManifestError(f"line {lineno}: {key} needs two comma-separated integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ManifestError(f"line {lineno}: bad integer in {key}={text!r}") from None


def parse_manifest_text(text, base_dir="."):
    records = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 2:
            raise ManifestError(f"line {lineno}: expected 'name path [key=value ...]'")
        name, path = fields[0], fields[1]
        if name in seen:
            raise ManifestError(f"line {lineno}: duplicate layer name {name!r}")
        seen.add(name)
        rec = LayerRecord(name, os.path.join(base_dir, path), line=lineno)
        for item in fields[2:]:
            key, sep, value = item.partition("=")
            if not sep:
                raise ManifestError(f"line {lineno}: expected key=value, got {item!r}")
            if key in _INT_KEYS:
                try:
                    setattr(rec, key, int(value))
                except ValueError:
                    raise ManifestError(f"line {lineno}: bad integer {key}={value!r}") from None
            elif key in _PAIR_KEYS:
                setattr(rec, "input_hw" if key == "input" else key, _pair(value, key, lineno))
            else:
                raise ManifestError(f"line {lineno}: unknown key {key!r}")
        records.append(rec)
    if not records:
        raise ManifestError("manifest lists no layers")
    return records


def parse_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return parse_manifest_text(fh.read(), os.path.dirname(os.path.abspath(path)))


def load_layer(rec):
    """Read the kernel of a record and validate the record against it."""
    if not os.path.exists(rec.path):
        raise ManifestError(f"line {rec.line}: tensor file {rec.path} not found")
    kernel = load_tensor(rec.path)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ManifestError(f"line {rec.line}: {rec.name} is not a (D, D, S, S_out) kernel")
    padding = kernel.shape[0] // 2 if rec.padding is None else rec.padding
    try:
        spec = ConvSpec(kernel.shape, rec.stride, padding)
        if min(spec.output_hw(rec.input_hw)) < 1:
            raise ValueError(f"input {rec.input_hw} gives an empty output")
        return LayerEntry(rec.name, kernel, rec.rank, rec.step, rec.bits, spec)
    except ValueError as exc:
        raise ManifestError(f"line {rec.line}: {exc}") from None


def load_manifest(path):
    """``[(record, LayerEntry), ...]`` in manifest order."""
    return [(rec, load_layer(rec)) for rec in parse_manifest(path)]
