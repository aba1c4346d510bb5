"""Binary tensor files.

Layout (all integers little-endian)::

    magic    4 bytes  b"TQT1"
    version  u8       1 = float64 payload, 2 = packed integer levels
    order    u8       number of extents, >= 1
    extents  order x u64
    -- version 2 only --
    bits     u8       1..8
    signed   u8       0 or 1
    nsteps   u64      1 (per-tensor) or the last extent (per-filter)
    steps    nsteps x f64
    -- payload --
    version 1: prod(extents) x f64, row-major
    version 2: prod(extents) x int8 (signed) / uint8 (unsigned), row-major

A packed tensor decodes to ``levels * step`` with steps broadcast along the
last axis.
"""

import os
import struct
import tempfile

import numpy as np

MAGIC = b"TQT1"
VERSION_FLOAT = 1
VERSION_PACKED = 2
_MAX_BYTES = 2 ** 63 - 1


class TensorFileError(ValueError):
    category = "tensor-file"


class BadMagicError(TensorFileError):
    category = "bad-magic"


class BadVersionError(TensorFileError):
    category = "bad-version"


class TruncatedPayloadError(TensorFileError):
    category = "truncated-payload"


class ExtentOverflowError(TensorFileError):
    category = "extent-overflow"


class BadHeaderError(TensorFileError):
    category = "bad-header"


def _header(version, shape):
    if not 1 <= len(shape) <= 255:
        raise ValueError(f"tensor order {len(shape)} cannot be stored")
    if min(shape) < 1:
        raise ValueError(f"extents must be positive, got {shape}")
    return MAGIC + struct.pack("<BB", version, len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def serialize_tensor(t):
    t = np.asarray(t, dtype="<f8")
    return _header(VERSION_FLOAT, t.shape) + np.ascontiguousarray(t).tobytes()


def serialize_packed(levels, steps, bits, signed=True):
    """Header plus one byte per level; ``steps`` is a scalar or a last-axis vector."""
    levels = np.asarray(levels)
    steps = np.atleast_1d(np.asarray(steps, dtype="<f8"))
    if steps.size not in (1, levels.shape[-1]):
        raise ValueError("steps must be scalar or match the last extent")
    dtype = np.int8 if signed else np.uint8
    head = _header(VERSION_PACKED, levels.shape)
    head += struct.pack("<BBQ", bits, int(bool(signed)), steps.size) + steps.tobytes()
    return head + np.ascontiguousarray(levels.astype(dtype)).tobytes()


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"truncated {what}: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _read_header(r):
    magic = bytes(r.data[:4])
    if len(magic) < 4 or magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    r.pos = 4
    version, order = struct.unpack("<BB", r.take(2, "header"))
    if version not in (VERSION_FLOAT, VERSION_PACKED):
        raise BadVersionError(f"unsupported version {version}")
    if order < 1:
        raise BadHeaderError("tensor order must be at least 1")
    shape = struct.unpack(f"<{order}Q", r.take(8 * order, "extents"))
    if min(shape) < 1:
        raise BadHeaderError(f"zero extent in shape {shape}")
    count = 1
    for n in shape:
        count *= n
        if count * 8 > _MAX_BYTES:
            raise ExtentOverflowError(f"extents {shape} overflow the addressable size")
    return version, shape, count


def _finish(r, shape):
    if r.pos != len(r.data):
        raise BadHeaderError(f"{len(r.data) - r.pos} trailing bytes after payload of shape {shape}")


def parse_header(data):
    """``(version, shape)`` of a tensor file without decoding the payload."""
    version, shape, _ = _read_header(_Reader(data))
    return version, shape


def parse_tensor(data):
    """Decode a tensor file; packed files are expanded to float64 values."""
    r = _Reader(data)
    version, shape, count = _read_header(r)
    if version == VERSION_PACKED:
        levels, steps, _, _ = _read_packed_body(r, shape, count)
        return levels.astype(float) * steps
    payload = r.take(8 * count, "payload")
    _finish(r, shape)
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(float)


def _read_packed_body(r, shape, count):
    bits, signed, nsteps = struct.unpack("<BBQ", r.take(10, "packed header"))
    if nsteps not in (1, shape[-1]):
        raise BadHeaderError(f"{nsteps} steps do not fit shape {shape}")
    steps = np.frombuffer(r.take(8 * nsteps, "steps"), dtype="<f8").astype(float)
    dtype = np.int8 if signed else np.uint8
    levels = np.frombuffer(r.take(count, "payload"), dtype=dtype).reshape(shape)
    _finish(r, shape)
    return levels, (steps if nsteps > 1 else steps[0]), bits, bool(signed)


def parse_packed(data):
    """``(levels, steps, bits, signed)`` of a packed (version 2) file."""
    r = _Reader(data)
    version, shape, count = _read_header(r)
    if version != VERSION_PACKED:
        raise BadVersionError(f"expected a packed file, got version {version}")
    return _read_packed_body(r, shape, count)


def payload_size(shape, version=VERSION_FLOAT, itemsize=None):
    count = int(np.prod(shape))
    if itemsize is None:
        itemsize = 8 if version == VERSION_FLOAT else 1
    return count * itemsize


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` via a temp file and rename."""
    path = os.fspath(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, t):
    atomic_write(path, serialize_tensor(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        return parse_tensor(fh.read())
