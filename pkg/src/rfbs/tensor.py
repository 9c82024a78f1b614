"""Dense tensor values and the RFT1 binary tensor format.

A tensor is a C-contiguous numpy array of dtype float32 or float64 with rank
1..4; rank-4 arrays are laid out NCHW. Every operation here is a pure
function: inputs are never mutated and identical inputs produce bit-identical
outputs. Broadcasting is deliberately unsupported, and mixed-dtype operands
are rejected; all shape/dtype agreement is explicit.

RFT1 layout (little-endian): magic "RFT1", 1 byte dtype code (0=f32, 1=f64),
1 byte rank (1..4), rank u32 extents, then row-major element data. No padding
and no trailing bytes.
"""

import struct

import numpy as np

from .errors import FormatError, ShapeError

F32 = np.float32
F64 = np.float64

# Extents are serialized as u32; stay well inside that (and addressable RAM).
MAX_EXTENT = 2**31 - 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

_MAGIC = b"RFT1"


def check_shape(shape):
    """Validate extents and return them as a tuple of ints."""
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= 4:
        raise ShapeError(f"rank must be 1..4, got rank {len(dims)}")
    for d in dims:
        if d < 1:
            raise ShapeError(f"extents must be >= 1, got {dims}")
        if d > MAX_EXTENT:
            raise ShapeError(f"extent {d} overflows the supported range")
    return dims


def as_tensor(a, name="tensor"):
    """Check that `a` is a valid tensor value; returns it unchanged."""
    if not isinstance(a, np.ndarray):
        raise ShapeError(f"{name} must be a numpy array, got {type(a).__name__}")
    if a.dtype not in _DTYPE_CODE:
        raise ShapeError(f"{name} dtype must be float32 or float64, got {a.dtype}")
    check_shape(a.shape)
    return a


def require_same_shape_dtype(a, b, op):
    as_tensor(a, f"{op} lhs")
    as_tensor(b, f"{op} rhs")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def zeros(shape, dtype=F32):
    dims = check_shape(shape)
    if np.dtype(dtype) not in _DTYPE_CODE:
        raise ShapeError(f"dtype must be float32 or float64, got {dtype}")
    return np.zeros(dims, dtype=dtype)


def from_values(shape, values, dtype=F32):
    """Build a tensor from a flat row-major value sequence."""
    dims = check_shape(shape)
    flat = np.asarray(values, dtype=dtype).ravel()
    n = int(np.prod(dims))
    if flat.size != n:
        raise ShapeError(f"expected {n} values for shape {dims}, got {flat.size}")
    if not np.isfinite(flat).all():
        raise ShapeError("values must be finite")
    return flat.reshape(dims).copy()


def elementwise_add(a, b):
    require_same_shape_dtype(a, b, "add")
    return a + b


def concat_channels(a, b):
    """Concatenate two NCHW tensors along channels; a's channels come first."""
    as_tensor(a, "concat lhs")
    as_tensor(b, "concat rhs")
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels requires rank-4 NCHW tensors")
    if a.dtype != b.dtype:
        raise ShapeError(f"concat_channels: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}"
        )
    return np.concatenate([a, b], axis=1)


def reduce_sum(a):
    """Sum of all elements, accumulated sequentially in flat row-major order.

    Accumulation happens in float64 regardless of input dtype; repeated calls
    on the same tensor are bit-identical.
    """
    as_tensor(a, "reduce_sum input")
    # cumsum is a strict left-to-right scan, which pins the reduction order.
    return float(np.cumsum(np.ascontiguousarray(a).ravel(), dtype=np.float64)[-1])


def encode_rft1(a):
    """Serialize a tensor to RFT1 bytes."""
    as_tensor(a, "rft1 tensor")
    code = _DTYPE_CODE[a.dtype]
    out = bytearray(_MAGIC)
    out.append(code)
    out.append(a.ndim)
    for d in a.shape:
        out += struct.pack("<I", d)
    out += np.ascontiguousarray(a).astype(_CODE_DTYPE[code], copy=False).tobytes()
    return bytes(out)


def decode_rft1(buf, offset=0):
    """Parse one RFT1 blob starting at `offset`; returns (tensor, next_offset)."""
    if len(buf) < offset + 6:
        raise FormatError("RFT1: truncated header")
    if buf[offset : offset + 4] != _MAGIC:
        raise FormatError("RFT1: bad magic")
    code = buf[offset + 4]
    rank = buf[offset + 5]
    if code not in _CODE_DTYPE:
        raise FormatError(f"RFT1: unknown dtype code {code}")
    if not 1 <= rank <= 4:
        raise FormatError(f"RFT1: rank {rank} out of range 1..4")
    pos = offset + 6
    if len(buf) < pos + 4 * rank:
        raise FormatError("RFT1: truncated extent table")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(d < 1 for d in dims):
        raise FormatError(f"RFT1: degenerate extent in {dims}")
    dtype = _CODE_DTYPE[code]
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("RFT1: truncated element data")
    data = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=pos)
    arr = data.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return arr, pos + nbytes


def write_rft1(path, a):
    with open(path, "wb") as fh:
        fh.write(encode_rft1(a))


def read_rft1(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_rft1(buf)
    if end != len(buf):
        raise FormatError(f"RFT1: {len(buf) - end} trailing bytes")
    return arr
