"""Dense float64 tensor helpers and the TNSR binary format.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64,
laid out H x W x C (or rows x cols). Random streams come from numpy's PCG64
bit generator, which is stable across platforms for a given seed.
"""

import struct

import numpy as np

from segaware import backend

TNSR_MAGIC = b"TNSR"
DTYPE_F64 = 0x01


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside an operation's domain."""


def as_tensor(a, rank=None):
    t = np.ascontiguousarray(a, dtype=np.float64)
    if rank is not None and t.ndim != rank:
        raise ShapeError(f"expected rank {rank}, got shape {t.shape}")
    if t.ndim > 4 or any(n < 1 for n in t.shape):
        raise ShapeError(f"invalid tensor shape {t.shape}")
    return t


def make_rng(seed):
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b):
    """Matrix product accumulated over the inner index in ascending order.

    Bitwise reproducible and independent of BLAS blocking; slower than
    :func:`gemm` by a few times.
    """
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    return backend.kernels.matmul(a, b)


def gemm(a, b):
    """BLAS matrix product; deterministic for a fixed machine and thread count."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm: inner extents differ, {a.shape} x {b.shape}")
    return a @ b


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def elementwise(op, a, b=None):
    """Pointwise ``op`` in {add, sub, mul, div, exp, scale}; ``b`` may be a scalar."""
    a = as_tensor(a)
    if op == "exp":
        return np.exp(a)
    if op == "scale":
        return a * float(b)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.ndim(b) == 0:
        b = float(b)
    else:
        b = as_tensor(b)
        if b.shape != a.shape:
            raise ShapeError(f"{op}: shape {a.shape} vs {b.shape}")
    if op == "div" and np.any(b == 0):
        raise DomainError("division by zero")
    return _BINARY[op](a, b)


def upsample_nearest(t, factor):
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor!r}")
    t = as_tensor(t, 3)
    if factor == 1:
        return t.copy()
    return np.repeat(np.repeat(t, factor, axis=0), factor, axis=1)


def init_uniform(shape, rng, bound):
    if bound <= 0:
        raise ValueError("bound must be positive")
    return rng.uniform(-bound, bound, size=tuple(shape))


def fan_in_bound(fan_in):
    return float(np.sqrt(3.0 / fan_in))


def write_tnsr(path, t):
    t = np.ascontiguousarray(t, dtype="<f8")
    if t.ndim > 255:
        raise ShapeError("rank too large for TNSR")
    header = TNSR_MAGIC + bytes([DTYPE_F64, t.ndim]) + struct.pack(f"<{t.ndim}I", *t.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(t.tobytes())


def read_tnsr(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TNSR_MAGIC:
        raise ValueError(f"{path}: not a TNSR file")
    if len(blob) < 6 or blob[4] != DTYPE_F64:
        raise ValueError(f"{path}: unsupported TNSR dtype")
    rank = blob[5]
    end = 6 + 4 * rank
    shape = struct.unpack(f"<{rank}I", blob[6:end])
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != end + 8 * count:
        raise ValueError(f"{path}: truncated TNSR payload")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=end).reshape(shape).astype(np.float64)
