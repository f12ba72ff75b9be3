"""Binary spike tensors and addition-only kernels on them.

Spikes are packed little-endian into 64-bit words along the innermost axis;
the tail of the last word is zero-padded, which is AND-neutral. Products of
two spike operands reduce to ``popcount(a & b)`` per output element, and
products of an integer accumulator with spikes reduce to gated sums. No
float multiply runs on either path.

Accumulators (``AccumTensor``) are plain ``int32`` numpy arrays.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DimensionError

WORD_BITS = 64
ACCUM_DTYPE = np.int32


def _check_binary(arr: np.ndarray) -> None:
    if arr.dtype == bool:
        return
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractViolation("spike tensors may only hold 0 or 1")


def pack_bits(arr: np.ndarray) -> np.ndarray:
    """Pack a binary array along its last axis into uint64 words."""
    arr = np.asarray(arr)
    n = arr.shape[-1] if arr.ndim else 1
    words = max(1, -(-n // WORD_BITS))
    packed = np.packbits(arr.astype(bool), axis=-1, bitorder="little")
    pad = words * 8 - packed.shape[-1]
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(packed.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
    return np.ascontiguousarray(packed).view("<u8")


def unpack_bits(words: np.ndarray, n: int) -> np.ndarray:
    raw = np.ascontiguousarray(words).view(np.uint8)
    return np.unpackbits(raw, axis=-1, count=n, bitorder="little")


class SpikeTensor:
    """Binary {0, 1} tensor stored bit-packed along its last axis."""

    __slots__ = ("shape", "bits")

    def __init__(self, shape, bits: np.ndarray):
        self.shape = tuple(int(s) for s in shape)
        self.bits = bits

    @classmethod
    def from_array(cls, arr, check: bool = True) -> "SpikeTensor":
        from .tensor import Tensor

        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr)
        if check:
            _check_binary(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(arr.shape, pack_bits(arr))

    @classmethod
    def zeros(cls, shape) -> "SpikeTensor":
        return cls.from_array(np.zeros(shape, dtype=np.uint8), check=False)

    def to_array(self, dtype=np.uint8) -> np.ndarray:
        return unpack_bits(self.bits, self.shape[-1]).astype(dtype, copy=False)

    def to_dense(self, dtype=None):
        from .tensor import Tensor, get_default_dtype

        return Tensor(self.to_array(dtype or get_default_dtype()))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def count(self) -> int:
        """Number of ones."""
        return int(np.bitwise_count(self.bits).sum())

    def firing_rate(self) -> float:
        return self.count() / self.size if self.size else 0.0

    def transpose_last(self) -> "SpikeTensor":
        """Swap the last two axes (repacks along the new innermost axis)."""
        return SpikeTensor.from_array(np.swapaxes(self.to_array(), -1, -2), check=False)

    def __eq__(self, other):
        return (isinstance(other, SpikeTensor) and self.shape == other.shape
                and np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"SpikeTensor(shape={self.shape}, rate={self.firing_rate():.3f})"


def _as_spike(x) -> SpikeTensor:
    return x if isinstance(x, SpikeTensor) else SpikeTensor.from_array(x)


def matmul_spike(a, b) -> np.ndarray:
    """``a @ b`` for binary operands via AND + popcount.

    ``a`` is [..., M, K], ``b`` is [..., K, N]; leading axes broadcast. The
    result is an int32 accumulator with entries in ``[0, K]``.
    """
    a = _as_spike(a)
    b = _as_spike(b)
    if len(a.shape) < 2 or len(b.shape) < 2:
        raise DimensionError("matmul_spike operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul_spike inner extents differ: {a.shape} x {b.shape}")
    bt = b.transpose_last()  # [..., N, K] packed along K
    aw = a.bits[..., :, None, :]
    bw = bt.bits[..., None, :, :]
    return np.bitwise_count(aw & bw).sum(axis=-1, dtype=ACCUM_DTYPE)


def matmul_accum_spike(a: np.ndarray, b) -> np.ndarray:
    """Integer ``a`` [..., M, K] times spikes ``b`` [..., K, N] as gated sums.

    Each output sums the entries ``a[i, k]`` whose gate ``b[k, j]`` is 1.
    """
    a = np.asarray(a)
    gate = _as_spike(b).to_array(bool)
    if a.ndim < 2 or gate.ndim < 2:
        raise DimensionError("matmul_accum_spike operands need at least 2 dimensions")
    if a.shape[-1] != gate.shape[-2]:
        raise DimensionError(f"matmul_accum_spike inner extents differ: {a.shape} x {gate.shape}")
    sel = np.where(gate[..., None, :, :], a[..., :, :, None], ACCUM_DTYPE(0))
    return sel.sum(axis=-2, dtype=ACCUM_DTYPE)


def matmul_spike_accum(a, b: np.ndarray) -> np.ndarray:
    """Spikes ``a`` [..., M, K] times integer ``b`` [..., K, N] as gated row sums."""
    gate = _as_spike(a).to_array(bool)
    b = np.asarray(b)
    if gate.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul_spike_accum operands need at least 2 dimensions")
    if gate.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul_spike_accum inner extents differ: {gate.shape} x {b.shape}")
    sel = np.where(gate[..., :, :, None], b[..., None, :, :], ACCUM_DTYPE(0))
    return sel.sum(axis=-2, dtype=ACCUM_DTYPE)


# Accumulation counts: one accumulate per (nonzero spike, partner element) pair.

def sops_spike_left(a, n_cols: int) -> int:
    """Accumulations triggered by spikes of the left operand of ``a @ b``."""
    return _as_spike(a).count() * int(n_cols)


def sops_spike_right(b, n_rows: int) -> int:
    """Accumulations triggered by spikes of the right operand of ``a @ b``."""
    return _as_spike(b).count() * int(n_rows)
