"""Fixed-width modular integer tensors and the plaintext quantized oracle.

Every tensor lives in the ring of integers mod 2^l with ``l <= 64`` and is
stored as ``numpy.uint64`` holding the canonical representative. The signed
reading maps ``v >= 2^(l-1)`` to ``v - 2^l``.

The ``*_plain`` functions define the reference semantics the secure
protocols must reproduce bit for bit. In-protocol shifts are floor shifts,
rounding only happens when real values are quantized on ingestion.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

MAX_BITS = 64

_U64 = np.uint64


def mask(bits: int) -> np.uint64:
    """Return ``2^bits - 1`` as a uint64."""
    if bits >= 64:
        return _U64(0xFFFF_FFFF_FFFF_FFFF)
    return _U64((1 << bits) - 1)


def to_signed(data: np.ndarray, bits: int) -> np.ndarray:
    """Signed int64 reading of canonical l-bit values."""
    data = np.asarray(data, dtype=np.uint64)
    if bits == 64:
        return data.view(np.int64)
    sh = np.int64(64 - bits)
    return (data << np.uint64(sh)).view(np.int64) >> sh


def from_signed(values, bits: int) -> np.ndarray:
    """Encode signed integers (int64 or Python ints) into l-bit canonical form."""
    arr = np.asarray(values)
    if arr.dtype == object:
        flat = [int(v) % (1 << bits) for v in arr.ravel()]
        return np.array(flat, dtype=np.uint64).reshape(arr.shape)
    return arr.astype(np.int64).view(np.uint64) & mask(bits)


def shl(data: np.ndarray, k: int, bits: int) -> np.ndarray:
    """Shift left by k inside an l-bit ring."""
    if k >= 64:
        return np.zeros_like(data, dtype=np.uint64)
    return (np.asarray(data, dtype=np.uint64) << _U64(k)) & mask(bits)


def msb(data: np.ndarray, bits: int) -> np.ndarray:
    """Most significant bit of l-bit values, as uint64 0/1."""
    return (np.asarray(data, dtype=np.uint64) >> _U64(bits - 1)) & _U64(1)


@dataclass(frozen=True)
class QuantMeta:
    """Bit-width, power-of-two scale exponent and signedness of a tensor."""

    bits: int
    scale_log2: int = 0
    signed: bool = True

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must lie in [1, {MAX_BITS}], got {self.bits}")
        if not isinstance(self.scale_log2, (int, np.integer)):
            raise ValueError("scale_log2 must be an integer")

    def with_bits(self, bits: int) -> "QuantMeta":
        return replace(self, bits=bits)


@dataclass
class RingTensor:
    """A tensor of l-bit ring elements with quantization metadata."""

    data: np.ndarray
    meta: QuantMeta

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint64)
        if self.meta.bits < 64 and self.data.size and int(self.data.max()) >> self.meta.bits:
            raise ValueError("element exceeds the ring modulus")

    @classmethod
    def from_signed(cls, values, meta: QuantMeta) -> "RingTensor":
        return cls(from_signed(values, meta.bits), meta)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def bits(self) -> int:
        return self.meta.bits

    def signed(self) -> np.ndarray:
        return to_signed(self.data, self.meta.bits)

    def dequantize(self) -> np.ndarray:
        return self.signed().astype(np.float64) / float(2.0 ** self.meta.scale_log2)

    def reshape(self, *shape) -> "RingTensor":
        return RingTensor(self.data.reshape(*shape), self.meta)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RingTensor):
            return NotImplemented
        return self.meta == other.meta and self.data.shape == other.data.shape and bool(
            np.array_equal(self.data, other.data)
        )

    def __add__(self, other: "RingTensor") -> "RingTensor":
        _check_same_meta(self, other)
        return RingTensor((self.data + other.data) & mask(self.bits), self.meta)

    def __sub__(self, other: "RingTensor") -> "RingTensor":
        _check_same_meta(self, other)
        return RingTensor((self.data - other.data) & mask(self.bits), self.meta)


def _check_same_meta(a: RingTensor, b: RingTensor):
    if a.meta.bits != b.meta.bits:
        raise ValueError(f"bit-width mismatch: {a.meta.bits} vs {b.meta.bits}")


# ---------------------------------------------------------------------------
# quantization


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, meta: QuantMeta) -> RingTensor:
    """Quantize reals to ``clamp(round(2^s x))`` with round-half-away-from-zero."""
    lo = -(1 << (meta.bits - 1))
    hi = (1 << (meta.bits - 1)) - 1
    q = round_half_away(np.asarray(x, dtype=np.float64) * (2.0 ** meta.scale_log2))
    q = np.clip(q, lo, hi)
    return RingTensor(from_signed(q.astype(np.int64), meta.bits), meta)


# ---------------------------------------------------------------------------
# elementary plaintext ops


def ext_plain(x: RingTensor, bits: int) -> RingTensor:
    """Sign-extend to a wider ring."""
    if bits < x.bits:
        raise ValueError("extension must not shrink the width")
    return RingTensor(from_signed(x.signed(), bits), x.meta.with_bits(bits))


def trunc_plain(x: RingTensor, shift: int) -> RingTensor:
    """Arithmetic right shift keeping the width."""
    s = min(shift, 63)
    return RingTensor(from_signed(x.signed() >> s, x.bits), replace(x.meta, scale_log2=x.meta.scale_log2 - shift))


def tr_plain(x: RingTensor, shift: int) -> RingTensor:
    """Arithmetic right shift, dropping the top ``shift`` bits of the width."""
    if not 0 <= shift < x.bits:
        raise ValueError("shift must lie in [0, bits)")
    out = x.bits - shift
    return RingTensor(
        from_signed(x.signed() >> shift, out),
        QuantMeta(out, x.meta.scale_log2 - shift, x.meta.signed),
    )


def requant_plain(x: RingTensor, target: QuantMeta) -> RingTensor:
    """Re-quantize following the branch order of the protocol exactly.

    Each branch shifts first and changes the width second. Left shifts happen
    inside the source width, right shifts are floor shifts.
    """
    l1, s1 = x.meta.bits, x.meta.scale_log2
    l2, s2 = target.bits, target.scale_log2
    v = x.signed()
    if l1 >= l2:
        if s1 <= s2:
            t = shl(x.data, s2 - s1, l1)
            return RingTensor(t & mask(l2), target)
        # both truncating branches yield floor(x / 2^k) reduced to l2 bits
        k = min(s1 - s2, 63)
        return RingTensor(from_signed(v >> k, l2), target)
    if s1 > s2:
        k = min(s1 - s2, 63)
        return RingTensor(from_signed(v >> k, l2), target)
    t = to_signed(shl(x.data, s2 - s1, l1), l1)
    return RingTensor(from_signed(t, l2), target)


def accumulator_extra_bits(d2: int) -> int:
    """``e = ceil(log2 d2)``, the headroom for a d2-term dot product."""
    return max(d2 - 1, 0).bit_length()


def matmul_plain(W: RingTensor, X: RingTensor, out_bits: int | None = None) -> RingTensor:
    """Exact signed product-sum reduced to the accumulator width."""
    if W.data.ndim != 2 or X.data.ndim != 2 or W.shape[1] != X.shape[0]:
        raise ValueError(f"cannot multiply {W.shape} by {X.shape}")
    bits = out_bits or W.bits + X.bits + accumulator_extra_bits(W.shape[1])
    if bits > MAX_BITS:
        raise ValueError("accumulator exceeds 64 bits")
    # uint64 arithmetic wraps mod 2^64, which is exact mod 2^bits
    Wu = from_signed(W.signed(), 64)
    Xu = from_signed(X.signed(), 64)
    Y = (Wu @ Xu) & mask(bits)
    return RingTensor(Y, QuantMeta(bits, W.meta.scale_log2 + X.meta.scale_log2))


@dataclass(frozen=True)
class ConvGeometry:
    """Convolution shape: ``(C_in, H, W)`` input, ``C_out`` filters of size k."""

    c_in: int
    c_out: int
    height: int
    width: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.kernel, self.stride) < 1 or self.pad < 0:
            raise ValueError("invalid convolution geometry")
        if self.out_height < 1 or self.out_width < 1:
            raise ValueError("kernel larger than padded input")

    @property
    def out_height(self) -> int:
        return (self.height + 2 * self.pad - self.kernel) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.width + 2 * self.pad - self.kernel) // self.stride + 1

    @property
    def dims(self) -> tuple[int, int, int]:
        """Lowered matmul dimensions ``(d1, d2, d3)``."""
        return self.c_out, self.c_in * self.kernel * self.kernel, self.out_height * self.out_width


def im2col(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Lower a ``(C, H, W)`` array into ``(C k k, H_out W_out)`` columns.

    Works on any dtype; padding inserts zeros, which are valid shares of zero.
    """
    if x.shape != (geom.c_in, geom.height, geom.width):
        raise ValueError(f"input shape {x.shape} does not match geometry")
    k, st = geom.kernel, geom.stride
    xp = np.pad(x, ((0, 0), (geom.pad, geom.pad), (geom.pad, geom.pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::st, ::st][:, : geom.out_height, : geom.out_width]
    # (C, Ho, Wo, k, k) -> (C, k, k, Ho, Wo)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(geom.c_in * k * k, -1)
    return np.ascontiguousarray(cols)


def conv_plain(X: RingTensor, W: RingTensor, geom: ConvGeometry, out_bits: int | None = None) -> RingTensor:
    """Convolution as im2col followed by ``matmul_plain``.

    ``W`` has shape ``(C_out, C_in, k, k)``; the result has shape ``(C_out, H_out, W_out)``.
    """
    cols = RingTensor(im2col(X.data, geom), X.meta)
    Wm = W.reshape(geom.c_out, -1)
    Y = matmul_plain(Wm, cols, out_bits)
    return Y.reshape(geom.c_out, geom.out_height, geom.out_width)


def relu_plain(x: RingTensor) -> RingTensor:
    v = x.signed()
    return RingTensor(from_signed(np.maximum(v, 0), x.bits), x.meta)


def align_plain(x: RingTensor, target: QuantMeta) -> RingTensor:
    """Lossless move to a wider ring and finer scale: extend, then shift left."""
    if target.bits < x.bits or target.scale_log2 < x.meta.scale_log2:
        raise ValueError("alignment only widens and refines")
    v = x.signed() << (target.scale_log2 - x.meta.scale_log2)
    return RingTensor(from_signed(v, target.bits), target)


def add_plain(a: RingTensor, b: RingTensor) -> RingTensor:
    if a.meta != b.meta:
        raise ValueError("operands of an addition must share metadata")
    return a + b


def residual_plain(acc: RingTensor, skip: RingTensor, out: QuantMeta | None = None) -> RingTensor:
    """Simplified residual addition.

    The skip operand is aligned to the accumulator's width and scale, both
    operands are sign-extended by one bit and added there. With ``out``
    given, a single re-quantization follows.
    """
    aligned = align_plain(skip, acc.meta)
    if not np.array_equal(aligned.signed() >> (acc.meta.scale_log2 - skip.meta.scale_log2), skip.signed()):
        raise ValueError("the skip operand does not fit the accumulator after alignment")
    wide = acc.meta.with_bits(acc.bits + 1)
    y = add_plain(ext_plain(acc, wide.bits), ext_plain(aligned, wide.bits))
    return requant_plain(y, out) if out is not None else y


def sum_pool_plain(x: RingTensor, kernel: int) -> RingTensor:
    """Average pooling over k x k windows kept as an exact sum.

    The division by ``k^2 = 2^j`` is folded into the scale, so the output has
    ``j`` more bits and a scale exponent larger by ``j``.
    """
    j = pool_shift(kernel)
    c, h, w = x.shape
    v = x.signed()[:, : h - h % kernel, : w - w % kernel]
    v = v.reshape(c, h // kernel, kernel, w // kernel, kernel).sum(axis=(2, 4))
    meta = QuantMeta(x.bits + j, x.meta.scale_log2 + j, x.meta.signed)
    return RingTensor(from_signed(v, meta.bits), meta)


def max_pool_plain(x: RingTensor, kernel: int) -> RingTensor:
    c, h, w = x.shape
    v = x.signed()[:, : h - h % kernel, : w - w % kernel]
    v = v.reshape(c, h // kernel, kernel, w // kernel, kernel).max(axis=(2, 4))
    return RingTensor(from_signed(v, x.bits), x.meta)


def pool_shift(kernel: int) -> int:
    area = kernel * kernel
    if area & (area - 1):
        raise ValueError("pooling window area must be a power of two")
    return area.bit_length() - 1


# ---------------------------------------------------------------------------
# snapshot format

_HEADER = struct.Struct("<BbBB")


def tensor_to_bytes(t: RingTensor) -> bytes:
    """Serialize as ``bits:u8 scale:i8 signed:u8 rank:u8 dims:u32[rank] data:u64[n]``."""
    shape = t.data.shape
    head = _HEADER.pack(t.meta.bits, t.meta.scale_log2, int(t.meta.signed), len(shape))
    dims = np.asarray(shape, dtype="<u4").tobytes()
    return head + dims + t.data.astype("<u8").tobytes()


def tensor_from_bytes(buf: bytes) -> RingTensor:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated tensor header")
    bits, scale, signed, rank = _HEADER.unpack_from(buf, 0)
    off = _HEADER.size
    dims = tuple(int(d) for d in np.frombuffer(buf, dtype="<u4", count=rank, offset=off))
    off += 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * n:
        raise ValueError("tensor payload length does not match its dims")
    data = np.frombuffer(buf, dtype="<u8", count=n, offset=off).astype(np.uint64).reshape(dims)
    return RingTensor(data, QuantMeta(bits, scale, bool(signed)))


def save_tensor(path, t: RingTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> RingTensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
