"""Share-level base protocols.

Everything here is written from one party's point of view and must be
called by both parties in the same order. Values are flattened internally
and every protocol step sends one batched OT flush, so round counts do not
depend on tensor shapes.

Wrap bits come from a millionaires' comparison on 4-bit chunks: each chunk
is a 1-out-of-16 OT returning shares of ``(lt, eq)``, and chunk results are
merged up a binary tree with two OT-based AND gates per merge. Boolean
results are turned into arithmetic shares with one more OT.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .ot import OtGroup, pack_values, unpack_values
from .party import Party
from .ring import QuantMeta, RingTensor, mask, msb, shl
from .transport import Role

CHUNK_BITS = 4
_U1 = np.uint64(1)


class SignFact(str, enum.Enum):
    UNKNOWN = "unknown"
    NONNEG = "nonneg"


@dataclass
class Share:
    """One party's additive share of a ring tensor."""

    tensor: RingTensor
    party: Role
    sign: SignFact = SignFact.UNKNOWN

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def meta(self) -> QuantMeta:
        return self.tensor.meta

    @property
    def bits(self) -> int:
        return self.tensor.meta.bits

    @property
    def shape(self) -> tuple:
        return self.tensor.data.shape

    @property
    def nonneg(self) -> bool:
        return self.sign == SignFact.NONNEG

    def derive(self, data: np.ndarray, meta: QuantMeta | None = None, sign: SignFact | None = None) -> "Share":
        meta = meta or self.meta
        return Share(RingTensor(np.asarray(data, dtype=np.uint64) & mask(meta.bits), meta), self.party, sign or self.sign)

    def reshape(self, *shape) -> "Share":
        return Share(self.tensor.reshape(*shape), self.party, self.sign)


class ProtocolError(ValueError):
    """Invalid protocol parameters, raised before any byte is sent."""


# ---------------------------------------------------------------------------
# sharing


def share(x: RingTensor, rng: np.random.Generator, sign: SignFact = SignFact.UNKNOWN) -> tuple[Share, Share]:
    """Split locally into a uniformly random server share and its complement."""
    r = rng.bit_generator.random_raw(x.shape) & mask(x.bits)
    s = RingTensor(r, x.meta)
    c = RingTensor((x.data - r) & mask(x.bits), x.meta)
    return Share(s, Role.SERVER, sign), Share(c, Role.CLIENT, sign)


def reconstruct(a: Share, b: Share) -> RingTensor:
    if a.meta != b.meta:
        raise ProtocolError(f"shares carry different metadata: {a.meta} vs {b.meta}")
    if a.sign != b.sign:
        raise ProtocolError("shares carry different sign facts")
    return a.tensor + b.tensor


def share_input(p: Party, x: RingTensor | None, owner: Role, meta: QuantMeta, shape, sign=SignFact.UNKNOWN) -> Share:
    """The owner secret-shares its plaintext; the peer receives its share."""
    shape = tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    with p.scope("share"):
        if p.role == owner:
            if x is None or x.shape != shape or x.meta != meta:
                raise ProtocolError("owner input does not match the declared shape and metadata")
            r = p.random_ring(shape, meta.bits)
            p.ep.send(pack_values((x.data - r) & mask(meta.bits), meta.bits))
            mine = r
        else:
            mine = unpack_values(p.ep.recv(), n, meta.bits).reshape(shape)
    return Share(RingTensor(mine, meta), p.role, sign)


def reveal(p: Party, x: Share, to: Role = Role.CLIENT) -> RingTensor | None:
    """Open a shared tensor towards one party; the other gets ``None``."""
    with p.scope("reveal"):
        if p.role == to:
            other = unpack_values(p.ep.recv(), x.data.size, x.bits).reshape(x.shape)
            return RingTensor((x.data + other) & mask(x.bits), x.meta)
        p.ep.send(pack_values(x.data, x.bits))
        return None


def add(a: Share, b: Share) -> Share:
    if a.bits != b.bits:
        raise ProtocolError("addends must share a bit-width")
    return a.derive(a.data + b.data, sign=SignFact.UNKNOWN)


def sub(a: Share, b: Share) -> Share:
    if a.bits != b.bits:
        raise ProtocolError("operands must share a bit-width")
    return a.derive(a.data - b.data, sign=SignFact.UNKNOWN)


def add_public(p: Party, x: Share, c) -> Share:
    """Add a public constant (only the server's share moves)."""
    if p.is_server:
        return x.derive(x.data + (np.asarray(c, dtype=np.int64).view(np.uint64) if np.ndim(c) else np.uint64(int(c) % (1 << 64))))
    return x.derive(x.data)


def shift_left(x: Share, k: int, sign: SignFact = SignFact.UNKNOWN) -> Share:
    """Local left shift inside the current width."""
    meta = replace(x.meta, scale_log2=x.meta.scale_log2 + k)
    return x.derive(shl(x.data, k, x.bits), meta, sign)


def cast(x: Share, bits: int, sign: SignFact = SignFact.UNKNOWN) -> Share:
    """Local reduction to a narrower ring (modular, may wrap)."""
    if bits > x.bits:
        raise ProtocolError("a local cast can only narrow")
    return x.derive(x.data, x.meta.with_bits(bits), sign)


# ---------------------------------------------------------------------------
# boolean building blocks


def chunk_sizes(nbits: int, m: int = CHUNK_BITS) -> list[int]:
    """Chunk widths from least to most significant."""
    if nbits <= 0:
        return []
    q = -(-nbits // m)
    return [m] * (q - 1) + [nbits - m * (q - 1)]


def _and(p: Party, x: np.ndarray, y: np.ndarray, width: int) -> np.ndarray:
    """XOR shares of ``x & y`` for single-bit ``x`` and ``width``-bit ``y``."""
    n = x.size
    g = [OtGroup(n, 1, width)]
    full = np.uint64((1 << width) - 1)
    if p.is_server:
        r = p.random_ring(n, width)
        p.ot.send(g, [np.stack([r, r ^ y], axis=1)[:, :, None]])
        got = p.ot.receive(g, [x])[0][:, 0]
        return (np.where(x == 1, y, 0).astype(np.uint64) ^ r ^ got) & full
    got = p.ot.receive(g, [x])[0][:, 0]
    r = p.random_ring(n, width)
    p.ot.send(g, [np.stack([r, r ^ y], axis=1)[:, :, None]])
    return (np.where(x == 1, y, 0).astype(np.uint64) ^ got ^ r) & full


def greater_than(p: Party, v: np.ndarray, nbits: int) -> np.ndarray:
    """XOR shares of ``[v_server > v_client]`` for ``nbits``-bit inputs."""
    v = np.asarray(v, dtype=np.uint64).ravel() & mask(max(nbits, 1))
    n = v.size
    if nbits <= 0 or n == 0:
        return np.zeros(n, dtype=np.uint64)
    sizes = chunk_sizes(nbits)
    offs = np.cumsum([0] + sizes[:-1])
    width = 1 if len(sizes) == 1 else 2
    groups = [OtGroup(n, 1, width, 1 << sz) for sz in sizes]
    digits = [(v >> np.uint64(o)) & mask(sz) for o, sz in zip(offs, sizes)]
    if p.is_server:
        gt = [p.random_bits(n) for _ in sizes]
        eq = [p.random_bits(n) for _ in sizes]
        msgs = []
        for j, (g, d) in enumerate(zip(groups, digits)):
            k = np.arange(g.N, dtype=np.uint64)[None, :]
            val = gt[j][:, None] ^ (d[:, None] > k).astype(np.uint64)
            if width == 2:
                val = val | ((eq[j][:, None] ^ (d[:, None] == k).astype(np.uint64)) << _U1)
            msgs.append(val[:, :, None])
        p.ot.send(groups, msgs)
    else:
        got = p.ot.receive(groups, [d.astype(np.int64) for d in digits])
        gt = [r[:, 0] & _U1 for r in got]
        eq = [(r[:, 0] >> _U1) & _U1 for r in got]
    while len(gt) > 1:
        pairs = len(gt) // 2
        root = len(gt) == 2
        eq_hi = np.concatenate([eq[2 * i + 1] for i in range(pairs)])
        y = np.concatenate([gt[2 * i] if root else gt[2 * i] | (eq[2 * i] << _U1) for i in range(pairs)])
        z = _and(p, eq_hi, y, 1 if root else 2).reshape(pairs, n)
        ngt = [gt[2 * i + 1] ^ (z[i] & _U1) for i in range(pairs)]
        neq = [(z[i] >> _U1) & _U1 for i in range(pairs)]
        if len(gt) % 2:
            ngt.append(gt[-1])
            neq.append(eq[-1])
        gt, eq = ngt, neq
    return gt[0]


def wrap_bool(p: Party, data: np.ndarray, nbits: int) -> np.ndarray:
    """XOR shares of the carry ``[a + b >= 2^nbits]`` of two nbits-bit shares."""
    data = np.asarray(data, dtype=np.uint64).ravel() & mask(max(nbits, 1))
    if nbits <= 0:
        return np.zeros(data.size, dtype=np.uint64)
    v = data if p.is_server else mask(nbits) - data
    return greater_than(p, v, nbits)


def b2a(p: Party, bits: np.ndarray, k: int) -> np.ndarray:
    """Arithmetic shares mod 2^k of a bit held in XOR shares."""
    bits = np.asarray(bits, dtype=np.uint64).ravel()
    n = bits.size
    if k <= 0:
        return np.zeros(n, dtype=np.uint64)
    g = [OtGroup(n, 1, k)]
    if p.is_server:
        r = p.random_ring(n, k)
        m = np.stack([(bits - r), ((bits ^ _U1) - r)], axis=1) & mask(k)
        p.ot.send(g, [m[:, :, None]])
        return r
    return p.ot.receive(g, [bits.astype(np.int64)])[0][:, 0]


def msb_or(p: Party, data: np.ndarray, nbits: int, k: int) -> np.ndarray:
    """Arithmetic shares mod 2^k of ``msb(a) | msb(b)``.

    For a value whose own top bit is known to be zero, this is exactly the
    carry of the share sum, at the cost of a single OT.
    """
    h = msb(np.asarray(data).ravel(), nbits)
    n = h.size
    if k <= 0:
        return np.zeros(n, dtype=np.uint64)
    g = [OtGroup(n, 1, k)]
    if p.is_server:
        r = p.random_ring(n, k)
        m = np.stack([(h - r), (_U1 - r)], axis=1) & mask(k)
        p.ot.send(g, [m[:, :, None]])
        return r
    return p.ot.receive(g, [h.astype(np.int64)])[0][:, 0]


def mux(p: Party, x: Share, d: np.ndarray) -> Share:
    """Shares of ``x * d`` for a bit ``d`` held in XOR shares (two OTs)."""
    l = x.bits
    a = x.data.ravel()
    d = np.asarray(d, dtype=np.uint64).ravel()
    n = a.size
    g = [OtGroup(n, 1, l)]
    r = p.random_ring(n, l)
    msgs = [(np.stack([a * d, a * (d ^ _U1)], axis=1) - r[:, None]) & mask(l)]
    if p.is_server:
        p.ot.send(g, [msgs[0][:, :, None]])
        got = p.ot.receive(g, [d.astype(np.int64)])[0][:, 0]
    else:
        got = p.ot.receive(g, [d.astype(np.int64)])[0][:, 0]
        p.ot.send(g, [msgs[0][:, :, None]])
    return x.derive((r + got).reshape(x.shape))


# ---------------------------------------------------------------------------
# width and scale protocols


def ext(p: Party, x: Share, l2: int) -> Share:
    """Sign-extend (zero-extend when known non-negative) to ``l2`` bits."""
    l1 = x.bits
    if l2 <= l1:
        raise ProtocolError(f"extension needs l2 > l1, got {l1} -> {l2}")
    meta = x.meta.with_bits(l2)
    with p.scope("ext"):
        if x.nonneg:
            with p.scope("wrap"):
                w = msb_or(p, x.data, l1, l2 - l1)
            y = x.data.ravel() - (w << np.uint64(l1))
            return x.derive(y.reshape(x.shape), meta)
        half = np.uint64(1 << (l1 - 1))
        a = (x.data.ravel() + half) & mask(l1) if p.is_server else x.data.ravel()
        with p.scope("wrap"):
            w = b2a(p, wrap_bool(p, a, l1), l2 - l1)
        y = a - (w << np.uint64(l1))
        if p.is_server:
            y = y - half
        return x.derive(y.reshape(x.shape), meta)


def _low_carry(p: Party, data: np.ndarray, s: int, k: int) -> np.ndarray:
    """Arithmetic shares mod 2^k of the carry out of the low ``s`` bits."""
    with p.scope("wrap"):
        return b2a(p, wrap_bool(p, data & mask(s), s), k)


def trunc(p: Party, x: Share, s: int) -> Share:
    """Arithmetic right shift by ``s``, keeping the width."""
    l = x.bits
    if s < 0:
        raise ProtocolError("shift must be non-negative")
    meta = replace(x.meta, scale_log2=x.meta.scale_log2 - s)
    s = min(s, l - 1)  # beyond l-1 the result is already the sign
    if s == 0:
        return x.derive(x.data, meta)
    with p.scope("trunc"):
        d = x.data.ravel()
        if x.nonneg:
            with p.scope("wrap"):
                w = msb_or(p, d, l, s)
            a = d
        else:
            a = (d + np.uint64(1 << (l - 1))) & mask(l) if p.is_server else d
            with p.scope("wrap"):
                w = b2a(p, wrap_bool(p, a, l), s)
        c = _low_carry(p, a, s, l)
        y = (a >> np.uint64(s)) + c - (w << np.uint64(l - s))
        if p.is_server and not x.nonneg:
            y = y - np.uint64(1 << (l - 1 - s))
        return x.derive(y.reshape(x.shape), meta)


def trunc_reduce(p: Party, x: Share, s: int) -> Share:
    """Arithmetic right shift by ``s`` with output width ``l - s``.

    The share-sum carry out of the full width vanishes modulo ``2^(l-s)``, so
    only the low carry is computed; knowing the sign does not help here.
    """
    l = x.bits
    if not 0 <= s < l:
        raise ProtocolError(f"truncate-reduce needs 0 <= s < l, got s={s}, l={l}")
    meta = QuantMeta(l - s, x.meta.scale_log2 - s, x.meta.signed)
    if s == 0:
        return x.derive(x.data, meta)
    with p.scope("tr"):
        d = x.data.ravel()
        bias = not x.nonneg
        a = (d + np.uint64(1 << (l - 1))) & mask(l) if (p.is_server and bias) else d
        c = _low_carry(p, a, s, l - s)
        y = (a >> np.uint64(s)) + c
        if p.is_server and bias:
            y = y - np.uint64(1 << (l - 1 - s))
        return x.derive(y.reshape(x.shape), meta)


def requant(p: Party, x: Share, target: QuantMeta) -> Share:
    """Re-quantize following the five branches of the protocol in order."""
    l1, s1 = x.bits, x.meta.scale_log2
    l2, s2 = target.bits, target.scale_log2
    nn = x.sign
    with p.scope("requant"):
        if l1 >= l2:
            if s1 <= s2:
                t = shl(x.data, s2 - s1, l1)
                return x.derive(t, target, _narrowed_sign(nn, s2 - s1 == 0 and l1 == l2))
            k = s1 - s2
            if l1 - l2 >= k:
                t = trunc_reduce(p, x, k)
                return x.derive(t.data, target, _narrowed_sign(nn, l1 - k == l2))
            t = trunc(p, x, k)
            return x.derive(t.data, target, _narrowed_sign(nn, min(k, l1 - 1) >= l1 - l2))
        if s1 > s2:
            k = min(s1 - s2, l1 - 1)
            t = trunc_reduce(p, x, k)
            y = ext(p, t, l2) if t.bits < l2 else t
            return x.derive(y.data, target, nn)
        t = x.derive(shl(x.data, s2 - s1, l1), sign=nn if s2 == s1 else SignFact.UNKNOWN)
        y = ext(p, t, l2)
        return x.derive(y.data, target, t.sign)


def _narrowed_sign(sign: SignFact, fits: bool) -> SignFact:
    return sign if fits else SignFact.UNKNOWN


# ---------------------------------------------------------------------------
# non-linear layers


def drelu(p: Party, x: Share) -> np.ndarray:
    """XOR shares of ``[x >= 0]``."""
    l = x.bits
    d = x.data.ravel()
    c = wrap_bool(p, d & mask(l - 1), l - 1) if l > 1 else np.zeros(d.size, dtype=np.uint64)
    m = msb(d, l) ^ c
    return m ^ _U1 if p.is_server else m


def relu(p: Party, x: Share) -> Share:
    """ReLU; free when the input is already known to be non-negative."""
    if x.nonneg:
        return x
    with p.scope("relu"):
        y = mux(p, x, drelu(p, x))
    return Share(y.tensor, p.role, SignFact.NONNEG)


def max_pool(p: Party, x: Share, kernel: int) -> Share:
    """k x k max pooling with stride k by a tournament of comparisons."""
    c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    with p.scope("maxpool"):
        work = x if x.nonneg else ext(p, x, x.bits + 1)
        v = work.data[:, : ho * kernel, : wo * kernel].reshape(c, ho, kernel, wo, kernel)
        cands = [v[:, :, i, :, j].ravel() for i in range(kernel) for j in range(kernel)]
        bits = work.bits
        while len(cands) > 1:
            pairs = len(cands) // 2
            u = np.concatenate([cands[2 * i] for i in range(pairs)])
            t = np.concatenate([cands[2 * i + 1] for i in range(pairs)])
            diff = work.derive((u - t) & mask(bits), work.meta.with_bits(bits), SignFact.UNKNOWN)
            sel = mux(p, diff, drelu(p, diff))
            best = ((t + sel.data) & mask(bits)).reshape(pairs, -1)
            nxt = list(best)
            if len(cands) % 2:
                nxt.append(cands[-1])
            cands = nxt
    out = cands[0].reshape(c, ho, wo)
    return x.derive(out, x.meta, x.sign)


def avg_pool(p: Party, x: Share, kernel: int) -> Share:
    """Window sum with the division folded into the scale.

    The sum needs ``log2(k*k)`` extra bits, so the inputs are extended first
    (a single OT each when they are known non-negative).
    """
    from .ring import pool_shift

    j = pool_shift(kernel)
    c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    with p.scope("avgpool"):
        wide = ext(p, x, x.bits + j) if j else x
    v = wide.data[:, : ho * kernel, : wo * kernel].reshape(c, ho, kernel, wo, kernel)
    meta = QuantMeta(x.bits + j, x.meta.scale_log2 + j, x.meta.signed)
    return x.derive(v.sum(axis=(2, 4), dtype=np.uint64), meta)
