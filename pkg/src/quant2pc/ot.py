"""Batched oblivious transfer with exact bit accounting.

A batch is a list of groups. Each group holds ``n`` instances of a 1-out-of-N
transfer whose messages are vectors of ``k`` ring elements of ``width`` bits.
The whole batch travels as one receiver flight and one sender flight.

Cost per instance, which the meter reproduces exactly (one byte-rounding per
flight, and lambda is a multiple of 8):

* 1-out-of-2 with ``l = k * width`` message bits: ``lambda + 2 l``
* 1-out-of-N, N > 2: ``2 lambda + N l``

Two backends share this contract. ``SimulatedOT`` derandomizes precomputed
random OTs from a seed both parties hold: the receiver sends its choice offset
padded to the choice-block size, the sender sends every message masked with
the pad at the shifted index. It reproduces the traffic shape of a real OT but
the shared seed means it offers no security against a transcript analyst.
``DiffieHellmanOT`` is a slow semi-honest OT over a MODP group for
demonstration; it meters the group elements it actually sends.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass

import numpy as np

from .ring import mask
from .transport import Endpoint

LAMBDAS = (80, 128, 256)
OT_LABEL = "ot"
SETUP_LABEL = "ot.setup"
_CHUNK = 1 << 19


class OTError(RuntimeError):
    """The two sides of a batch disagree on its parameters."""


def ot_cost(n: int, l: int, lam: int = 128) -> int:
    """Bits for ``n`` 1-out-of-2 transfers of ``l``-bit messages."""
    return n * (lam + 2 * l)


def ot_n_cost(n: int, N: int, l: int, lam: int = 128) -> int:
    """Bits for ``n`` 1-out-of-N transfers of ``l``-bit messages."""
    if N == 2:
        return ot_cost(n, l, lam)
    return n * (2 * lam + N * l)


def choice_block_bits(N: int, lam: int) -> int:
    return lam if N == 2 else 2 * lam


# ---------------------------------------------------------------------------
# bit packing


def _to_bits(values: np.ndarray, width: int) -> np.ndarray:
    u8 = np.ascontiguousarray(values, dtype="<u8").view(np.uint8).reshape(-1, 8)
    return np.unpackbits(u8, axis=1, bitorder="little")[:, :width].ravel()


def _from_bits(bits: np.ndarray, width: int) -> np.ndarray:
    n = bits.size // width
    full = np.zeros((n, 64), dtype=np.uint8)
    full[:, :width] = bits.reshape(n, width)
    return np.packbits(full, axis=1, bitorder="little").view("<u8").ravel().astype(np.uint64)


class BitWriter:
    """Packs runs of fixed-width integers into one contiguous bit stream."""

    def __init__(self):
        self._parts: list[bytes] = []
        self._pending = np.zeros(0, dtype=np.uint8)
        self.nbits = 0

    def write(self, values: np.ndarray, width: int) -> None:
        values = np.ascontiguousarray(values, dtype=np.uint64).ravel()
        if width == 0 or values.size == 0:
            return
        self.nbits += values.size * width
        if self._pending.size == 0 and width % 8 == 0:
            nb = width // 8
            raw = values.astype("<u8").view(np.uint8).reshape(-1, 8)[:, :nb]
            self._parts.append(raw.tobytes())
            return
        for start in range(0, values.size, _CHUNK):
            bits = _to_bits(values[start : start + _CHUNK], width)
            if self._pending.size:
                bits = np.concatenate([self._pending, bits])
            full = bits.size - bits.size % 8
            self._parts.append(np.packbits(bits[:full], bitorder="little").tobytes())
            self._pending = bits[full:].copy()

    def getvalue(self) -> bytes:
        tail = np.packbits(self._pending, bitorder="little").tobytes() if self._pending.size else b""
        return b"".join(self._parts) + tail


class BitReader:
    """Reads back what ``BitWriter`` produced, run by run."""

    def __init__(self, buf: bytes):
        self._buf = np.frombuffer(buf, dtype=np.uint8)
        self.pos = 0

    def read(self, n: int, width: int) -> np.ndarray:
        if n == 0 or width == 0:
            return np.zeros(n, dtype=np.uint64)
        end = self.pos + n * width
        if end > 8 * self._buf.size:
            raise OTError("payload shorter than the agreed batch layout")
        if self.pos % 8 == 0 and width % 8 == 0:
            nb = width // 8
            start = self.pos // 8
            raw = np.zeros((n, 8), dtype=np.uint8)
            raw[:, :nb] = self._buf[start : start + n * nb].reshape(n, nb)
            self.pos = end
            return raw.view("<u8").ravel().astype(np.uint64)
        out = np.empty(n, dtype=np.uint64)
        for start in range(0, n, _CHUNK):
            m = min(_CHUNK, n - start)
            lo = self.pos + start * width
            hi = lo + m * width
            chunk = np.unpackbits(self._buf[lo // 8 : (hi + 7) // 8], bitorder="little")
            off = lo % 8
            out[start : start + m] = _from_bits(chunk[off : off + m * width], width)
        self.pos = end
        return out


def pack_values(values: np.ndarray, width: int) -> bytes:
    w = BitWriter()
    w.write(values, width)
    return w.getvalue()


def unpack_values(buf: bytes, n: int, width: int) -> np.ndarray:
    return BitReader(buf).read(n, width)


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class OtGroup:
    """Layout of ``n`` transfers of ``k`` elements of ``width`` bits, 1-out-of-N."""

    n: int
    k: int
    width: int
    N: int = 2

    def __post_init__(self):
        if self.N < 2 or self.N & (self.N - 1) or self.N > 256:
            raise OTError("N must be a power of two in [2, 256]")
        if not 0 <= self.width <= 64:
            raise OTError("message element width must lie in [0, 64]")

    def cost(self, lam: int) -> int:
        return ot_n_cost(self.n, self.N, self.k * self.width, lam)


@dataclass
class OtBatch:
    """Sender messages and receiver choices of one group, for direct use."""

    count: int
    msg_bits: int
    sender_messages: np.ndarray
    receiver_choices: np.ndarray


def batch_cost(groups, lam: int) -> int:
    return sum(g.cost(lam) for g in groups)


class OTBackend:
    """Base class; subclasses implement one sender and one receiver flight."""

    def __init__(self, endpoint: Endpoint, lam: int = 128):
        if lam not in LAMBDAS:
            raise ValueError(f"lambda must be one of {LAMBDAS}")
        self.ep = endpoint
        self.lam = lam
        self.batches = 0
        self.instances = 0
        self.instances_by_path: dict[str, int] = {}

    def setup(self, leader: bool) -> None:
        """One-time session setup; ``leader`` is the party that speaks first."""

    def send(self, groups: list[OtGroup], messages: list[np.ndarray]) -> None:
        """Sender side. ``messages[g]`` has shape ``(n, N, k)``."""
        if len(groups) != len(messages):
            raise OTError("one message array per group")
        for g, m in zip(groups, messages):
            if m.shape != (g.n, g.N, g.k):
                raise OTError(f"messages of shape {m.shape} do not match {g}")
        with self.ep.scope(OT_LABEL):
            self._send(groups, [np.asarray(m, dtype=np.uint64) & mask(g.width) for g, m in zip(groups, messages)])
        self._count(groups)

    def receive(self, groups: list[OtGroup], choices: list[np.ndarray]) -> list[np.ndarray]:
        """Receiver side. Returns one ``(n, k)`` array per group."""
        if len(groups) != len(choices):
            raise OTError("one choice array per group")
        cs = []
        for g, c in zip(groups, choices):
            c = np.asarray(c, dtype=np.int64).ravel()
            if c.size != g.n or (c.size and (c.min() < 0 or c.max() >= g.N)):
                raise OTError(f"choices do not fit {g}")
            cs.append(c)
        with self.ep.scope(OT_LABEL):
            out = self._receive(groups, cs)
        self._count(groups)
        return out

    def _count(self, groups) -> None:
        n = sum(g.n for g in groups)
        self.batches += 1
        self.instances += n
        path = self.ep.path
        self.instances_by_path[path] = self.instances_by_path.get(path, 0) + n

    def instances_for(self, label: str) -> int:
        """OT instances invoked under a label (same matching as the meter)."""
        from .transport import _matches

        return sum(n for p, n in self.instances_by_path.items() if _matches(p, label))

    def _send(self, groups, messages) -> None:
        raise NotImplementedError

    def _receive(self, groups, choices):
        raise NotImplementedError


class SimulatedOT(OTBackend):
    """Derandomized OT from a pre-shared seed, with exact message-size accounting."""

    def __init__(self, endpoint: Endpoint, lam: int = 128, rng: np.random.Generator | None = None):
        super().__init__(endpoint, lam)
        self._rng = rng if rng is not None else np.random.default_rng()
        self._seed: int | None = None
        self._ctr = 0

    def setup(self, leader: bool) -> None:
        if leader:
            seed = self._rng.bytes(self.lam // 8)
            self.ep.send(seed, label=SETUP_LABEL)
        else:
            seed = self.ep.recv(label=SETUP_LABEL)
            if len(seed) != self.lam // 8:
                raise OTError("setup seed has the wrong length")
        self._seed = int.from_bytes(seed, "little")

    def _pads(self, g: OtGroup, gi: int):
        if self._seed is None:
            raise OTError("OT session used before setup")
        rng = np.random.default_rng([self._seed, self._ctr, gi])
        c = rng.integers(0, g.N, size=g.n)
        r = rng.bit_generator.random_raw((g.n, g.N, g.k)) & mask(g.width)
        return c, r

    def _block_bytes(self, g: OtGroup) -> int:
        return choice_block_bits(g.N, self.lam) // 8

    def _receive(self, groups, choices):
        pads = [self._pads(g, i) for i, g in enumerate(groups)]
        self._ctr += 1
        blocks = []
        for g, ch, (c, _) in zip(groups, choices, pads):
            e = (ch - c) % g.N
            blk = self._rng.integers(0, 256, size=(g.n, self._block_bytes(g)), dtype=np.uint8)
            blk[:, 0] = (blk[:, 0] & ~np.uint8(g.N - 1)) | e.astype(np.uint8)
            blocks.append(blk.tobytes())
        self.ep.send(b"".join(blocks))
        reader = BitReader(self.ep.recv())
        out = []
        for g, ch, (c, r) in zip(groups, choices, pads):
            y = reader.read(g.n * g.N * g.k, g.width).reshape(g.n, g.N, g.k)
            idx = np.arange(g.n)
            out.append(y[idx, ch] ^ r[idx, c])
        if reader.pos != self._expected_payload_bits(groups):
            raise OTError("payload length does not match the agreed batch layout")
        return out

    def _expected_payload_bits(self, groups) -> int:
        return sum(g.n * g.N * g.k * g.width for g in groups)

    def _send(self, groups, messages) -> None:
        pads = [self._pads(g, i) for i, g in enumerate(groups)]
        self._ctr += 1
        buf = self.ep.recv()
        want = sum(g.n * self._block_bytes(g) for g in groups)
        if len(buf) != want:
            raise OTError(f"choice flight of {len(buf)} bytes, expected {want}")
        raw = np.frombuffer(buf, dtype=np.uint8)
        writer = BitWriter()
        off = 0
        for g, m, (_, r) in zip(groups, messages, pads):
            bb = self._block_bytes(g)
            e = (raw[off : off + g.n * bb].reshape(g.n, bb)[:, 0] & np.uint8(g.N - 1)).astype(np.int64)
            off += g.n * bb
            # y_j = x_j xor r_{(j - e) mod N}
            j = (np.arange(g.N)[None, :] - e[:, None]) % g.N
            y = m ^ np.take_along_axis(r, j[:, :, None], axis=1)
            writer.write(y, g.width)
        self.ep.send(writer.getvalue())


# RFC 3526 2048-bit MODP group, generator 2
_MODP_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
_MODP_G = 2
_ELEM_BYTES = 256


def _kdf(point: int, index: int, j: int, nbytes: int) -> bytes:
    seed = point.to_bytes(_ELEM_BYTES, "big") + index.to_bytes(8, "little") + bytes([j])
    out = b""
    ctr = 0
    while len(out) < nbytes:
        out += hashlib.sha256(seed + ctr.to_bytes(4, "little")).digest()
        ctr += 1
    return out[:nbytes]


class DiffieHellmanOT(OTBackend):
    """Semi-honest 1-out-of-N OT in the style of Bellare and Micali.

    Sender publishes ``A = g^a``; the receiver answers ``B = g^b A^c``; the
    sender masks message ``j`` with a hash of ``(B / A^j)^a``. Slow, meant for
    small demonstration batches only.
    """

    def _send(self, groups, messages) -> None:
        a = secrets.randbelow(_MODP_P - 3) + 2
        A = pow(_MODP_G, a, _MODP_P)
        self.ep.send(A.to_bytes(_ELEM_BYTES, "big"))
        buf = self.ep.recv()
        want = sum(g.n for g in groups) * _ELEM_BYTES
        if len(buf) != want:
            raise OTError(f"receiver flight of {len(buf)} bytes, expected {want}")
        A_inv = pow(A, -1, _MODP_P)
        out = []
        idx = 0
        for g, m in zip(groups, messages):
            nbytes = g.k * 8
            for i in range(g.n):
                B = int.from_bytes(buf[idx * _ELEM_BYTES : (idx + 1) * _ELEM_BYTES], "big")
                Bj = B
                for j in range(g.N):
                    key = np.frombuffer(_kdf(pow(Bj, a, _MODP_P), idx, j, nbytes), dtype="<u8")
                    out.append((m[i, j] ^ key.astype(np.uint64)) & mask(g.width))
                    Bj = Bj * A_inv % _MODP_P
                idx += 1
        writer = BitWriter()
        for g, blk in _regroup(groups, out):
            writer.write(blk, g.width)
        self.ep.send(writer.getvalue())

    def _receive(self, groups, choices):
        A = int.from_bytes(self.ep.recv(), "big")
        secrets_b = []
        flight = []
        for g, ch in zip(groups, choices):
            for c in ch:
                b = secrets.randbelow(_MODP_P - 3) + 2
                secrets_b.append(b)
                B = pow(_MODP_G, b, _MODP_P) * pow(A, int(c), _MODP_P) % _MODP_P
                flight.append(B.to_bytes(_ELEM_BYTES, "big"))
        self.ep.send(b"".join(flight))
        reader = BitReader(self.ep.recv())
        out = []
        idx = 0
        for g, ch in zip(groups, choices):
            y = reader.read(g.n * g.N * g.k, g.width).reshape(g.n, g.N, g.k)
            res = np.empty((g.n, g.k), dtype=np.uint64)
            for i, c in enumerate(ch):
                key = np.frombuffer(_kdf(pow(A, secrets_b[idx], _MODP_P), idx, int(c), g.k * 8), dtype="<u8")
                res[i] = (y[i, c] ^ key.astype(np.uint64)) & mask(g.width)
                idx += 1
            out.append(res)
        return out


def _regroup(groups, rows):
    pos = 0
    for g in groups:
        cnt = g.n * g.N
        yield g, np.concatenate(rows[pos : pos + cnt]) if cnt else np.zeros(0, dtype=np.uint64)
        pos += cnt


BACKENDS = {"simulated": SimulatedOT, "dh": DiffieHellmanOT}
