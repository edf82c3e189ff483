"""OT-based secure matrix multiplication and convolution.

The server holds plaintext weights ``W`` (d1 x d2, l1 bits); the activations
``X`` (d2 x d3, l2 bits) are shared. With biased server share
``Xs' = Xs + B`` and the wrap bits ``wr`` of the share sum,

    W X = W Xs' + W Xc - 2^wX W wr - B W 1      (mod 2^L)

The first term is local to the server. ``W Xc`` is computed by bit-splitting
one operand and sending the other through OTs, one plane at a time; plane
``b`` only needs messages of ``L - b`` bits. ``W wr`` is a multiplexer with
the client choosing by its wrap share. ``B = 2^(l2-1)`` and drops to zero when
X is known to be non-negative, which also makes the wrap a single OT.

The four variants differ in which operand is widened by ``e`` bits and which
party sends:

1. W widened, server sends W columns, client splits its share of X (l2 planes)
2. W widened, client sends rows of its X share, server splits W (l1 + e planes)
3. X extended to l2 + e, server sends, client splits (l2 + e planes)
4. X extended to l2 + e, client sends, server splits W (l1 planes)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import costs
from .ot import OtGroup
from .party import Party
from .primitives import ProtocolError, Share, SignFact, ext, msb_or, wrap_bool
from .ring import ConvGeometry, QuantMeta, RingTensor, accumulator_extra_bits, from_signed, im2col, mask
from .transport import Role


class Variant(enum.IntEnum):
    W_SERVER = 1
    W_CLIENT = 2
    X_SERVER = 3
    X_CLIENT = 4

    @property
    def extend(self) -> str:
        return "W" if self in (Variant.W_SERVER, Variant.W_CLIENT) else "X"

    @property
    def sender(self) -> Role:
        return Role.SERVER if self in (Variant.W_SERVER, Variant.X_SERVER) else Role.CLIENT


SIRNN_DEFAULT = Variant.X_CLIENT


@dataclass(frozen=True)
class MatmulDims:
    d1: int
    d2: int
    d3: int
    l1: int
    l2: int
    out_bits: int | None = None

    def __post_init__(self):
        if min(self.d1, self.d2, self.d3) < 0 or min(self.l1, self.l2) < 1:
            raise ValueError("invalid matmul dimensions")
        if self.acc_bits > 64 or self.out < self.acc_bits:
            raise ValueError(f"accumulator of {self.out} bits does not fit")

    @property
    def e(self) -> int:
        return accumulator_extra_bits(self.d2)

    @property
    def acc_bits(self) -> int:
        return self.l1 + self.l2 + self.e

    @property
    def out(self) -> int:
        return self.out_bits or self.acc_bits


@dataclass
class MatmulPlanChoice:
    variant: Variant
    predicted_bits: dict = field(default_factory=dict)

    @property
    def extend(self) -> str:
        return self.variant.extend

    @property
    def sender(self) -> Role:
        return self.variant.sender

    @property
    def total(self) -> int:
        return sum(self.predicted_bits.values())


# ---------------------------------------------------------------------------
# cost models


def cost_variant(variant, dims: MatmulDims, lam: int = 128) -> tuple[int, int, int]:
    """The published per-step expressions, big-O constants taken as 1."""
    d1, d2, d3, l1, l2, e = dims.d1, dims.d2, dims.d3, dims.l1, dims.l2, dims.e
    v = Variant(variant)
    if v == Variant.W_SERVER:
        return (
            0,
            d2 * d3 * l2 * (lam + 2 * (l1 + e) * d1),
            d2 * d3 * (lam + 14) * l2 + d1 * d2 * (lam + 2 * (l1 + e) * d3),
        )
    if v == Variant.W_CLIENT:
        return (
            0,
            d1 * d2 * (l1 + e) * (lam + 2 * l2 * d3),
            d2 * d3 * (lam + 14) * l2 + d1 * d2 * (lam + (l1 + e) * d3),
        )
    ext_cost = d2 * d3 * lam * (l2 + 1)
    wrap = d2 * d3 * (lam + 14) * (l2 + e) + d1 * d2 * (lam + l1 * d3)
    if v == Variant.X_SERVER:
        return ext_cost, d2 * d3 * (l2 + e) * (lam + 2 * l1 * d1), wrap
    # printed with (l1 + e) although the messages are rows of the extended X
    return ext_cost, d1 * d2 * l1 * (lam + 2 * (l1 + e) * d3), wrap


def ot_count(variant, dims: MatmulDims) -> int:
    """OT instances of the multiplication step."""
    v = Variant(variant)
    return dims.d2 * dims.d3 * split_planes(v, dims) if v.sender == Role.SERVER else dims.d1 * dims.d2 * split_planes(v, dims)


def split_planes(variant, dims: MatmulDims) -> int:
    v = Variant(variant)
    return {
        Variant.W_SERVER: dims.l2,
        Variant.W_CLIENT: dims.l1 + dims.e,
        Variant.X_SERVER: dims.l2 + dims.e,
        Variant.X_CLIENT: dims.l1,
    }[v]


def _x_width(v: Variant, dims: MatmulDims) -> int:
    return dims.l2 + dims.e if v.extend == "X" else dims.l2


def construction_bits(variant, dims: MatmulDims, lam: int = 128, nonneg: bool = False) -> dict:
    """Exact metered bits of each step as built here."""
    v = Variant(variant)
    d1, d2, d3, L = dims.d1, dims.d2, dims.d3, dims.out
    wX = _x_width(v, dims)
    planes = split_planes(v, dims)
    ext_b = costs.ext_bits(d2 * d3, dims.l2, wX, nonneg, lam) if wX > dims.l2 else 0
    if v.sender == Role.SERVER:
        groups = [(d2 * d3, 2, d1, L - b) for b in range(planes)]
    else:
        groups = [(d1 * d2, 2, d3, L - b) for b in range(planes)]
    mult = costs.batch_bits(groups, lam)
    n = d2 * d3
    wrap = costs.msb_or_bits(n, 1, lam) if nonneg else costs.mill_bits(n, wX, lam)
    wrap += costs.batch_bits([(n, 2, d1, L - wX)], lam)
    return {"mm.ext": ext_b, "mm.ot": mult, "mm.wrap": wrap}


def select_variant(dims: MatmulDims, lam: int = 128, nonneg: bool = False) -> MatmulPlanChoice:
    """Cheapest variant under the exact cost of this construction.

    Ties go to the smallest variant index.
    """
    best = None
    for v in Variant:
        bits = construction_bits(v, dims, lam, nonneg)
        choice = MatmulPlanChoice(v, bits)
        if best is None or choice.total < best.total:
            best = choice
    return best


def select_variant_published(dims: MatmulDims, lam: int = 128) -> Variant:
    """Argmin of the published expressions, smallest index on ties."""
    totals = [sum(cost_variant(v, dims, lam)) for v in Variant]
    return Variant(int(np.argmin(totals)) + 1)


def resolve_variant(choice, dims: MatmulDims, lam: int, nonneg: bool) -> MatmulPlanChoice:
    if choice is None or choice == "adaptive":
        return select_variant(dims, lam, nonneg)
    if choice == "sirnn":
        choice = SIRNN_DEFAULT
    v = Variant(int(choice))
    return MatmulPlanChoice(v, construction_bits(v, dims, lam, nonneg))


# ---------------------------------------------------------------------------
# protocol


def _plane_sums(received: list[np.ndarray], rows: int, cols: int, inner: int, L: int, transpose: bool) -> np.ndarray:
    """Sum ``2^b * M_b`` over planes and the inner index, modulo 2^L."""
    acc = np.zeros((rows, cols), dtype=np.uint64)
    for b, m in enumerate(received):
        if transpose:
            # m is (d2*d3, d1): indexed (j, k, i)
            part = m.reshape(inner, cols, rows).sum(axis=0, dtype=np.uint64).T
        else:
            # m is (d1*d2, d3): indexed (i, j, k)
            part = m.reshape(rows, inner, cols).sum(axis=1, dtype=np.uint64)
        acc += part << np.uint64(b)
    return acc & mask(L)


def secure_matmul(
    p: Party,
    W: RingTensor | None,
    X: Share,
    w_meta: QuantMeta,
    d1: int,
    variant=None,
    out_bits: int | None = None,
) -> tuple[Share, MatmulPlanChoice]:
    """Shares of ``W @ X`` at the accumulator width (or ``out_bits``).

    The server passes the plaintext ``W``; the client passes ``None``. Both
    pass the public weight metadata and row count. ``variant`` is 1-4,
    ``"sirnn"`` or ``None`` for adaptive selection.
    """
    if X.data.ndim != 2:
        raise ProtocolError("X must be a matrix")
    d2, d3 = X.shape
    l1, l2 = w_meta.bits, X.bits
    dims = MatmulDims(d1, d2, d3, l1, l2, out_bits)
    if p.is_server:
        if W is None or W.shape != (d1, d2) or W.meta != w_meta:
            raise ProtocolError("weights do not match the declared shape and metadata")
    plan = resolve_variant(variant, dims, p.lam, X.nonneg)
    v = plan.variant
    L = dims.out
    e = dims.e
    nonneg = X.nonneg
    out_meta = QuantMeta(L, w_meta.scale_log2 + X.meta.scale_log2)

    # step 1: widening
    with p.scope("mm.ext"):
        if v.extend == "X" and e > 0:
            X = ext(p, X, l2 + e)
    wX = X.bits
    xd = X.data
    bias = 0 if nonneg else 1 << (l2 - 1)
    if p.is_server and bias:
        xd = (xd + np.uint64(bias)) & mask(wX)
    Wu = from_signed(W.signed(), 64) if p.is_server else None

    # step 2: cross term W Xc
    planes = split_planes(v, dims)
    with p.scope("mm.ot"):
        if v.sender == Role.CLIENT:
            groups = [OtGroup(d1 * d2, d3, L - b) for b in range(planes)]
            if p.is_server:
                choices = [((Wu >> np.uint64(b)) & np.uint64(1)).ravel().astype(np.int64) for b in range(planes)]
                got = p.ot.receive(groups, choices)
                cross = _plane_sums(got, d1, d3, d2, L, transpose=False)
            else:
                msgs, pads = [], []
                for b in range(planes):
                    wb = L - b
                    term = xd if b < planes - 1 else (np.uint64(0) - xd)
                    R = p.random_ring((d1 * d2, d3), wb)
                    one = (R.reshape(d1, d2, d3) + term[None, :, :]).reshape(d1 * d2, d3)
                    msgs.append(np.stack([R, one], axis=1))
                    pads.append(R)
                p.ot.send(groups, msgs)
                cross = (np.uint64(0) - _plane_sums(pads, d1, d3, d2, L, transpose=False)) & mask(L)
        else:
            groups = [OtGroup(d2 * d3, d1, L - b) for b in range(planes)]
            if p.is_server:
                msgs, pads = [], []
                wcols = Wu.T  # (d2, d1)
                for b in range(planes):
                    R = p.random_ring((d2 * d3, d1), L - b)
                    one = (R.reshape(d2, d3, d1) + wcols[:, None, :]).reshape(d2 * d3, d1)
                    msgs.append(np.stack([R, one], axis=1))
                    pads.append(R)
                p.ot.send(groups, msgs)
                cross = (np.uint64(0) - _plane_sums(pads, d1, d3, d2, L, transpose=True)) & mask(L)
            else:
                choices = [((xd >> np.uint64(b)) & np.uint64(1)).ravel().astype(np.int64) for b in range(planes)]
                got = p.ot.receive(groups, choices)
                cross = _plane_sums(got, d1, d3, d2, L, transpose=True)

    # step 3: wrap of the X shares and W * wrap
    with p.scope("mm.wrap"):
        if nonneg:
            wr = msb_or(p, xd, wX, 1)
        else:
            wr = wrap_bool(p, xd, wX)
        Lm = L - wX
        n = d2 * d3
        g = [OtGroup(n, d1, Lm)]
        if p.is_server:
            R = p.random_ring((n, d1), Lm)
            wcols = np.repeat(Wu.T, d3, axis=0)  # row (j, k) -> W[:, j]
            sel0 = wr[:, None]
            m0 = (wcols * sel0 - R) & mask(Lm)
            m1 = (wcols * (sel0 ^ np.uint64(1)) - R) & mask(Lm)
            p.ot.send(g, [np.stack([m0, m1], axis=1)])
            tpart = R
        else:
            tpart = p.ot.receive(g, [wr.astype(np.int64)])[0]
        T = tpart.reshape(d2, d3, d1).sum(axis=0, dtype=np.uint64).T  # (d1, d3)

    y = cross - (T << np.uint64(wX))
    if p.is_server:
        y = y + (Wu @ xd)
        if bias:
            rowsum = Wu.sum(axis=1, dtype=np.uint64)
            y = y - rowsum[:, None] * np.uint64(bias)
    return Share(RingTensor(y & mask(L), out_meta), p.role, SignFact.UNKNOWN), plan


def conv_dims(geom: ConvGeometry, l1: int, l2: int, out_bits: int | None = None) -> MatmulDims:
    d1, d2, d3 = geom.dims
    return MatmulDims(d1, d2, d3, l1, l2, out_bits)


def secure_conv(
    p: Party,
    X: Share,
    W: RingTensor | None,
    geom: ConvGeometry,
    w_meta: QuantMeta,
    variant=None,
    out_bits: int | None = None,
) -> tuple[Share, MatmulPlanChoice]:
    """Convolution lowered by im2col; the rearrangement is local to each share."""
    cols = im2col(X.data, geom)
    Xm = Share(RingTensor(cols, X.meta), X.party, X.sign)
    Wm = W.reshape(geom.c_out, -1) if W is not None else None
    Y, plan = secure_matmul(p, Wm, Xm, w_meta, geom.c_out, variant, out_bits)
    return Y.reshape(geom.c_out, geom.out_height, geom.out_width), plan
