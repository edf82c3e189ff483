"""Closed-form communication of the protocols as built here.

Every function returns the exact number of metered bits (bytes times 8) the
corresponding protocol sends for ``n`` elements, including the per-flight
rounding to whole bytes. The meter must agree with these to the bit.

The asymptotic expressions quoted for the base protocols are available as
``table_*`` functions for shape and ordering checks.
"""

from __future__ import annotations

from functools import lru_cache

from .ot import choice_block_bits

CHUNK_BITS = 4


def _round8(bits: int) -> int:
    return -(-bits // 8) * 8


def batch_bits(groups, lam: int) -> int:
    """One OT batch: receiver choice blocks plus the sender's packed messages.

    ``groups`` is an iterable of ``(n, N, k, width)``.
    """
    groups = [g for g in groups if g[0] > 0]
    if not groups:
        return 0
    recv = sum(n * choice_block_bits(N, lam) for n, N, _, _ in groups)
    send = sum(n * N * k * w for n, N, k, w in groups)
    return recv + _round8(send)


def chunk_sizes(nbits: int, m: int = CHUNK_BITS) -> list[int]:
    if nbits <= 0:
        return []
    q = -(-nbits // m)
    return [m] * (q - 1) + [nbits - m * (q - 1)]


@lru_cache(maxsize=4096)
def mill_bits(n: int, nbits: int, lam: int = 128) -> int:
    """Comparison of two nbits-bit values, ``n`` at a time."""
    if n == 0 or nbits <= 0:
        return 0
    sizes = chunk_sizes(nbits)
    width = 1 if len(sizes) == 1 else 2
    total = batch_bits([(n, 1 << sz, 1, width) for sz in sizes], lam)
    count = len(sizes)
    while count > 1:
        pairs = count // 2
        w = 1 if count == 2 else 2
        total += 2 * batch_bits([(n * pairs, 2, 1, w)], lam)
        count = pairs + count % 2
    return total


def b2a_bits(n: int, k: int, lam: int = 128) -> int:
    return batch_bits([(n, 2, 1, k)], lam) if k > 0 else 0


msb_or_bits = b2a_bits


def mux_bits(n: int, l: int, lam: int = 128) -> int:
    return 2 * batch_bits([(n, 2, 1, l)], lam)


def wrap_arith_bits(n: int, nbits: int, k: int, lam: int = 128) -> int:
    return mill_bits(n, nbits, lam) + b2a_bits(n, k, lam)


def ext_bits(n: int, l1: int, l2: int, nonneg: bool = False, lam: int = 128) -> int:
    if l2 <= l1:
        return 0
    if nonneg:
        return msb_or_bits(n, l2 - l1, lam)
    return wrap_arith_bits(n, l1, l2 - l1, lam)


def trunc_bits(n: int, l: int, s: int, nonneg: bool = False, lam: int = 128) -> int:
    s = min(s, l - 1)
    if s <= 0:
        return 0
    carry = wrap_arith_bits(n, s, l, lam)
    if nonneg:
        return msb_or_bits(n, s, lam) + carry
    return wrap_arith_bits(n, l, s, lam) + carry


def tr_bits(n: int, l: int, s: int, nonneg: bool = False, lam: int = 128) -> int:
    if s <= 0:
        return 0
    return wrap_arith_bits(n, s, l - s, lam)


def requant_bits(n: int, l1: int, s1: int, l2: int, s2: int, nonneg: bool = False, lam: int = 128) -> int:
    """Cost of the five-branch re-quantization, mirroring its branch order."""
    if l1 >= l2:
        if s1 <= s2:
            return 0
        k = s1 - s2
        if l1 - l2 >= k:
            return tr_bits(n, l1, k, nonneg, lam)
        return trunc_bits(n, l1, k, nonneg, lam)
    if s1 > s2:
        k = min(s1 - s2, l1 - 1)
        return tr_bits(n, l1, k, nonneg, lam) + ext_bits(n, l1 - k, l2, nonneg, lam)
    return ext_bits(n, l1, l2, nonneg and s1 == s2, lam)


def relu_bits(n: int, l: int, nonneg: bool = False, lam: int = 128) -> int:
    if nonneg:
        return 0
    return mill_bits(n, l - 1, lam) + mux_bits(n, l, lam)


def drelu_bits(n: int, l: int, lam: int = 128) -> int:
    return mill_bits(n, l - 1, lam)


def maxpool_bits(n_out: int, l: int, kernel: int, nonneg: bool = False, lam: int = 128) -> int:
    """Tournament max over k*k candidates for ``n_out`` windows."""
    total = 0 if nonneg else ext_bits(n_out * kernel * kernel, l, l + 1, False, lam)
    bits = l if nonneg else l + 1
    count = kernel * kernel
    while count > 1:
        pairs = count // 2
        m = n_out * pairs
        total += drelu_bits(m, bits, lam) + mux_bits(m, bits, lam)
        count = pairs + count % 2
    return total


def avgpool_bits(n_in: int, l: int, kernel: int, nonneg: bool = False, lam: int = 128) -> int:
    j = (kernel * kernel).bit_length() - 1
    return ext_bits(n_in, l, l + j, nonneg, lam) if j else 0


def share_bits(n: int, l: int) -> int:
    return _round8(n * l)


# ---------------------------------------------------------------------------
# asymptotic expressions of the base protocols, constants taken as 1


def table_ext(lam: int, l1: int, l2: int, msb_known: bool = False) -> int:
    return 2 * lam - l1 + l2 if msb_known else lam * (l1 + 1)


def table_trunc(lam: int, l1: int, l2: int, msb_known: bool = False) -> int:
    return 3 * lam + l1 + l2 if msb_known else lam * (l1 + 3)


def table_tr(lam: int, l1: int, l2: int, msb_known: bool = False) -> int:
    return lam + 2 if msb_known else lam * (l2 + 1)
