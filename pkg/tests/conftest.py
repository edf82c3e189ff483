"""Shared helpers: run a share-level function on both parties and reconstruct."""

from __future__ import annotations

import numpy as np
import pytest

from quant2pc.party import run_pair
from quant2pc.primitives import Share, SignFact, reconstruct, share
from quant2pc.ring import QuantMeta, RingTensor


def signed_tensor(rng, shape, bits, scale=0, nonneg=False):
    lo = 0 if nonneg else -(1 << (bits - 1))
    hi = (1 << (bits - 1)) - 1
    return RingTensor.from_signed(rng.integers(lo, hi + 1, size=shape), QuantMeta(bits, scale))


def on_shares(fn, x: RingTensor, sign=SignFact.UNKNOWN, seed=0, **kw):
    """Share ``x``, run ``fn(party, share)`` on both sides, reconstruct.

    Returns the reconstructed tensor and the (server) meter.
    """
    s0, s1 = share(x, np.random.default_rng([seed, 77]), sign)
    res = run_pair(lambda p: fn(p, s0), lambda p: fn(p, s1), seed=seed, **kw)
    return reconstruct(res.server, res.client), res.meter


def both_shares(fn, x: RingTensor, sign=SignFact.UNKNOWN, seed=0, **kw):
    """Like ``on_shares`` but returns the raw pair of result shares."""
    s0, s1 = share(x, np.random.default_rng([seed, 77]), sign)
    res = run_pair(lambda p: fn(p, s0), lambda p: fn(p, s1), seed=seed, **kw)
    return res.server, res.client, res.meter


def protocol_bits(meter) -> int:
    """Metered bits without the one-off OT session setup."""
    return meter.total_bits() - meter.bits("ot.setup")


def wrap(v: int, bits: int) -> int:
    v %= 1 << bits
    return v - (1 << bits) if v >> (bits - 1) else v


def alg1_scalar(x: int, l1: int, s1: int, l2: int, s2: int) -> int:
    """Line-by-line scalar transcription of the re-quantization algorithm."""
    if l1 >= l2:
        if s1 <= s2:
            t = wrap(x << (s2 - s1), l1)
            return wrap(t, l2)
        k = s1 - s2
        if l1 - l2 >= k:
            t = wrap(x >> k, l1 - k)
            return wrap(t, l2)
        t = wrap(x >> k, l1)
        return wrap(t, l2)
    if s1 > s2:
        t = x >> (s1 - s2)
        return wrap(t, l2)
    t = wrap(x << (s2 - s1), l1)
    return wrap(t, l2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["signed_tensor", "on_shares", "both_shares", "protocol_bits", "wrap", "alg1_scalar", "Share"]
