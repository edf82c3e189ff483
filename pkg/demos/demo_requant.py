"""
=====================================
Re-quantizing a secret-shared tensor
=====================================

A fixed-point value held as two additive shares can change width and scale
without either party seeing it. This demo re-quantizes a shared accumulator
down to a narrow activation format and shows which sub-protocols ran and how
many bits each one cost on the wire.
"""

# %%
# Setup
# -----
# A 16-bit accumulator with 8 fractional bits, to be narrowed to 8 bits with
# 2 fractional bits.
import numpy as np

from quant2pc import costs
from quant2pc import primitives as P
from quant2pc.party import run_pair
from quant2pc.ring import QuantMeta, RingTensor, requant_plain

rng = np.random.default_rng(0)
x = RingTensor.from_signed(rng.integers(-(1 << 15), 1 << 15, size=1000), QuantMeta(16, 8))
target = QuantMeta(8, 2)

# %%
# Run both parties
# ----------------
# Each side gets one share. The two parties run in threads and talk over an
# in-process channel that counts every byte.
xs, xc = P.share(x, rng)
res = run_pair(lambda p: P.requant(p, xs, target), lambda p: P.requant(p, xc, target))
y = P.reconstruct(res.server, res.client)
print("matches plaintext:", y == requant_plain(x, target))

# %%
# Where the bits went
# -------------------
# The width drop covers the scale drop here, so a single
# truncate-and-reduce step is enough.
for label, (nbytes, rounds) in sorted(res.meter.breakdown().items()):
    if label.startswith("__"):
        continue  # length prefixes
    print(f"{label:28s} {8 * nbytes:>9d} bits in {rounds} rounds")
print("cost model:", costs.requant_bits(x.size, 16, 8, 8, 2), "bits")

# %%
# Known sign
# ----------
# When the input is known to be non-negative (say, after a ReLU) the wrap
# correction gets cheaper.
for l in (8, 16, 24, 32):
    plain = costs.ext_bits(1, l, l + 8)
    known = costs.ext_bits(1, l, l + 8, nonneg=True)
    print(f"extend {l:2d} -> {l + 8:2d}: {plain:5d} bits, {known:5d} bits when non-negative")
