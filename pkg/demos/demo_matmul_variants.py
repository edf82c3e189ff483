"""
===========================================
Choosing a secure matrix product per layer
===========================================

A secret-shared product ``W @ X`` can be built by splitting either operand into
bit planes and letting either party act as the OT sender. Which of the four
constructions is cheapest depends on the layer shape and on the bit-widths.
This demo prints the cost of each one for a few convolution shapes and checks
one product end to end.
"""

# %%
# Costs per construction
# ----------------------
# ``construction_bits`` is the exact on-wire cost of what gets built.
from quant2pc.matmul import Variant, construction_bits, conv_dims, select_variant
from quant2pc.ring import ConvGeometry

shapes = [(14, 16, 3), (7, 32, 3), (4, 64, 3), (2, 128, 1)]
for wb, ab in [(2, 4), (4, 4), (4, 2)]:
    print(f"W{wb}A{ab}")
    for res, ch, k in shapes:
        dims = conv_dims(ConvGeometry(ch, ch, res, res, k, 1, k // 2), wb, ab)
        row = [sum(construction_bits(v, dims).values()) for v in Variant]
        best = select_variant(dims).variant
        cells = "  ".join(f"{b / 8e6:8.3f}" for b in row)
        print(f"  {res:3d}x{res:<3d} c={ch:<4d} k={k}  MB: {cells}  -> variant {int(best)}")

# %%
# One product, all constructions
# ------------------------------
# Every construction reconstructs the same integer product.
import numpy as np

from quant2pc.matmul import secure_matmul
from quant2pc.party import run_pair
from quant2pc.primitives import reconstruct, share
from quant2pc.ring import QuantMeta, RingTensor, matmul_plain

rng = np.random.default_rng(1)
W = RingTensor.from_signed(rng.integers(-2, 2, size=(8, 18)), QuantMeta(2))
X = RingTensor.from_signed(rng.integers(-8, 8, size=(18, 16)), QuantMeta(4))
xs, xc = share(X, rng)
for v in list(Variant) + [None]:
    r = run_pair(lambda p: secure_matmul(p, W, xs, W.meta, 8, v), lambda p: secure_matmul(p, None, xc, W.meta, 8, v))
    (ys, plan), (yc, _) = r.server, r.client
    ok = reconstruct(ys, yc) == matmul_plain(W, X)
    name = "adaptive" if v is None else f"variant {int(v)}"
    print(f"{name:10s} picks {int(plan.variant)}: {r.meter.total_bits() - r.meter.bits('ot.setup'):7d} bits, exact={ok}")
