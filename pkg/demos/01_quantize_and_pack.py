"""Quantize a weight matrix three ways, then compare how compactly each packs.

Run with ``python3 demos/01_quantize_and_pack.py``.
"""

import numpy as np

from ternpack import bitpack
from ternpack.quant import Granularity, dequantize, quantize, reconstruction_error

rng = np.random.default_rng(0)
W = rng.standard_normal((512, 256)) * 0.02
g = Granularity("per_group", 128)

# Three ternary quantizers on the same weights. The 3:4 variant forces exactly
# one zero per aligned block of four input channels.
print("scheme     zeros   rel. error")
for scheme in ("absmean", "twn", "sparse34"):
    t = quantize(W, scheme, g)
    err = reconstruction_error(W, t) / np.sum(W**2)
    print(f"{scheme:9} {np.mean(t.codes == 0):6.1%}   {err:.4f}")

# The 3:4 structure is what makes the 5-bit block code possible: a sign bit
# plus a nibble naming the zero position and the relative signs.
t = quantize(W, "sparse34", g)
print("\nlayout      payload bytes  bits/weight (incl. scales)")
for scheme in bitpack.SCHEMES:
    p = bitpack.pack(t, scheme)
    r = bitpack.density(p)
    print(f"{scheme:10} {r.payload_bytes:14d}  {r.bits_per_weight:.4f}")
    assert bitpack.unpack(p).equals(t)

# Unpacking always recovers the exact codes and scales.
print("\nround trip exact:", np.array_equal(dequantize(bitpack.unpack(bitpack.pack(t, "sherry125"))), dequantize(t)))
