"""Multiply by a packed tensor without multiplying by weights.

The table engine precomputes, for each group of four activations, the sixteen
signed sums a block can produce. Each packed block then costs one lookup and
one optional negation. Scales are applied once per scope at the end.
"""

import time

import numpy as np

from ternpack import bitpack, lut
from ternpack.quant import Granularity, dequantize, sparse34_quantize

rng = np.random.default_rng(1)
t = sparse34_quantize(rng.standard_normal((1024, 1024)), Granularity("per_group", 128))
p = bitpack.pack(t, "sherry125")
x = rng.standard_normal(1024)

# One table per activation segment: 16 entries, built with additions only.
table = lut.build_lut(x[:4])
print("first segment table:", np.round(table, 3))

y_lut = lut.lut_matvec(p, x, lut.DOUBLE)
y_ref = lut.ref_matvec(t, x, lut.DOUBLE)
print("bitwise equal to reference (double):", np.array_equal(y_lut, y_ref))
print("max rel. error vs dense x @ W (double):", lut.max_rel_error(y_lut, x @ dequantize(t)))

# Count the work in a single output column.
_, counts = lut.lut_matvec_counted(p, x)
c = counts[0]
print(f"column 0: {c.lookups} lookups, {c.adds} adds, {c.negations} negations, {c.mults} multiplications")

start = time.perf_counter()
for _ in range(10):
    lut.lut_matvec(p, x, lut.SINGLE)
print(f"1024x1024 matvec: {(time.perf_counter() - start) / 10 * 1e3:.2f} ms")
