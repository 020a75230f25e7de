"""Read a training trace the way the analysis commands do.

Two instruments are recorded during training:

* the effective rank of each layer's input gradient, ``exp`` of the entropy of
  its normalized singular values, which drops when gradients collapse onto a
  few directions;
* a histogram of latent weights divided by their scale, whose shape shows
  whether weights sit near the ternary levels or pile up on two modes.
"""

from pathlib import Path

import numpy as np

from ternpack import fileio
from ternpack.diagnostics import Histogram, effective_rank, trap_score

print("ER of I_8:", effective_rank(np.eye(8)).er)
print("ER of diag(2,1,1):", round(effective_rank(np.diag([2.0, 1.0, 1.0])).er, 6))

fixtures = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
for arm in ("naive", "arenas"):
    records = fileio.read_trace(fixtures / f"{arm}.jsonl")
    h = Histogram.from_json(records[-1]["hist_per_layer"][0])
    s = trap_score(h)
    bars = "".join(" .:-=+*#%@"[min(9, int(10 * c / h.counts.max()))] for c in h.counts)
    print(f"\n{arm} (synthetic fixture), layer 0, trap score {s.score:.3f}")
    print(f"  -3 |{bars}| +3")
