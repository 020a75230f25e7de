"""Train a small ternary student with and without the annealed full-precision bypass.

Each quantized layer computes ``X @ (T*alpha) + lam * X @ W``. The bypass
weight ``lam`` ramps up during warmup, then decays to zero, so the exported
model is purely ternary. This script trains both arms on the same teacher and
reports the final loss at ``lam = 0``.

Takes about ten seconds.
"""

from ternpack.train import TrainConfig, train

for arenas in (False, True):
    tr = train(TrainConfig(seed=1, arenas=arenas))
    label = "with bypass   " if arenas else "without bypass"
    curve = "  ".join(f"{r['loss']:.3f}" for r in tr.records[:: len(tr.records) // 6])
    print(f"{label} final loss {tr.final_loss:.4f}   eval curve: {curve}")

# The exported student carries no trace of the bypass: lam is exactly zero at
# the last step, and export refuses anything else.
print("final lambda:", tr.final_lambda)
