"""How far is a masked pixel from the nearest visible one?

Sweeps AvgDist over mask ratio and masked-patch size for the random
strategy on 192x192 images, then prints a small table. Larger patches
and higher ratios push masked pixels further from visible context,
which is the knob that makes the pretext task harder.

    python demos/avgdist_sweep.py
"""
from mimlab.masking import mask_sweep

PATCHES = [4, 8, 16, 32, 64]
RATIOS = [0.1, 0.3, 0.5, 0.7, 0.9]

# a few 64px cells are fully masked at high ratios; those are skipped with a warning
rows = mask_sweep(["random", "square", "blockwise"], PATCHES, RATIOS, range(8), 192, skip_invalid=True)
table = {(r.strategy, r.patch, r.ratio): r.avgdist_mean for r in rows}

for strategy in ("random", "square", "blockwise"):
    print(f"\n{strategy}")
    print("patch " + "".join(f"{r:>8.1f}" for r in RATIOS))
    for p in PATCHES:
        cells = [table.get((strategy, p, r)) for r in RATIOS]
        print(f"{p:>5} " + "".join(f"{c:>8.2f}" if c is not None else f"{'-':>8}" for c in cells))
