"""
Which pixels count as matched?
==============================

Two neighbouring slices of a drifting phantom share most of their tissue.
The weight map marks the pixels where the low-pass filtered slices agree to
within a threshold; only those pixels feed the masked losses. This script
sweeps the threshold and writes the maps for the middle pair as PNGs.
"""

from pathlib import Path

import numpy as np

from nsn2n import LpfParams, NoiseSpec, PhantomSpec, add_noise, make_phantom, weight_diagnostics
from nsn2n.volume import export_slice_png

out = Path("demo_output/weight_maps")

clean = make_phantom(PhantomSpec(seed=1))
noisy = add_noise(clean, NoiseSpec("gaussian", 0.07, seed=1))

# exact agreement of the clean slices: the best any threshold can do
exact = np.mean(clean.data[:-1] == clean.data[1:])
print(f"clean slices agree on {exact:.1%} of pixels")

# the filter strength and noise estimate follow the known noise level
params = LpfParams.for_noise_level(0.07)
rows = weight_diagnostics(noisy, params, [0.005, 0.01, 0.03, 0.05, "inf"], out_dir=out)
for r in rows:
    print(f"th {r['th']:<6g} matched {r['matched_fraction']:.3f}"
          f"  (pairs range {r['min_pair_fraction']:.3f} to {r['max_pair_fraction']:.3f})")

# for reference, the pair itself and where the truth changes
mid = (noisy.depth - 1) // 2
export_slice_png(noisy.data[mid], out / "noisy_a.png")
export_slice_png(noisy.data[mid + 1], out / "noisy_b.png")
export_slice_png((clean.data[mid] != clean.data[mid + 1]).astype(np.float32), out / "true_changes.png")
print(f"wrote PNGs to {out}/")
