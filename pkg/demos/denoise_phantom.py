"""
Denoising a synthetic volume without clean targets
==================================================

A noisy volume is its own training set: each slice is paired with the next
one and the network learns to predict one from the other on matched pixels.
The clean phantom is used only to score the result.

Usage: ``python denoise_phantom.py [epochs]`` (default 20; the reference
setting is 100, roughly ten minutes on one core).
"""

import sys
from pathlib import Path

from nsn2n import (
    LpfParams,
    ModelConfig,
    NoiseSpec,
    PhantomSpec,
    TrainConfig,
    add_noise,
    denoise_volume,
    evaluate_volume,
    make_phantom,
    train,
)
from nsn2n.volume import export_slice_png

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
out = Path("demo_output/denoise")

clean = make_phantom(PhantomSpec(seed=0))
noisy = add_noise(clean, NoiseSpec("gaussian", 0.07, seed=0))
print("noisy    ", evaluate_volume(noisy, clean).summary())

config = TrainConfig(epochs=epochs, th=0.03)


def show(record):
    if record["epoch"] % 5 == 0 or record["epoch"] == epochs:
        print(f"epoch {record['epoch']:3d}  loss {record['loss_total']:.5f}  psnr {record['psnr']:.2f}")


model, history = train(
    noisy, config, ModelConfig(), LpfParams.for_noise_level(0.07), clean=clean, progress=show
)
denoised = denoise_volume(model, noisy)
print("denoised ", evaluate_volume(denoised, clean).summary())

# middle slice before and after
mid = clean.depth // 2
for name, vol in [("clean", clean), ("noisy", noisy), ("denoised", denoised)]:
    export_slice_png(vol.data[mid], out / f"{name}.png")
history.write_csv(out / "history.csv")
print(f"wrote slices and history to {out}/")
