"""
What each loss term contributes
===============================

Train the same volume four ways: the full objective, without the continuity
term, with the masked reconstruction alone, and with no mask at all. The
unmasked variant treats moving edges as if both slices showed the same
tissue, and it shows.

Usage: ``python loss_ablation.py [epochs]`` (default 20).
"""

import sys

from nsn2n import (
    LpfParams,
    ModelConfig,
    NoiseSpec,
    PhantomSpec,
    TrainConfig,
    add_noise,
    build_training_set,
    denoise_volume,
    evaluate_volume,
    make_phantom,
    train,
)

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20

clean = make_phantom(PhantomSpec(seed=0))
noisy = add_noise(clean, NoiseSpec("gaussian", 0.07, seed=0))
params = LpfParams.for_noise_level(0.07)
base = TrainConfig(epochs=epochs, th=0.03)

# the weight maps do not depend on the loss, so build them once
pairs = build_training_set(noisy, base.th, params)

variants = {
    "full": (),
    "no continuity": ("no-ic",),
    "mask only": ("no-rc", "no-ic"),
    "no mask": ("no-w", "no-rc", "no-ic"),
}
print(f"{'noisy input':<14}", evaluate_volume(noisy, clean).summary())
for name, ablations in variants.items():
    model, _ = train(noisy, base.ablate(*ablations), ModelConfig(), params, pairs=pairs)
    print(f"{name:<14}", evaluate_volume(denoise_volume(model, noisy), clean).summary())
