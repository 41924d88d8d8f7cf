"""Synthetic phantoms and noise models.

Phantoms are stacks of nested ellipses whose centres and radii move linearly
from slice to slice, so neighbouring slices share most of their pixels
exactly and differ only in thin bands along moving boundaries.

Every noise draw for slice ``i`` comes from its own PCG64 stream seeded with
``(seed, i)``; results therefore do not depend on processing order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume, as_volume

NOISE_MODELS = ("gaussian", "rician", "correlated")


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 64
    height: int = 64
    depth: int = 32
    n_shapes: int = 3
    drift: float = 0.01
    levels: tuple = (0.4, 0.7, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if self.width < 8 or self.height < 8:
            raise ValueError("phantom slices must be at least 8x8")
        if self.depth < 2:
            raise ValueError("depth must be >= 2 (pairing needs at least one neighbouring pair)")
        if self.n_shapes < 1:
            raise ValueError("n_shapes must be >= 1")
        if self.drift < 0:
            raise ValueError("drift must be >= 0")
        if not self.levels or any(not 0.0 < v <= 1.0 for v in self.levels):
            raise ValueError("intensity levels must lie in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise model and strength.

    ``level`` is the noise standard deviation as a fraction of the clean
    volume's maximum. ``half_width`` only matters for the correlated model,
    where it sets the in-plane box kernel to ``(2 * half_width + 1)`` squared.
    """

    model: str = "gaussian"
    level: float = 0.05
    half_width: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.model == "correlated-gaussian":
            object.__setattr__(self, "model", "correlated")
        if self.model not in NOISE_MODELS:
            raise ValueError(f"unknown noise model {self.model!r}; expected one of {NOISE_MODELS}")
        if not self.level >= 0:
            raise ValueError("noise level must be >= 0")
        if self.model == "correlated" and self.half_width < 1:
            raise ValueError("correlated noise needs half_width >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# phantoms


@dataclass
class _Ellipse:
    center: np.ndarray  # (row, col) at the middle slice
    radii: np.ndarray  # (row, col) at the middle slice
    direction: np.ndarray  # unit vector of centre motion
    grow: float  # +1 or -1
    value: float = field(default=1.0)


def _layout(spec: PhantomSpec, rng) -> list[_Ellipse]:
    extent = np.array([spec.height, spec.width], dtype=np.float64)
    shapes = []
    center = (extent - 1) / 2 + rng.uniform(-0.03, 0.03, 2) * extent
    radii = rng.uniform(0.32, 0.40, 2) * extent
    order = rng.permutation(len(spec.levels))
    for k in range(spec.n_shapes):
        if k > 0:
            parent = shapes[-1]
            radii = parent.radii * rng.uniform(0.5, 0.7, 2)
            center = parent.center + rng.uniform(-0.2, 0.2, 2) * parent.radii
        angle = rng.uniform(0, 2 * np.pi)
        shapes.append(
            _Ellipse(
                center=center,
                radii=radii,
                direction=np.array([np.sin(angle), np.cos(angle)]),
                grow=float(rng.choice([-1.0, 1.0])),
                value=spec.levels[order[k % len(order)]],
            )
        )
    return shapes


def _render(spec: PhantomSpec, shapes, z) -> np.ndarray:
    extent = np.array([spec.height, spec.width], dtype=np.float64)
    rows, cols = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    dz = z - (spec.depth - 1) / 2
    img = np.zeros((spec.height, spec.width), dtype=np.float32)
    for shp in shapes:
        c = shp.center + dz * spec.drift * extent * shp.direction
        r = np.maximum(shp.radii + 0.5 * shp.grow * dz * spec.drift * extent, 1.5)
        inside = ((rows - c[0]) / r[0]) ** 2 + ((cols - c[1]) / r[1]) ** 2 <= 1.0
        img[inside] = shp.value
    return img


def overlap_fractions(volume) -> np.ndarray:
    """Share of pixels with exactly equal values in each pair of consecutive slices."""
    data = as_volume(volume).data
    return np.mean(data[1:] == data[:-1], axis=(1, 2))


def make_phantom(spec: PhantomSpec = PhantomSpec()) -> Volume:
    rng = np.random.default_rng(spec.seed)
    shapes = _layout(spec, rng)
    data = np.stack([_render(spec, shapes, z) for z in range(spec.depth)])
    vol = Volume(data, (0.0, float(data.max())))
    frac = overlap_fractions(vol)
    if frac.min() < 0.5:
        raise ValueError(
            f"insufficient inter-slice continuity: overlap {frac.min():.3f} < 0.5 "
            f"between slices {int(frac.argmin())} and {int(frac.argmin()) + 1}"
        )
    return vol


# --------------------------------------------------------------------------
# noise


def _slice_rng(seed, index):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _sigma(clean, spec):
    return spec.level * float(clean.max())


def add_gaussian_noise(volume, spec: NoiseSpec) -> Volume:
    """Additive iid zero-mean Gaussian noise with std ``level * max(volume)``."""
    volume = as_volume(volume)
    if spec.level == 0:
        return volume.with_data(volume.data.copy())
    s = volume.data.astype(np.float64)
    sigma = _sigma(s, spec)
    out = np.empty_like(s)
    for i in range(volume.depth):
        out[i] = s[i] + sigma * _slice_rng(spec.seed, i).standard_normal(s[i].shape)
    return volume.with_data(out.astype(np.float32))


def add_rician_noise(volume, spec: NoiseSpec) -> Volume:
    """Magnitude of the clean signal with Gaussian noise on both quadrature channels."""
    volume = as_volume(volume)
    s = volume.data.astype(np.float64)
    if s.min() < 0:
        raise ValueError("rician noise needs a non-negative magnitude signal")
    if spec.level == 0:
        return volume.with_data(volume.data.copy())
    sigma = _sigma(s, spec)
    out = np.empty_like(s)
    for i in range(volume.depth):
        rng = _slice_rng(spec.seed, i)
        n_re = sigma * rng.standard_normal(s[i].shape)
        n_im = sigma * rng.standard_normal(s[i].shape)
        out[i] = np.hypot(s[i] + n_re, n_im)
    return volume.with_data(out.astype(np.float32))


def add_correlated_noise(volume, spec: NoiseSpec) -> Volume:
    """In-plane box-filtered Gaussian noise, independent between slices.

    The white field is drawn with a ``half_width`` margin and filtered in
    ``valid`` mode, so every pixel sees a full kernel and the noise is
    stationary up to the slice border. Scaling by the kernel side length
    restores a per-pixel standard deviation of exactly ``level * max``.
    """
    volume = as_volume(volume)
    hw = spec.half_width
    side = 2 * hw + 1
    if side > min(volume.height, volume.width):
        raise ValueError(f"kernel of side {side} is wider than the {volume.height}x{volume.width} slice")
    if spec.level == 0:
        return volume.with_data(volume.data.copy())
    s = volume.data.astype(np.float64)
    sigma = _sigma(s, spec)
    out = np.empty_like(s)
    h, w = volume.height, volume.width
    for i in range(volume.depth):
        white = _slice_rng(spec.seed, i).standard_normal((h + 2 * hw, w + 2 * hw))
        smooth = ndimage.uniform_filter(white, size=side, mode="constant")[hw : hw + h, hw : hw + w]
        out[i] = s[i] + sigma * side * smooth
    return volume.with_data(out.astype(np.float32))


def add_noise(volume, spec: NoiseSpec) -> Volume:
    if spec.model == "gaussian":
        return add_gaussian_noise(volume, spec)
    if spec.model == "rician":
        return add_rician_noise(volume, spec)
    return add_correlated_noise(volume, spec)
