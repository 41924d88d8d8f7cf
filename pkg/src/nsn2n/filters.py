"""Low-pass pre-filter used to build weight maps: non-local means, then a median.

The filtered slices are only ever used to decide which pixels of two
neighbouring slices match; they never enter the denoising path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class LpfParams:
    """Parameters of the NLM + median low-pass filter.

    ``h`` is the NLM filtering strength in intensity units and ``sigma`` an
    optional noise estimate; patch distances are reduced by ``2 * sigma**2``
    before weighting. With ``sigma=0`` weights depend on the patch distance
    alone. The default ``h=0.03`` is the conventional strength for noise at
    5% of the intensity range; :meth:`for_noise_level` derives both ``h``
    and ``sigma`` from a known noise level.
    """

    patch_radius: int = 1
    search_radius: int = 3
    h: float = 0.03
    sigma: float = 0.0
    median_size: int = 3

    def __post_init__(self):
        if self.patch_radius < 0 or self.search_radius < 0:
            raise ValueError("patch and search radii must be >= 0")
        if not self.h > 0:
            raise ValueError("NLM strength h must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.median_size < 1 or self.median_size % 2 == 0:
            raise ValueError("median kernel size must be odd and >= 1")

    @classmethod
    def for_noise_level(cls, level: float, **kwargs) -> "LpfParams":
        """``h = 0.6 * level`` and ``sigma = level`` for data normalised to ``[0, 1]``.

        Without the ``2 * sigma**2`` offset, patch distances between two noisy
        copies of the same structure (about ``2 * level**2``) dwarf ``h**2``
        and the filter barely smooths.
        """
        if not level > 0:
            raise ValueError("noise level must be > 0")
        kwargs.setdefault("sigma", level)
        return cls(h=0.6 * level, **kwargs)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def median_filter(slice_, k: int = 3) -> np.ndarray:
    """``k x k`` median with replicate padding."""
    x = np.asarray(slice_, dtype=np.float32)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel size must be odd, got {k}")
    if k > min(x.shape):
        raise ValueError(f"median kernel {k} larger than slice {x.shape}")
    return ndimage.median_filter(x, size=k, mode="nearest")


def nlm_filter(slice_, params: LpfParams = LpfParams()) -> np.ndarray:
    """Pixelwise non-local means.

    Each output pixel is the weighted mean of the pixels in its
    ``(2 * search_radius + 1)`` square window, the pixel itself included.
    The weight of a candidate is ``exp(-max(d2 - 2 sigma^2, 0) / h^2)`` with
    ``d2`` the mean squared difference between the two
    ``(2 * patch_radius + 1)`` square patches. Out-of-image samples, both
    candidates and patch members, repeat the nearest edge pixel.
    """
    x = np.asarray(slice_, dtype=np.float64)
    p, s = params.patch_radius, params.search_radius
    h, w = x.shape
    if h <= 2 * (p + s) or w <= 2 * (p + s):
        raise ValueError(
            f"slice {x.shape} too small for patch radius {p} and search radius {s}"
        )
    xp = np.pad(x, p + s, mode="edge")
    hh, ww = h + 2 * p, w + 2 * p
    ref = xp[s : s + hh, s : s + ww]
    inv_h2 = 1.0 / params.h**2
    bias = 2.0 * params.sigma**2
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            cand = xp[s + dy : s + dy + hh, s + dx : s + dx + ww]
            d2 = ndimage.uniform_filter((ref - cand) ** 2, size=2 * p + 1, mode="nearest")
            d2 = d2[p : p + h, p : p + w]
            wgt = np.exp(-np.maximum(d2 - bias, 0.0) * inv_h2)
            num += wgt * cand[p : p + h, p : p + w]
            den += wgt
    return (num / den).astype(np.float32)


def lpf(slice_, params: LpfParams = LpfParams()) -> np.ndarray:
    return median_filter(nlm_filter(slice_, params), params.median_size)


def lpf_volume(data, params: LpfParams = LpfParams()) -> np.ndarray:
    return np.stack([lpf(s, params) for s in np.asarray(data)])
