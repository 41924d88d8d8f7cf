"""Volumes of equally sized slices, normalisation, resampling and file I/O.

A volume is stored as a ``(depth, height, width)`` float32 array; a slice is
one ``(height, width)`` plane of it, indexed ``(row, column)``.

On disk a volume is a JSON header plus a raw payload next to it::

    {"version": 1, "width": W, "height": H, "depth": N, "dtype": "f32le",
     "order": "slice-major,row-major", "value_range": [min, max]}

The payload file shares the header's stem with the suffix ``.raw`` and holds
``W * H * N`` little-endian float32 samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, UnsupportedVersionError

FORMAT_VERSION = 1
DTYPE_TAG = "f32le"
ORDER_TAG = "slice-major,row-major"


@dataclass(frozen=True)
class Volume:
    """Stack of ``depth >= 2`` slices sharing one ``(height, width)``.

    ``value_range`` is the ``(min, max)`` of the data before normalisation;
    for volumes that were never normalised it is the data's own range.
    """

    data: np.ndarray
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D (depth, height, width), got {data.shape}")
        if data.shape[0] < 2:
            raise ValueError("a volume needs at least 2 slices to form a neighbouring pair")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise ValueError("volume has an empty axis")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        object.__setattr__(self, "data", data)
        if self.value_range is None:
            object.__setattr__(self, "value_range", (float(data.min()), float(data.max())))
        else:
            object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __len__(self):
        return self.depth

    def __getitem__(self, i) -> np.ndarray:
        return self.data[i]

    def __iter__(self):
        return iter(self.data)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.value_range)


def as_volume(obj) -> Volume:
    return obj if isinstance(obj, Volume) else Volume(obj)


def normalize(volume) -> Volume:
    """Min-max scale the whole volume to ``[0, 1]``.

    One affine map is used for every slice so that intensities stay
    comparable across neighbouring slices.
    """
    volume = as_volume(volume)
    data = volume.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if not hi > lo:
        raise ValueError("degenerate intensity range")
    out = (data - lo) / (hi - lo)
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32), (lo, hi))


def denormalize(volume: Volume) -> np.ndarray:
    lo, hi = volume.value_range
    return volume.data.astype(np.float64) * (hi - lo) + lo


def _axis_weights(n_src, n_dst):
    # align first and last pixel centres so corner samples are reproduced exactly
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    return i0, i1, frac


def resample_slice(slice_, new_width: int, new_height: int) -> np.ndarray:
    """Bilinear resampling on a grid whose first/last pixel centres sit on the image corners."""
    if new_width < 1 or new_height < 1:
        raise ValueError("target size must be positive")
    if new_width < 2 or new_height < 2:
        raise ValueError("target size must be at least 2x2")
    src = np.asarray(slice_, dtype=np.float64)
    if src.ndim != 2:
        raise ValueError("slice must be 2-D")
    h, w = src.shape
    if (h, w) == (new_height, new_width):
        return src.astype(np.float32)
    r0, r1, fr = _axis_weights(h, new_height)
    c0, c1, fc = _axis_weights(w, new_width)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr[:, None]) + bottom * fr[:, None]
    return out.astype(np.float32)


def resample_volume(volume, new_width: int, new_height: int) -> Volume:
    volume = as_volume(volume)
    data = np.stack([resample_slice(s, new_width, new_height) for s in volume.data])
    return Volume(data, volume.value_range)


# --------------------------------------------------------------------------
# file format


def payload_path(header_path) -> Path:
    return Path(header_path).with_suffix(".raw")


def save_volume(volume, path) -> Path:
    """Write header ``path`` and its ``.raw`` payload. Returns the header path."""
    volume = as_volume(volume)
    path = Path(path)
    header = {
        "version": FORMAT_VERSION,
        "width": volume.width,
        "height": volume.height,
        "depth": volume.depth,
        "dtype": DTYPE_TAG,
        "order": ORDER_TAG,
        "value_range": list(volume.value_range),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2) + "\n")
    payload_path(path).write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    return path


def load_volume(path) -> Volume:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"corrupt volume file: bad header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version: {header.get('version')!r}")
    if header.get("dtype") != DTYPE_TAG:
        raise CorruptFileError(f"corrupt volume file: unsupported dtype {header.get('dtype')!r}")
    if header.get("order", ORDER_TAG) != ORDER_TAG:
        raise CorruptFileError(f"corrupt volume file: unsupported order {header.get('order')!r}")
    try:
        w, h, n = int(header["width"]), int(header["height"]), int(header["depth"])
    except (KeyError, TypeError, ValueError):
        raise CorruptFileError("corrupt volume file: missing dimensions") from None
    raw = payload_path(path).read_bytes()
    if w < 1 or h < 1 or n < 2 or len(raw) != 4 * w * h * n:
        raise CorruptFileError(
            f"corrupt volume file: header declares {w}x{h}x{n} "
            f"but payload holds {len(raw)} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(n, h, w).astype(np.float32)
    value_range = header.get("value_range")
    try:
        return Volume(data, tuple(value_range) if value_range is not None else None)
    except ValueError as exc:
        raise CorruptFileError(f"corrupt volume file: {exc}") from None


def export_slice_png(slice_, path) -> Path:
    """16-bit grayscale PNG of one slice; values are clamped to ``[0, 1]`` first."""
    from PIL import Image

    arr = np.clip(np.asarray(slice_, dtype=np.float64), 0.0, 1.0)
    img = np.round(arr * 65535.0).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)
    return path
