"""Weighted neighbouring-slice training pairs.

For slices ``x_i`` and ``x_{i+1}`` the weight map marks pixels whose low-pass
filtered values differ by at most ``th``::

    W_i(u, v) = 1  if |lpf(x_i) - lpf(x_{i+1})|(u, v) <= th  else 0

Weight maps are computed once, before training, and can be written to disk as
packed bitmaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, UnsupportedVersionError
from .filters import LpfParams, lpf
from .volume import Volume, as_volume, export_slice_png

MANIFEST_VERSION = 1

# threshold defaults used with Rician noise at 5/7/9% and with real CT data
DEFAULT_THRESHOLDS = {0.05: 0.01, 0.07: 0.03, 0.09: 0.05}
CT_THRESHOLD = 0.01


@dataclass(frozen=True)
class WeightedPair:
    index: int
    slice_a: np.ndarray
    slice_b: np.ndarray
    weights: np.ndarray  # uint8, 0 or 1

    @property
    def matched_fraction(self) -> float:
        return float(self.weights.mean())


def parse_threshold(th) -> float:
    if isinstance(th, str):
        th = float("inf") if th.strip().lower() in ("inf", "+inf", "infinity") else float(th)
    th = float(th)
    if math.isnan(th) or th < 0:
        raise ValueError(f"threshold must be >= 0, got {th}")
    return th


def threshold_residual(residual, th) -> np.ndarray:
    return (np.asarray(residual) <= parse_threshold(th)).astype(np.uint8)


def compute_weight_matrix(x_a, x_b, th, params: LpfParams = LpfParams()) -> np.ndarray:
    """Binary map of pixels where the two low-passed slices agree within ``th``."""
    x_a = np.asarray(x_a, dtype=np.float32)
    x_b = np.asarray(x_b, dtype=np.float32)
    if x_a.shape != x_b.shape:
        raise ValueError(f"slice shapes differ: {x_a.shape} vs {x_b.shape}")
    th = parse_threshold(th)
    return threshold_residual(np.abs(lpf(x_a, params) - lpf(x_b, params)), th)


def lpf_residuals(volume, params: LpfParams = LpfParams()) -> np.ndarray:
    """``|lpf(x_i) - lpf(x_{i+1})|`` for every consecutive pair, shape ``(N-1, H, W)``."""
    volume = as_volume(volume)
    filtered = [lpf(s, params) for s in volume.data]
    return np.stack([np.abs(filtered[i] - filtered[i + 1]) for i in range(volume.depth - 1)])


def build_training_set(volume, th, params: LpfParams = LpfParams()) -> list[WeightedPair]:
    """All ``N - 1`` consecutive pairs with their weight maps; each slice is filtered once."""
    volume = as_volume(volume)
    if volume.depth < 2:
        raise ValueError("need at least 2 slices to build pairs")
    th = parse_threshold(th)
    residuals = lpf_residuals(volume, params)
    return [
        WeightedPair(i, volume.data[i], volume.data[i + 1], threshold_residual(residuals[i], th))
        for i in range(volume.depth - 1)
    ]


def weight_diagnostics(
    volume,
    params: LpfParams = LpfParams(),
    th_candidates=(0.005, 0.01, 0.02, 0.04),
    out_dir=None,
    bins: int = 50,
    export_pairs=None,
) -> list[dict]:
    """Matched fractions and residual histograms for a sweep of thresholds.

    Meant for picking ``th`` by eye: when ``out_dir`` is given, the weight map
    of each pair in ``export_pairs`` (default: the middle pair) is written as
    a PNG per candidate threshold.
    """
    candidates = [parse_threshold(t) for t in th_candidates]
    if not candidates:
        raise ValueError("need at least one threshold candidate")
    volume = as_volume(volume)
    residuals = lpf_residuals(volume, params)
    top = float(residuals.max())
    counts, edges = np.histogram(residuals, bins=bins, range=(0.0, top if top > 0 else 1.0))
    if export_pairs is None:
        export_pairs = [(volume.depth - 1) // 2]
    rows = []
    for th in candidates:
        w = residuals <= th
        per_pair = w.mean(axis=(1, 2))
        row = {
            "th": th,
            "matched_fraction": float(w.mean()),
            "min_pair_fraction": float(per_pair.min()),
            "max_pair_fraction": float(per_pair.max()),
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        }
        if out_dir is not None:
            files = []
            for i in export_pairs:
                name = f"weights_th{_th_label(th)}_pair{i:03d}.png"
                export_slice_png(w[i].astype(np.float32), Path(out_dir) / name)
                files.append(name)
            row["png"] = files
        rows.append(row)
    return rows


def _th_label(th):
    return "inf" if math.isinf(th) else f"{th:g}"


def _th_json(th):
    return "inf" if math.isinf(th) else th


# --------------------------------------------------------------------------
# serialisation


def save_training_set(pairs, directory, th, params: LpfParams, volume_path=None) -> Path:
    """Write ``manifest.json`` and ``weights.bin`` into ``directory``.

    Each weight map is packed with :func:`numpy.packbits` in row-major order,
    most significant bit first, and padded to a whole number of bytes; maps are
    stored back to back in manifest order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not pairs:
        raise ValueError("empty training set")
    height, width = pairs[0].weights.shape
    nbytes = (height * width + 7) // 8
    blob = bytearray()
    entries = []
    for pair in pairs:
        packed = np.packbits(pair.weights.astype(bool).ravel(), bitorder="big")
        entries.append(
            {
                "index": pair.index,
                "slice_a": pair.index,
                "slice_b": pair.index + 1,
                "offset": len(blob),
                "matched_fraction": pair.matched_fraction,
            }
        )
        blob += packed.tobytes()
    manifest = {
        "version": MANIFEST_VERSION,
        "width": width,
        "height": height,
        "th": _th_json(parse_threshold(th)),
        "lpf": params.to_dict(),
        "bit_order": "msb-first",
        "bytes_per_map": nbytes,
        "weights_file": "weights.bin",
        "volume": str(volume_path) if volume_path is not None else None,
        "pairs": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (directory / "weights.bin").write_bytes(bytes(blob))
    return directory


def load_training_set(directory, volume: Volume | None = None):
    """Read a training-set directory. Returns ``(pairs, manifest)``.

    Slices come from ``volume`` or, if omitted, from the volume file recorded
    in the manifest.
    """
    from .volume import load_volume

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"unsupported version: {manifest.get('version')!r}")
    if volume is None:
        if not manifest.get("volume"):
            raise ValueError("manifest records no volume; pass one explicitly")
        volume = load_volume(manifest["volume"])
    volume = as_volume(volume)
    h, w = manifest["height"], manifest["width"]
    if (volume.height, volume.width) != (h, w):
        raise CorruptFileError("training set does not match the volume's slice size")
    nbytes = manifest["bytes_per_map"]
    blob = (directory / manifest["weights_file"]).read_bytes()
    if len(blob) != nbytes * len(manifest["pairs"]) or nbytes != (h * w + 7) // 8:
        raise CorruptFileError("corrupt training set: weight payload size mismatch")
    pairs = []
    for entry in manifest["pairs"]:
        i, off = entry["index"], entry["offset"]
        if not 0 <= i < volume.depth - 1:
            raise CorruptFileError(f"corrupt training set: pair index {i} out of range")
        bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off)
        weights = np.unpackbits(bits, count=h * w, bitorder="big").reshape(h, w)
        pairs.append(WeightedPair(i, volume.data[i], volume.data[i + 1], weights))
    return pairs, manifest
