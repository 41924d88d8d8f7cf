"""PSNR / SSIM and per-volume mean +- std reporting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import as_volume


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


@dataclass(frozen=True)
class SsimParams:
    win_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


def _gaussian_window(size, sigma):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(x, g):
    # separable 'valid' correlation with the normalised gaussian
    x = ndimage.correlate1d(x, g, axis=0, mode="constant")
    x = ndimage.correlate1d(x, g, axis=1, mode="constant")
    r = len(g) // 2
    return x[r:-r or None, r:-r or None]


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < params.win_size:
        raise ValueError(f"slice {a.shape} smaller than the {params.win_size}x{params.win_size} window")
    g = _gaussian_window(params.win_size, params.sigma)
    mu_a = _local_mean(a, g)
    mu_b = _local_mean(b, g)
    var_a = _local_mean(a * a, g) - mu_a**2
    var_b = _local_mean(b * b, g) - mu_b**2
    cov = _local_mean(a * b, g) - mu_a * mu_b
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, params: SsimParams | None = None, data_range: float | None = None) -> float:
    """Mean SSIM over all fully contained 11x11 gaussian windows (sigma 1.5)."""
    params = params or SsimParams()
    if data_range is not None:
        params = SsimParams(params.win_size, params.sigma, params.k1, params.k2, data_range)
    return float(ssim_map(a, b, params).mean())


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    if np.any(np.isinf(v)):
        return math.inf, (0.0 if np.all(np.isinf(v)) else math.nan)
    return float(v.mean()), float(v.std())


@dataclass
class MetricsReport:
    """Per-slice PSNR (dB) and SSIM with population mean and std."""

    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    @property
    def psnr_mean(self):
        return _mean_std(self.psnr)[0]

    @property
    def psnr_std(self):
        return _mean_std(self.psnr)[1]

    @property
    def ssim_mean(self):
        return _mean_std(self.ssim)[0]

    @property
    def ssim_std(self):
        return _mean_std(self.ssim)[1]

    @property
    def ssim_percent(self):
        return [100.0 * s for s in self.ssim]

    def summary(self) -> str:
        return (
            f"PSNR {_fmt(self.psnr_mean)}±{_fmt(self.psnr_std)} (dB), "
            f"SSIM {_fmt(100 * self.ssim_mean)}±{_fmt(100 * self.ssim_std)} (%)"
        )

    def to_dict(self):
        return {
            "std": "population",
            "psnr": [_json_num(v) for v in self.psnr],
            "ssim": list(self.ssim),
            "ssim_percent": self.ssim_percent,
            "psnr_mean": _json_num(self.psnr_mean),
            "psnr_std": _json_num(self.psnr_std),
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
            "ssim_mean_percent": 100 * self.ssim_mean,
            "ssim_std_percent": 100 * self.ssim_std,
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# std: population\n")
            w = csv.writer(fh)
            w.writerow(["slice", "psnr", "ssim", "ssim_percent"])
            for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
                w.writerow([i, _csv_num(p), repr(s), repr(100 * s)])
            w.writerow(["mean", _csv_num(self.psnr_mean), repr(self.ssim_mean), repr(100 * self.ssim_mean)])
            w.writerow(["std", _csv_num(self.psnr_std), repr(self.ssim_std), repr(100 * self.ssim_std)])


def _fmt(v):
    return "inf" if math.isinf(v) else f"{v:.2f}"


def _json_num(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return v


def _csv_num(v):
    j = _json_num(v)
    return j if isinstance(j, str) else repr(float(v))


def evaluate_volume(pred, truth, data_range: float = 1.0) -> MetricsReport:
    pred = as_volume(pred)
    truth = as_volume(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    params = SsimParams(data_range=data_range)
    return MetricsReport(
        psnr=[psnr(p, t, data_range) for p, t in zip(pred.data, truth.data)],
        ssim=[ssim(p, t, params) for p, t in zip(pred.data, truth.data)],
    )
