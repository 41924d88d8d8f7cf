"""Self-supervised losses, the training loop and whole-volume inference.

Per neighbouring pair ``(x_a, x_b)`` with weight map ``W`` the objective is::

    L = L_recon + lambda_rc * L_rc + lambda_ic * L_ic

    L_recon = (mmse(f(x_a), x_b) + mmse(f(x_b), x_a)) / 2
    L_rc    = mmse(f(x_a), f(x_b))
    L_ic    = mean((f((x_a + x_b) / 2) - (f(x_a) + f(x_b)) / 2) ** 2)

where ``mmse(p, q) = sum(W * (p - q)**2) / max(sum(W), 1)``. The three
network evaluations of a step run as one batch and share a single backward
pass.
"""

from __future__ import annotations

import csv
import json
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DivergedError
from .filters import LpfParams
from .model import AdamState, DenoiserModel, ModelConfig, adam_step, init_model, lr_schedule, save_checkpoint
from .pairing import WeightedPair, build_training_set, parse_threshold
from .volume import Volume, as_volume

ABLATIONS = {
    "no-w": "use_weights",
    "no-rc": "use_rc",
    "no-ic": "use_ic",
}


@dataclass(frozen=True)
class TrainConfig:
    lambda_rc: float = 0.5
    lambda_ic: float = 1.0
    epochs: int = 100
    th: float = 0.01
    batch_size: int = 1
    seed: int = 0
    use_weights: bool = True
    use_rc: bool = True
    use_ic: bool = True
    deterministic: bool = True
    base_lr: float = 1e-3
    lr_step: int = 20
    lr_factor: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 20

    def __post_init__(self):
        object.__setattr__(self, "th", parse_threshold(self.th))
        if self.lambda_rc < 0 or self.lambda_ic < 0:
            raise ValueError("loss weights must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def ablate(self, *names) -> "TrainConfig":
        """Switch off components by name: ``no-w``, ``no-rc``, ``no-ic``."""
        changes = {}
        for name in names:
            if name not in ABLATIONS:
                raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
            changes[ABLATIONS[name]] = False
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        if math.isinf(self.th):
            d["th"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# losses


class LossParts(NamedTuple):
    recon: float
    rc: float
    ic: float


def masked_mse(p, q, weights) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not p.shape == q.shape == w.shape:
        raise ValueError(f"shape mismatch: {p.shape}, {q.shape}, {w.shape}")
    return float(np.sum(w * (p - q) ** 2) / max(w.sum(), 1.0))


def recon_loss(f_a, f_b, x_a, x_b, weights) -> float:
    """Cross reconstruction: ``f(x_a)`` is scored against ``x_b`` and vice versa."""
    return 0.5 * (masked_mse(f_a, x_b, weights) + masked_mse(f_b, x_a, weights))


def rc_loss(f_a, f_b, weights) -> float:
    return masked_mse(f_a, f_b, weights)


def ic_loss(model: DenoiserModel, x_a, x_b) -> float:
    x_a = np.asarray(x_a, dtype=model.dtype)
    x_b = np.asarray(x_b, dtype=model.dtype)
    if x_a.shape != x_b.shape:
        raise ValueError(f"shape mismatch: {x_a.shape} vs {x_b.shape}")
    f = model.run(np.stack([x_a, x_b, (x_a + x_b) / 2]))
    r = f[2].astype(np.float64) - (f[0].astype(np.float64) + f[1]) / 2
    return float(np.mean(r**2))


def total_loss(parts: LossParts, config: TrainConfig = TrainConfig()) -> float:
    total = parts.recon
    if config.use_rc:
        total += config.lambda_rc * parts.rc
    if config.use_ic:
        total += config.lambda_ic * parts.ic
    return total


def pair_loss_and_grads(model: DenoiserModel, pairs, config: TrainConfig):
    """Mean objective over ``pairs`` and its parameter gradients.

    ``pairs`` is a sequence of ``(x_a, x_b, W)``. Returns ``(total, parts, grads)``.
    """
    dt = model.dtype
    xa = np.stack([np.asarray(p[0], dtype=dt) for p in pairs])
    xb = np.stack([np.asarray(p[1], dtype=dt) for p in pairs])
    if config.use_weights:
        w = np.stack([np.asarray(p[2], dtype=dt) for p in pairs])
    else:
        w = np.ones_like(xa)
    n = len(pairs)
    batch = [xa, xb]
    if config.use_ic:
        batch.append((xa + xb) / 2)
    y, record = model.run(np.concatenate(batch), record=True)
    fa, fb = y[:n], y[n : 2 * n]

    norm = np.maximum(w.sum(axis=(1, 2)), 1.0)[:, None, None].astype(dt)
    ra = fa - xb
    rb = fb - xa
    rd = fa - fb
    recon = 0.5 * (np.sum(w * ra * ra, axis=(1, 2)) + np.sum(w * rb * rb, axis=(1, 2))) / norm[:, 0, 0]
    rc = np.sum(w * rd * rd, axis=(1, 2)) / norm[:, 0, 0]
    # d/df of the batch mean
    ga = w * ra / norm / n
    gb = w * rb / norm / n
    if config.use_rc:
        lam = 2 * config.lambda_rc
        ga = ga + lam * w * rd / norm / n
        gb = gb - lam * w * rd / norm / n
    grads_out = [ga, gb]
    ic = np.zeros(n)
    if config.use_ic:
        fm = y[2 * n :]
        ri = fm - (fa + fb) / 2
        pixels = ri.shape[1] * ri.shape[2]
        ic = np.mean(ri.astype(np.float64) ** 2, axis=(1, 2))
        gi = config.lambda_ic * 2 * ri / pixels / n
        grads_out[0] = grads_out[0] - gi / 2
        grads_out[1] = grads_out[1] - gi / 2
        grads_out.append(gi)
    parts = LossParts(float(np.mean(recon)), float(np.mean(rc)), float(np.mean(ic)))
    total = total_loss(parts, config)
    if not math.isfinite(total):
        raise DivergedError("diverged: non-finite loss")
    grads = model.backprop(record, np.concatenate(grads_out).astype(dt))
    return total, parts, grads


# --------------------------------------------------------------------------
# history


HISTORY_COLUMNS = ("epoch", "lr", "loss_total", "loss_recon", "loss_rc", "loss_ic", "psnr", "seconds")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        return [r[name] for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([_cell(r.get(c)) for c in HISTORY_COLUMNS])

    def write_json(self, path):
        rows = [{c: _jsonable(r.get(c)) for c in HISTORY_COLUMNS} for r in self.records]
        Path(path).write_text(json.dumps(rows, indent=2) + "\n")

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {}
                for c in HISTORY_COLUMNS:
                    v = row.get(c, "")
                    rec[c] = None if v == "" else (int(v) if c == "epoch" else float(v))
                records.append(rec)
        return cls(records)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return v


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


# --------------------------------------------------------------------------
# loops


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


def train(
    volume,
    train_config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    lpf_params: LpfParams = LpfParams(),
    *,
    clean=None,
    pairs: list[WeightedPair] | None = None,
    checkpoint_dir=None,
    progress=None,
):
    """Train a denoiser on one noisy volume. Returns ``(model, history)``.

    ``clean`` enables a per-epoch PSNR column; ``pairs`` reuses a prebuilt
    training set instead of recomputing the weight maps. ``progress`` is
    called with each finished epoch record.
    """
    volume = as_volume(volume)
    cfg = train_config
    d = model_config.divisor
    if volume.height % d or volume.width % d:
        raise ValueError(f"slice sides {volume.height}x{volume.width} must be divisible by {d}")
    if pairs is None:
        pairs = build_training_set(volume, cfg.th, lpf_params)
    if clean is not None:
        clean = as_volume(clean)
        if clean.shape != volume.shape:
            raise ValueError("clean volume shape differs from the noisy volume")

    model = init_model(model_config, cfg.seed)
    opt = AdamState.for_params(
        model.params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, lr=cfg.base_lr
    )
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    items = [(p.slice_a, p.slice_b, p.weights) for p in pairs]

    with _single_thread() if cfg.deterministic else nullcontext():
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_step, cfg.lr_factor)
            order = rng.permutation(len(items))
            sums = np.zeros(4)
            steps = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                try:
                    total, parts, grads = pair_loss_and_grads(model, [items[i] for i in idx], cfg)
                    adam_step(opt, model.params, grads, lr)
                except DivergedError as exc:
                    raise DivergedError(
                        f"diverged at epoch {epoch + 1}, pair {pairs[idx[0]].index}: {exc}"
                    ) from None
                sums += (total, *parts)
                steps += 1
            means = sums / steps
            record = {
                "epoch": epoch + 1,
                "lr": lr,
                "loss_total": float(means[0]),
                "loss_recon": float(means[1]),
                "loss_rc": float(means[2]),
                "loss_ic": float(means[3]),
                "psnr": None,
                "seconds": None,
            }
            if clean is not None:
                from .metrics import evaluate_volume

                record["psnr"] = evaluate_volume(denoise_volume(model, volume), clean).psnr_mean
            # wall-clock time is not reproducible, so deterministic runs log 0
            record["seconds"] = 0.0 if cfg.deterministic else time.perf_counter() - t0
            history.records.append(record)
            if checkpoint_dir is not None and cfg.checkpoint_every and (
                (epoch + 1) % cfg.checkpoint_every == 0
            ):
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(
                    Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1:03d}.json",
                    model,
                    epoch=epoch + 1,
                    optimizer=opt,
                )
            if progress is not None:
                progress(record)
    return model, history


def denoise_volume(model: DenoiserModel, volume, batch_size: int = 8) -> Volume:
    """Run every slice through the model independently and clamp to ``[0, 1]``."""
    volume = as_volume(volume)
    out = np.empty(volume.shape, dtype=np.float32)
    for start in range(0, volume.depth, batch_size):
        out[start : start + batch_size] = model.run(volume.data[start : start + batch_size])
    return volume.with_data(np.clip(out, 0.0, 1.0))
