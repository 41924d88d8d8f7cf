"""Compact 2-D U-Net denoiser written directly in numpy.

The network works on batches of single-channel slices. Internally tensors are
kept channels-last, ``(batch, height, width, channels)``, so a convolution
reduces to one matrix product per kernel tap.

Forward passes can record a tape that :func:`backward` replays in reverse to
produce exact parameter gradients. Adam with bias correction and the
step-halving learning-rate schedule live here as well, next to the checkpoint
reader/writer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, DivergedError, UnsupportedVersionError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``levels`` counts resolution levels, so ``levels=3`` pools twice and the
    input sides must be divisible by ``2 ** (levels - 1)``.
    ``activation="identity"`` turns every nonlinearity into a no-op; with
    ``levels=1`` (no pooling) the network is then an affine map.
    """

    levels: int = 3
    base_channels: int = 16
    kernel_size: int = 3
    activation: str = "leaky_relu"
    negative_slope: float = 0.1

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.activation not in ("leaky_relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def linear_mode(cls) -> "ModelConfig":
        """Single-level, 1x1-kernel, identity-activation network (exactly affine)."""
        return cls(levels=1, base_channels=1, kernel_size=1, activation="identity")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


def layer_shapes(config: ModelConfig) -> dict[str, tuple[int, int, int, int]]:
    """Kernel shapes ``(k, k, c_in, c_out)`` of every convolution, in forward order."""
    k = config.kernel_size
    ch = [config.base_channels * 2**level for level in range(config.levels)]
    shapes = {}
    c_in = 1
    for level in range(config.levels):
        shapes[f"enc{level}.conv0"] = (k, k, c_in, ch[level])
        shapes[f"enc{level}.conv1"] = (k, k, ch[level], ch[level])
        c_in = ch[level]
    for level in reversed(range(config.levels - 1)):
        shapes[f"dec{level}.up"] = (k, k, ch[level + 1], ch[level])
        shapes[f"dec{level}.conv0"] = (k, k, 2 * ch[level], ch[level])
        shapes[f"dec{level}.conv1"] = (k, k, ch[level], ch[level])
    shapes["head"] = (1, 1, ch[0], 1)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) + s[-1] for s in layer_shapes(config).values())


# --------------------------------------------------------------------------
# layer primitives (channels-last)


def _pad_edge(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")


def _fold_edge_grad(g, p):
    """Adjoint of replicate padding: pile the halo gradients onto the border."""
    if p == 0:
        return g
    out = g[:, p:-p, p:-p, :].copy()
    rows = g[:, :, p:-p, :]
    out[:, 0] += rows[:, :p].sum(axis=1)
    out[:, -1] += rows[:, -p:].sum(axis=1)
    cols = g[:, :, :p, :].sum(axis=2)
    cols_r = g[:, :, -p:, :].sum(axis=2)
    # corner blocks of the halo belong to the corner pixels
    out[:, 0, 0] += cols[:, :p].sum(axis=1)
    out[:, -1, 0] += cols[:, -p:].sum(axis=1)
    out[:, 0, -1] += cols_r[:, :p].sum(axis=1)
    out[:, -1, -1] += cols_r[:, -p:].sum(axis=1)
    out[:, :, 0] += cols[:, p:-p]
    out[:, :, -1] += cols_r[:, p:-p]
    return out


def conv_forward(x, weight, bias):
    """Same-size convolution with replicate padding. Returns output and cache.

    The padded batch is flattened to ``(pixels, channels)``; a kernel tap at
    ``(i, j)`` is then a constant row offset into that matrix, so each tap is
    one matrix product on a contiguous slice. Rows whose window wraps across a
    padded row or batch boundary are computed and discarded.
    """
    k = weight.shape[0]
    n, h, w, c_in = x.shape
    c_out = weight.shape[-1]
    if k == 1:
        xf = x.reshape(-1, c_in)
        y = xf @ weight[0, 0]
        y += bias
        return y.reshape(n, h, w, c_out), (xf, x.shape)
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    xf = _pad_edge(x, p).reshape(-1, c_in)
    rows = xf.shape[0] - (k - 1) * (wp + 1)
    y = np.zeros((xf.shape[0], c_out), dtype=x.dtype)
    acc = y[:rows]
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            acc += xf[off : off + rows] @ weight[i, j]
    y = y.reshape(n, hp, wp, c_out)[:, :h, :w, :]
    y += bias
    return np.ascontiguousarray(y), (xf, x.shape)


def conv_backward(dy, cache, weight):
    xf, x_shape = cache
    n, h, w, c_in = x_shape
    k = weight.shape[0]
    c_out = weight.shape[-1]
    if dy.shape != (n, h, w, c_out):
        raise ValueError("output gradient shape does not match forward output")
    db = dy.sum(axis=(0, 1, 2))
    if k == 1:
        dy2 = dy.reshape(-1, c_out)
        dw = (xf.T @ dy2)[None, None]
        return (dy2 @ weight[0, 0].T).reshape(x_shape), dw, db
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    dyf = np.zeros((n, hp, wp, c_out), dtype=dy.dtype)
    dyf[:, :h, :w, :] = dy
    rows = xf.shape[0] - (k - 1) * (wp + 1)
    dyf = dyf.reshape(-1, c_out)[:rows]
    dw = np.empty_like(weight)
    dxf = np.zeros_like(xf)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            dw[i, j] = xf[off : off + rows].T @ dyf
            dxf[off : off + rows] += dyf @ weight[i, j].T
    return _fold_edge_grad(dxf.reshape(n, hp, wp, c_in), p), dw, db


def maxpool_forward(x):
    n, h, w, c = x.shape
    blocks = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h // 2, w // 2, c, 4)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    return np.take_along_axis(blocks, idx, axis=-1)[..., 0], (idx, x.shape)


def maxpool_backward(dy, cache):
    idx, (n, h, w, c) = cache
    g = np.zeros(dy.shape + (4,), dtype=dy.dtype)
    np.put_along_axis(g, idx, dy[..., None], axis=-1)
    return (
        g.reshape(n, h // 2, w // 2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, h, w, c)
    )


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dy):
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# --------------------------------------------------------------------------


@dataclass
class DenoiserModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "DenoiserModel":
        return DenoiserModel(
            self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.seed
        )

    def copy(self) -> "DenoiserModel":
        return self.astype(self.dtype)

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def __call__(self, batch):
        return forward(self, batch)

    # ----------------------------------------------------------------------

    def _check_input(self, batch):
        x = np.asarray(batch, dtype=self.dtype)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3:
            raise ValueError("expected a slice (H, W) or a batch of slices (B, H, W)")
        d = self.config.divisor
        if x.shape[1] % d or x.shape[2] % d:
            raise ValueError(
                f"slice sides {x.shape[1:]} must be divisible by {d} "
                f"for a {self.config.levels}-level model"
            )
        return x, squeeze

    def _act(self, h):
        if self.config.activation == "identity":
            return h, None
        mask = h > 0
        return np.where(mask, h, h * h.dtype.type(self.config.negative_slope)), mask

    def run(self, batch, record=False):
        """Forward pass. With ``record=True`` also returns the tape for backward."""
        x, squeeze = self._check_input(batch)
        p = self.params
        tape = [] if record else None

        def conv(h, name):
            out, cache = conv_forward(h, p[name + ".weight"], p[name + ".bias"])
            if record:
                tape.append(("conv", name, cache))
            return out

        def act(h):
            out, mask = self._act(h)
            if record:
                tape.append(("act", None, mask))
            return out

        levels = self.config.levels
        h = x[..., None]
        skips = []
        for level in range(levels):
            h = act(conv(h, f"enc{level}.conv0"))
            h = act(conv(h, f"enc{level}.conv1"))
            if level < levels - 1:
                skips.append(h)
                if record:
                    tape.append(("skip", level, None))
                h, cache = maxpool_forward(h)
                if record:
                    tape.append(("pool", None, cache))
        for level in reversed(range(levels - 1)):
            h = upsample_forward(h)
            if record:
                tape.append(("up", None, None))
            h = act(conv(h, f"dec{level}.up"))
            split = h.shape[-1]
            h = np.concatenate([h, skips[level]], axis=-1)
            if record:
                tape.append(("concat", level, split))
            h = act(conv(h, f"dec{level}.conv0"))
            h = act(conv(h, f"dec{level}.conv1"))
        y = conv(h, "head")[..., 0]
        if squeeze:
            y = y[0]
        if record:
            return y, (tape, squeeze)
        return y

    def backprop(self, record, dy):
        tape, squeeze = record
        dy = np.asarray(dy, dtype=self.dtype)
        if squeeze:
            dy = dy[None]
        g = dy[..., None]
        grads = {}
        skip_grads = {}
        for kind, key, cache in reversed(tape):
            if kind == "conv":
                w = self.params[key + ".weight"]
                g, dw, db = conv_backward(g, cache, w)
                grads[key + ".weight"] = dw
                grads[key + ".bias"] = db
            elif kind == "act":
                if cache is not None:
                    g = np.where(cache, g, g * g.dtype.type(self.config.negative_slope))
            elif kind == "pool":
                g = maxpool_backward(g, cache)
            elif kind == "up":
                g = upsample_backward(g)
            elif kind == "concat":
                skip_grads[key] = g[..., cache:]
                g = g[..., :cache]
            elif kind == "skip":
                g = g + skip_grads.pop(key)
        return {name: grads[name] for name in self.params}


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> DenoiserModel:
    """He-style uniform initialisation scaled by fan-in; biases start at zero."""
    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1.0 + config.negative_slope**2))
    if config.activation == "identity":
        gain = 1.0
    params = {}
    for name, shape in layer_shapes(config).items():
        fan_in = shape[0] * shape[1] * shape[2]
        bound = gain * math.sqrt(3.0 / fan_in)
        params[name + ".weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name + ".bias"] = np.zeros(shape[-1], dtype=dtype)
    return DenoiserModel(config, params, seed)


def forward(model: DenoiserModel, batch) -> np.ndarray:
    """Denoise a slice ``(H, W)`` or batch ``(B, H, W)``; output has the input's shape."""
    return model.run(batch)


def backward(model: DenoiserModel, batch, output_gradient) -> dict[str, np.ndarray]:
    """Gradient of ``sum(output * output_gradient)`` with respect to every parameter."""
    y, record = model.run(batch, record=True)
    if np.shape(output_gradient) != y.shape:
        raise ValueError(
            f"output gradient shape {np.shape(output_gradient)} != output shape {y.shape}"
        )
    return model.backprop(record, output_gradient)


# --------------------------------------------------------------------------
# optimisation


def lr_schedule(epoch: int, base_lr: float = 1e-3, step: int = 20, factor: float = 0.5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * factor ** (epoch // step)


@dataclass
class AdamState:
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(state: AdamState, params: dict, grads: dict, lr: float | None = None):
    """One bias-corrected Adam update. ``params`` and ``state`` are updated in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"diverged: non-finite gradient for {name}")
    lr = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] -= update.astype(params[name].dtype, copy=False)
    return params, state


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: DenoiserModel, epoch: int = 0, optimizer: AdamState | None = None):
    """Write ``<path>`` (JSON metadata) and ``<path>.bin`` (little-endian float32 tensors).

    Tensors are stored back to back in the order listed under ``"tensors"``,
    each C-ordered.
    """
    path = Path(path)
    opt = optimizer or AdamState()
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "epoch": epoch,
        "optimizer": {
            "name": "adam",
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "lr": opt.lr,
            "t": opt.t,
        },
        "dtype": "f32le",
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    path.write_text(json.dumps(meta, indent=2) + "\n")
    with open(_payload_path(path), "wb") as fh:
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[DenoiserModel, dict]:
    path = Path(path)
    meta = json.loads(path.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported version: {meta.get('version')}")
    if meta.get("dtype") != "f32le":
        raise CorruptFileError(f"corrupt checkpoint: unknown dtype {meta.get('dtype')!r}")
    config = ModelConfig(**meta["config"])
    raw = _payload_path(path).read_bytes()
    expected = layer_shapes(config)
    params = {}
    offset = 0
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        if offset + 4 * n > len(raw):
            raise CorruptFileError("corrupt checkpoint: payload too short")
        params[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        )
        offset += 4 * n
    if offset != len(raw):
        raise CorruptFileError("corrupt checkpoint: trailing payload bytes")
    for name, shape in expected.items():
        if params.get(name + ".weight", np.empty(0)).shape != shape:
            raise CorruptFileError(f"corrupt checkpoint: bad tensor {name}.weight")
    return DenoiserModel(config, params, meta.get("seed", 0)), meta


def _payload_path(path: Path) -> Path:
    return path.with_name(path.name + ".bin")
