"""Person-specific transform: a small spatial transformer in plain numpy.

Layout is NHWC throughout. Channel 0 of every input is the per-sample
heatmap, channel 1 the history heatmap. The localisation net is a stack of
3x3 stride-2 convolutions (zero padding 1, ReLU) followed by a fully
connected layer emitting the six affine parameters ``[a, b, tx, c, d, ty]``.
That last layer starts at zero weight with identity bias, so an untrained
model is an exact identity map.

The sampler reads the input at ``theta @ [u, v, 1]`` for every output cell
``(u, v)`` in normalised coordinates (see :mod:`gazerefine.raster`), with
bilinear interpolation and zeros outside the map.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EmptyDataset, MissingCheckpoint
from .raster import HeatmapGrid, decode_batch

EPS = 1e-7
IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PtArch:
    height: int = 72
    width: int = 128
    in_channels: int = 2
    channels: tuple[int, ...] = (8, 16, 32, 32)
    head: str = "flatten"  # "flatten" or "avg" (global average pool)

    def __post_init__(self):
        if self.head not in ("flatten", "avg"):
            raise ConfigError(f"unknown head {self.head!r}")
        if not self.channels:
            raise ConfigError("localisation net needs at least one conv stage")

    def stage_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        h, w = self.height, self.width
        for _ in self.channels:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            shapes.append((h, w))
        return shapes

    @property
    def feature_size(self) -> int:
        if self.head == "avg":
            return self.channels[-1]
        h, w = self.stage_shapes()[-1]
        return h * w * self.channels[-1]


@dataclass
class PtTrainConfig:
    """Optimiser and data-synthesis settings for PT training.

    Large-scale runs use batch 3200 and history lengths (4000, 8000); the
    defaults here are sized for a single CPU.
    """

    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    history_lengths: tuple[int, ...] = (500, 2000)
    seed: int = 0
    clip_norm: float = 2.0  # global gradient-norm cap; 0 disables

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("epochs must be an integer >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.history_lengths or min(self.history_lengths) < 1:
            raise ConfigError("history_lengths must be positive")
        if not self.clip_norm >= 0:
            raise ConfigError("clip_norm must be >= 0")


class PtModel:
    def __init__(self, arch: PtArch = PtArch(), params: dict | None = None, rng=None):
        self.arch = arch
        if params is None:
            params = init_params(arch, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.arch.channels)):
            names += [f"conv{i}.w", f"conv{i}.b"]
        return names + ["fc.w", "fc.b"]

    def copy(self) -> PtModel:
        return PtModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def theta(self, x: np.ndarray) -> np.ndarray:
        """Affine parameters ``(N, 2, 3)`` for inputs ``(N, H, W, 2)``."""
        theta, _ = localize(self.params, self.arch, x)
        return theta.reshape(-1, 2, 3)


def init_params(arch: PtArch, rng: np.random.Generator) -> dict:
    params = {}
    cin = arch.in_channels
    for i, cout in enumerate(arch.channels):
        std = math.sqrt(2.0 / (cin * 9))
        params[f"conv{i}.w"] = rng.normal(0.0, std, size=(cout, cin, 3, 3))
        params[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    params["fc.w"] = np.zeros((6, arch.feature_size))
    params["fc.b"] = IDENTITY_THETA.copy()
    return params


# ---------------------------------------------------------------------------
# localisation net


def _im2col(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    n, h, w, c = x.shape
    ho, wo = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win[:, 0 : 2 * ho : 2, 0 : 2 * wo : 2]  # (n, ho, wo, c, 3, 3)
    return np.ascontiguousarray(cols).reshape(n * ho * wo, c * 9), (n, h, w, c, ho, wo)


def _col2im(dcols: np.ndarray, shape: tuple) -> np.ndarray:
    n, h, w, c, ho, wo = shape
    d = dcols.reshape(n, ho, wo, c, 3, 3)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki : ki + 2 * ho : 2, kj : kj + 2 * wo : 2, :] += d[..., ki, kj]
    return dxp[:, 1:-1, 1:-1, :]


def _flat_scale(shape) -> float:
    # keeps the flattened features at unit scale so the head and the bias
    # see comparable curvature under one learning rate
    return 1.0 / math.sqrt(shape[1] * shape[2] * shape[3])


def localize(params: dict, arch: PtArch, x: np.ndarray):
    """Forward through the localisation net. Returns ``(theta (N, 6), cache)``."""
    cache = []
    a = x
    for i in range(len(arch.channels)):
        wgt = params[f"conv{i}.w"]
        cols, shape = _im2col(a)
        z = cols @ wgt.reshape(wgt.shape[0], -1).T + params[f"conv{i}.b"]
        n, _, _, _, ho, wo = shape
        a = np.maximum(z, 0.0).reshape(n, ho, wo, wgt.shape[0])
        cache.append((cols, shape, z > 0))
    if arch.head == "avg":
        feat = a.mean(axis=(1, 2))
    else:
        feat = a.reshape(a.shape[0], -1) * _flat_scale(a.shape)
    theta = feat @ params["fc.w"].T + params["fc.b"]
    return theta, (cache, a.shape, feat)


def localize_backward(params: dict, arch: PtArch, cache, dtheta: np.ndarray) -> dict:
    convs, last_shape, feat = cache
    grads = {"fc.w": dtheta.T @ feat, "fc.b": dtheta.sum(axis=0)}
    dfeat = dtheta @ params["fc.w"]
    if arch.head == "avg":
        n, h, w, c = last_shape
        da = np.broadcast_to(dfeat[:, None, None, :] / (h * w), last_shape)
    else:
        da = dfeat.reshape(last_shape) * _flat_scale(last_shape)
    for i in reversed(range(len(arch.channels))):
        cols, shape, mask = convs[i]
        wgt = params[f"conv{i}.w"]
        dz = da.reshape(-1, wgt.shape[0]) * mask
        grads[f"conv{i}.w"] = (dz.T @ cols).reshape(wgt.shape)
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        if i > 0:
            da = _col2im(dz @ wgt.reshape(wgt.shape[0], -1), shape)
    return grads


# ---------------------------------------------------------------------------
# grid generator and sampler


def _half_extent(height: int, width: int) -> tuple[float, float]:
    """Centre (and half-size) of the map in cells; corner cells sit at +-1."""
    return (width - 1) / 2.0, (height - 1) / 2.0


def sampling_grid(theta: np.ndarray, height: int, width: int):
    """Source cell coordinates ``(src_col, src_row)``, each ``(N, H, W)``.

    Written so that the identity ``theta`` reproduces integer cell centres
    exactly.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1, 6)
    cx, cy = _half_extent(height, width)
    dx = (np.arange(width, dtype=float) - cx)[None, None, :]
    dy = (np.arange(height, dtype=float) - cy)[None, :, None]
    k1, k2 = cx / cy, cy / cx
    a, b, tx, c, d, ty = (theta[:, j, None, None] for j in range(6))
    src_x = a * dx + (b * k1) * dy + (cx + tx * cx)
    src_y = (c * k2) * dx + d * dy + (cy + ty * cy)
    return src_x, src_y


class _Bilinear:
    """Bilinear gather with zero padding; keeps what backward needs."""

    def __init__(self, src_x: np.ndarray, src_y: np.ndarray, height: int, width: int):
        x0 = np.floor(src_x)
        y0 = np.floor(src_y)
        self.wx = src_x - x0
        self.wy = src_y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        n = src_x.shape[0]
        base = (np.arange(n, dtype=np.int64) * height * width)[:, None, None]
        self.idx = []
        self.ok = []
        for oy in (0, 1):
            for ox in (0, 1):
                xi, yi = x0 + ox, y0 + oy
                ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
                self.idx.append(np.where(ok, base + yi * width + xi, 0))
                self.ok.append(ok)

    def corners(self, img: np.ndarray):
        """``img`` is ``(N, H, W)``; returns the four corner values, zero outside."""
        flat = img.reshape(-1)
        return [np.where(ok, flat[idx], 0.0) for idx, ok in zip(self.idx, self.ok)]

    def sample(self, img: np.ndarray) -> np.ndarray:
        v00, v01, v10, v11 = self.corners(img)
        wx, wy = self.wx, self.wy
        return (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

    def coord_grads(self, img: np.ndarray):
        """Partial derivatives of the sampled value w.r.t. ``src_x`` and ``src_y``."""
        v00, v01, v10, v11 = self.corners(img)
        wx, wy = self.wx, self.wy
        gx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        gy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        return gx, gy


def warp(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Warp every channel of ``x`` ``(N, H, W, C)`` with per-sample ``theta``."""
    x = np.asarray(x, dtype=float)
    n, h, w, c = x.shape
    src_x, src_y = sampling_grid(theta, h, w)
    bil = _Bilinear(src_x, src_y, h, w)
    return np.stack([bil.sample(x[..., k]) for k in range(c)], axis=-1)


def forward(model: PtModel, x: np.ndarray):
    """Run the transformer on ``(N, H, W, 2)`` (or a single ``(H, W, 2)``).

    Returns ``(theta (N, 2, 3), output (N, H, W, 2))``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 3
    if single:
        x = x[None]
    theta, _ = localize(model.params, model.arch, x)
    out = warp(x, theta)
    theta = theta.reshape(-1, 2, 3)
    if single:
        return theta[0], out[0]
    return theta, out


# ---------------------------------------------------------------------------
# loss


def bce_loss(target: np.ndarray, predicted: np.ndarray) -> float:
    """Mean binary cross-entropy over all cells (and samples)."""
    t = np.asarray(target, dtype=float)
    q = np.clip(np.asarray(predicted, dtype=float), EPS, 1.0 - EPS)
    return float(np.mean(-(t * np.log(q) + (1.0 - t) * np.log1p(-q))))


def _bce_per_sample(t: np.ndarray, q_raw: np.ndarray):
    q = np.clip(q_raw, EPS, 1.0 - EPS)
    cells = t.shape[1] * t.shape[2]
    loss = -(t * np.log(q) + (1.0 - t) * np.log1p(-q)).reshape(len(t), -1).sum(axis=1) / cells
    inside = (q_raw > EPS) & (q_raw < 1.0 - EPS)
    dq = np.where(inside, (q - t) / (q * (1.0 - q)), 0.0) / cells
    return loss, dq


def loss_and_grad(model: PtModel, x: np.ndarray, target: np.ndarray):
    """Batch-mean history-channel BCE and its gradient for every parameter.

    ``x`` is ``(N, H, W, 2)``, ``target`` the clean history maps ``(N, H, W)``.
    The per-sample channel is warped at inference but never supervised.
    """
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    n, h, w, _ = x.shape
    theta, cache = localize(model.params, model.arch, x)
    src_x, src_y = sampling_grid(theta, h, w)
    bil = _Bilinear(src_x, src_y, h, w)
    hist = x[..., 1]
    q = bil.sample(hist)
    losses, dq = _bce_per_sample(target, q)
    dq /= n
    gx, gy = bil.coord_grads(hist)
    gsx = (dq * gx).reshape(n, -1)
    gsy = (dq * gy).reshape(n, -1)
    cx, cy = _half_extent(h, w)
    dx = np.tile(np.arange(w, dtype=float) - cx, h)
    dy = np.repeat(np.arange(h, dtype=float) - cy, w)
    dtheta = np.column_stack([
        gsx @ dx,
        (gsx @ dy) * (cx / cy),
        gsx.sum(axis=1) * cx,
        (gsy @ dx) * (cy / cx),
        gsy @ dy,
        gsy.sum(axis=1) * cy,
    ])
    grads = localize_backward(model.params, model.arch, cache, dtheta)
    return float(losses.mean()), grads


def backward(model: PtModel, x: np.ndarray, target: np.ndarray) -> dict:
    """Gradient of :func:`loss_and_grad`'s loss for one sample or a batch."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x, target = x[None], np.asarray(target)[None]
    return loss_and_grad(model, x, target)[1]


def batch_loss(model: PtModel, x: np.ndarray, target: np.ndarray) -> float:
    _, out = forward(model, x)
    return bce_loss(target, out[..., 1])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PtModel
    loss_trace: list[float] = field(default_factory=list)


def train(inputs: np.ndarray, targets: np.ndarray, cfg: PtTrainConfig, arch: PtArch | None = None,
          model: PtModel | None = None, log=None) -> TrainResult:
    """Minibatch SGD with momentum on the history-channel BCE.

    ``inputs`` ``(N, H, W, 2)`` and ``targets`` ``(N, H, W)`` may be float32;
    batches are promoted to float64. The shuffling order and initial weights
    derive from ``cfg.seed`` only, so the loss trace is reproducible.
    """
    n = len(inputs)
    if n == 0:
        raise EmptyDataset("PT training needs at least one sample")
    if len(targets) != n:
        raise ValueError("inputs and targets differ in length")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        h, w = inputs.shape[1:3]
        model = PtModel(arch or PtArch(height=h, width=w), rng=rng)
    else:
        model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = []
    for epoch in range(int(cfg.epochs)):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start : start + cfg.batch_size])
            xb = np.asarray(inputs[idx], dtype=float)
            tb = np.asarray(targets[idx], dtype=float)
            loss, grads = loss_and_grad(model, xb, tb)
            total += loss * len(idx)
            if cfg.clip_norm > 0:
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            for k, g in grads.items():
                v = velocity[k]
                v *= cfg.momentum
                v += g
                model.params[k] -= cfg.lr * v
        trace.append(total / n)
        if log is not None:
            log(epoch, trace[-1])
    return TrainResult(model, trace)


def infer_pog(model: PtModel, r_sample: np.ndarray, r_history: np.ndarray, grid: HeatmapGrid) -> np.ndarray:
    """Warp the (sample, history) pair and decode the warped sample channel.

    Accepts single maps ``(H, W)`` or batches ``(N, H, W)``; returns cm.
    Raises :class:`DegenerateHeatmap` if a warped sample map is constant.
    """
    rs = np.asarray(r_sample, dtype=float)
    rh = np.asarray(r_history, dtype=float)
    single = rs.ndim == 2
    if single:
        rs, rh = rs[None], rh[None]
    rh = np.broadcast_to(rh, rs.shape)
    _, out = forward(model, np.stack([rs, rh], axis=-1))
    xy = decode_batch(out[..., 0], grid)
    return xy[0] if single else xy


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(model: PtModel, path, meta: dict | None = None) -> None:
    """Write an ``.npz`` archive; layout documented in ``docs/checkpoint.md``."""
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "arch": np.array(json.dumps(_arch_dict(model.arch), sort_keys=True)),
        "meta": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name in model.param_names():
        arrays["param/" + name] = np.ascontiguousarray(model.params[name], dtype="<f8")
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[PtModel, dict]:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError as exc:
        raise MissingCheckpoint(f"checkpoint not found: {path}") from exc
    with data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        arch_d = json.loads(str(data["arch"]))
        arch_d["channels"] = tuple(arch_d["channels"])
        arch = PtArch(**arch_d)
        meta = json.loads(str(data["meta"]))
        params = {}
        model = PtModel(arch, params={})
        for name in model.param_names():
            params[name] = np.array(data["param/" + name], dtype=float)
        model.params = params
    expected = init_params(arch, np.random.default_rng(0))
    for k, v in expected.items():
        if model.params[k].shape != v.shape:
            raise ConfigError(f"checkpoint parameter {k} has shape {model.params[k].shape}, expected {v.shape}")
    return model, meta


def _arch_dict(arch: PtArch) -> dict:
    d = asdict(arch)
    d["channels"] = list(d["channels"])
    return d
