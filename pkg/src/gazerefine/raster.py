"""Heatmap rasterisation, decoding and affine augmentation.

Heatmap grid convention: cell ``(r, c)`` has its centre at integer
``(c, r)`` and the screen corners sit on the corner cell centres, i.e. a
screen pixel maps to ``(col, row) = (px * (W-1) / width_px, py * (H-1) /
height_px)``. Every on-screen point therefore lands on the map. Points are
snapped to the nearest cell (round half up) before the Gaussian is placed,
so a freshly rasterised on-screen point always peaks at exactly 1.

Affine parameters act on normalised coordinates ``u = (px - w/2) / (w/2)``,
``v = (py - h/2) / (h/2)``; the same frame is used by the PT sampler, so the
screen rectangle is ``[-1, 1]^2`` in both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHeatmap
from .geometry import EVE_SCREEN, PoG, ScreenSpec

# cell coordinates are clipped to this magnitude before integer line drawing
_COORD_LIMIT = 1 << 20


@dataclass(frozen=True)
class HeatmapGrid:
    """Mapping between screen coordinates and an ``H x W`` heatmap."""

    screen: ScreenSpec = EVE_SCREEN
    height: int = 72
    width: int = 128
    sigma: float = 1.5  # Gaussian std, in cells

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("heatmap dimensions must be at least 2")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def cell_pitch_cm(self) -> tuple[float, float]:
        return self.screen.width_cm / (self.width - 1), self.screen.height_cm / (self.height - 1)

    def cm_to_cells(self, xy_cm) -> np.ndarray:
        """Continuous ``(col, row)`` coordinates for points in cm."""
        xy = np.asarray(xy_cm, dtype=float)
        s = self.screen
        return xy * np.array([(self.width - 1) / s.width_cm, (self.height - 1) / s.height_cm])

    def px_to_cells(self, xy_px) -> np.ndarray:
        xy = np.asarray(xy_px, dtype=float)
        s = self.screen
        return xy * np.array([(self.width - 1) / s.width_px, (self.height - 1) / s.height_px])

    def cells_to_cm(self, colrow) -> np.ndarray:
        cr = np.asarray(colrow, dtype=float)
        s = self.screen
        px = cr * np.array([s.width_px / (self.width - 1), s.height_px / (self.height - 1)])
        return s.px_to_cm(px)

    def snap(self, xy_cm) -> np.ndarray:
        """Nearest cell ``(col, row)`` as int64, round half up."""
        cells = np.floor(self.cm_to_cells(xy_cm) + 0.5)
        cells = np.nan_to_num(cells, nan=-_COORD_LIMIT, posinf=_COORD_LIMIT, neginf=-_COORD_LIMIT)
        return np.clip(cells, -_COORD_LIMIT, _COORD_LIMIT).astype(np.int64)


def _gauss_1d(n: int, centers, sigma: float) -> np.ndarray:
    """``exp(-(i - c)^2 / (2 sigma^2))`` for ``i in range(n)``; one row per centre."""
    c = np.asarray(centers, dtype=float).reshape(-1, 1)
    d = np.arange(n, dtype=float)[None, :] - c
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def rasterize_point(p, grid: HeatmapGrid = HeatmapGrid()) -> np.ndarray:
    """Peak-normalised isotropic Gaussian at the cell nearest to ``p``.

    ``p`` is a :class:`PoG` (cm or px) or an ``(x, y)`` pair in cm.
    """
    return rasterize_points(np.atleast_2d(_as_cm(p, grid.screen)), grid)[0]


def rasterize_points(points_cm, grid: HeatmapGrid = HeatmapGrid()) -> np.ndarray:
    """Batch version of :func:`rasterize_point`; returns ``(n, H, W)``."""
    cells = grid.snap(np.asarray(points_cm, dtype=float).reshape(-1, 2))
    gx = _gauss_1d(grid.width, cells[:, 0], grid.sigma)
    gy = _gauss_1d(grid.height, cells[:, 1], grid.sigma)
    return gy[:, :, None] * gx[:, None, :]


def _as_cm(p, screen: ScreenSpec) -> np.ndarray:
    if isinstance(p, PoG):
        xy = p.as_array()
        return screen.px_to_cm(xy) if p.unit == "px" else xy
    return np.asarray(p, dtype=float)


def _major_axis_cells(a0, b0, a1, b1, n_major, n_minor):
    """Cells of digital lines whose major axis is ``a`` (|da| >= |db|).

    The minor coordinate at each integer major coordinate is
    ``floor(b(a) + 1/2)`` of the ideal line, evaluated in exact integer
    arithmetic. Only the part of each line inside the grid is generated.
    """
    flip = a0 > a1
    a0, a1 = np.where(flip, a1, a0), np.where(flip, a0, a1)
    b0, b1 = np.where(flip, b1, b0), np.where(flip, b0, b1)
    da = a1 - a0
    db = b1 - b0
    lo = np.maximum(a0, 0)
    hi = np.minimum(a1, n_major - 1)
    counts = np.maximum(hi - lo + 1, 0)
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    seg = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    a = lo[seg] + (np.arange(total) - starts[seg])
    da_s = da[seg]
    safe = np.where(da_s == 0, 1, da_s)
    b = b0[seg] + np.where(da_s == 0, 0, (2 * (a - a0[seg]) * db[seg] + safe) // (2 * safe))
    keep = (b >= 0) & (b < n_minor)
    return a[keep], b[keep]


def draw_segments(canvas: np.ndarray, start_cells, end_cells) -> np.ndarray:
    """Set to 1 every cell on the digital segments ``start -> end`` (in place)."""
    h, w = canvas.shape
    s = np.asarray(start_cells, dtype=np.int64).reshape(-1, 2)
    e = np.asarray(end_cells, dtype=np.int64).reshape(-1, 2)
    if len(s) == 0:
        return canvas
    x_major = np.abs(e[:, 0] - s[:, 0]) >= np.abs(e[:, 1] - s[:, 1])
    xm, ym = x_major, ~x_major
    cols, rows = _major_axis_cells(s[xm, 0], s[xm, 1], e[xm, 0], e[xm, 1], w, h)
    canvas[rows, cols] = 1.0
    rows, cols = _major_axis_cells(s[ym, 1], s[ym, 0], e[ym, 1], e[ym, 0], h, w)
    canvas[rows, cols] = 1.0
    return canvas


def draw_history(points_cm, valid, grid: HeatmapGrid, rng: np.random.Generator, order=None) -> np.ndarray:
    """Pre-blur binary canvas of the history trajectory.

    Valid points are visited in a random order (a random start, then random
    picks from the rest); each is plotted and joined to its predecessor by a
    digital segment. ``order`` overrides the random visit order and must be
    a permutation of the valid points' positions within ``points_cm``.
    """
    canvas = np.zeros(grid.shape)
    pts = np.asarray(points_cm, dtype=float).reshape(-1, 2)
    if valid is None:
        idx = np.arange(len(pts))
    else:
        idx = np.flatnonzero(np.asarray(valid).astype(bool))
    idx = idx[np.all(np.isfinite(pts[idx]), axis=1)]
    if len(idx) == 0:
        return canvas
    if order is None:
        order = idx[rng.permutation(len(idx))]
    cells = grid.snap(pts[np.asarray(order)])
    inside = (cells[:, 0] >= 0) & (cells[:, 0] < grid.width) & (cells[:, 1] >= 0) & (cells[:, 1] < grid.height)
    canvas[cells[inside, 1], cells[inside, 0]] = 1.0
    if len(cells) > 1:
        draw_segments(canvas, cells[:-1], cells[1:])
    return canvas


def blur(canvas: np.ndarray, sigma: float) -> np.ndarray:
    """Exact (untruncated) Gaussian blur with zero padding, peak-normalised."""
    h, w = canvas.shape
    kr = _gauss_1d(h, np.arange(h), sigma)
    kc = _gauss_1d(w, np.arange(w), sigma)
    out = kr @ canvas @ kc
    peak = out.max()
    if peak > 0:
        out /= peak
    return out


def rasterize_history(points_cm, valid, grid: HeatmapGrid = HeatmapGrid(), rng=None, order=None) -> np.ndarray:
    """History heatmap: trajectory through the valid points, blurred.

    An empty valid set yields an all-zero map. A single valid point yields
    exactly :func:`rasterize_point` of that point.
    """
    if rng is None:
        rng = np.random.default_rng()
    canvas = draw_history(points_cm, valid, grid, rng, order=order)
    if not canvas.any():
        return canvas
    return blur(canvas, grid.sigma)


def softmax(h: np.ndarray) -> np.ndarray:
    e = np.exp(h - h.max(axis=(-2, -1), keepdims=True))
    return e / e.sum(axis=(-2, -1), keepdims=True)


def decode(h: np.ndarray, grid: HeatmapGrid = HeatmapGrid()) -> PoG:
    """Softmax, argmax, and map the winning cell centre back to cm.

    Ties go to the smallest ``(row, col)``. Softmax is monotone, so the
    argmax is taken on the map itself; faint maps (a point far off the grid
    leaves only a tail of order 1e-30) would otherwise round to a flat
    distribution.
    """
    xy = decode_batch(np.asarray(h)[None], grid)[0]
    return PoG(float(xy[0]), float(xy[1]), "cm")


def decode_batch(hs: np.ndarray, grid: HeatmapGrid = HeatmapGrid()) -> np.ndarray:
    """Decode ``(n, H, W)`` heatmaps to an ``(n, 2)`` array of cm."""
    hs = np.asarray(hs, dtype=float)
    n = hs.shape[0]
    flat = hs.reshape(n, -1)
    if np.any(flat.max(axis=1) == flat.min(axis=1)):
        raise DegenerateHeatmap("cannot decode a constant heatmap")
    idx = np.argmax(flat, axis=1)
    rows, cols = np.divmod(idx, grid.width)
    return grid.cells_to_cm(np.column_stack([cols, rows]))


def degenerate_mask(hs: np.ndarray) -> np.ndarray:
    flat = np.asarray(hs).reshape(len(hs), -1)
    return flat.max(axis=1) == flat.min(axis=1)


def write_pgm(h: np.ndarray, path) -> None:
    """Binary PGM (P5), maxval 255, row-major."""
    h = np.asarray(h, dtype=float)
    data = np.clip(np.rint(h * 255.0), 0, 255).astype(np.uint8)
    rows, cols = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(data.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: rows * cols], dtype=np.uint8).reshape(rows, cols)
    return data / float(maxval)


# ---------------------------------------------------------------------------
# affine augmentation


class AffineParams:
    """2x3 affine ``[a b tx; c d ty]`` on normalised screen coordinates."""

    __slots__ = ("theta",)

    def __init__(self, theta):
        theta = np.array(theta, dtype=float).reshape(2, 3)
        if not np.all(np.isfinite(theta)):
            raise ValueError("affine parameters must be finite")
        theta.setflags(write=False)
        self.theta = theta

    @classmethod
    def identity(cls) -> AffineParams:
        return cls([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    @classmethod
    def from_pixel_matrix(cls, m, screen: ScreenSpec = EVE_SCREEN) -> AffineParams:
        """Convert a 2x3 affine acting on raw pixel coordinates."""
        m = np.asarray(m, dtype=float).reshape(2, 3)
        d = np.array([screen.width_px / 2.0, screen.height_px / 2.0])
        lin = m[:, :2] * (d[None, :] / d[:, None])
        t = (m[:, :2] @ d + m[:, 2] - d) / d
        return cls(np.column_stack([lin, t]))

    @classmethod
    def from_components(cls, scale=(1.0, 1.0), rotation_deg=0.0, shear=0.0, translation_frac=(0.0, 0.0),
                        screen: ScreenSpec = EVE_SCREEN) -> AffineParams:
        """Compose ``R(rot) @ [[1, shear], [0, 1]] @ diag(scale)`` about the screen centre.

        The linear part is built in pixel-isotropic space so a rotation is
        rigid on screen; the translation is a fraction of each screen side.
        """
        phi = math.radians(rotation_deg)
        rot = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
        lin_px = rot @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag(scale)
        d = np.array([screen.width_px / 2.0, screen.height_px / 2.0])
        lin = lin_px * (d[None, :] / d[:, None])
        t = 2.0 * np.asarray(translation_frac, dtype=float)
        return cls(np.column_stack([lin, t]))

    @property
    def linear(self) -> np.ndarray:
        return self.theta[:, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.theta[:, 2]

    def to_pixel_matrix(self, screen: ScreenSpec = EVE_SCREEN) -> np.ndarray:
        d = np.array([screen.width_px / 2.0, screen.height_px / 2.0])
        lin_px = self.linear * (d[:, None] / d[None, :])
        t = d * self.offset + d - lin_px @ d
        return np.column_stack([lin_px, t])

    def apply_normalized(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return uv @ self.linear.T + self.offset

    def inverse(self) -> AffineParams:
        inv = np.linalg.inv(self.linear)
        return AffineParams(np.column_stack([inv, -inv @ self.offset]))

    def __eq__(self, other):
        return isinstance(other, AffineParams) and np.array_equal(self.theta, other.theta)

    def __repr__(self):
        return f"AffineParams({self.theta.tolist()!r})"


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for the person-difference augmentation.

    Scales are per axis; translation is a fraction of each screen side; the
    per-sample noise std is a fraction of the screen diagonal in pixels.
    """

    scale: tuple[float, float] = (0.7, 1.3)
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    shear: tuple[float, float] = (-0.2, 0.2)
    translation_frac: tuple[float, float] = (-0.2, 0.2)
    noise_frac_diag: float = 0.02

    def __post_init__(self):
        for name in ("scale", "rotation_deg", "shear", "translation_frac"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")
        if self.noise_frac_diag < 0:
            raise ValueError("noise_frac_diag must be non-negative")

    @classmethod
    def none(cls) -> AugmentConfig:
        return cls(scale=(1.0, 1.0), rotation_deg=(0.0, 0.0), shear=(0.0, 0.0),
                   translation_frac=(0.0, 0.0), noise_frac_diag=0.0)

    def noise_sigma_px(self, screen: ScreenSpec = EVE_SCREEN) -> float:
        return self.noise_frac_diag * screen.diagonal_px


def sample_affine(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                  screen: ScreenSpec = EVE_SCREEN) -> AffineParams:
    sx = rng.uniform(*cfg.scale)
    sy = rng.uniform(*cfg.scale)
    rot = rng.uniform(*cfg.rotation_deg)
    sh = rng.uniform(*cfg.shear)
    tx = rng.uniform(*cfg.translation_frac)
    ty = rng.uniform(*cfg.translation_frac)
    return AffineParams.from_components((sx, sy), rot, sh, (tx, ty), screen)


def sample_noise(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                 screen: ScreenSpec = EVE_SCREEN, n: int = 1) -> np.ndarray:
    """``(n, 2)`` i.i.d. isotropic Gaussian displacements in px."""
    sigma = cfg.noise_sigma_px(screen)
    if sigma == 0.0:
        return np.zeros((n, 2))
    return rng.normal(0.0, sigma, size=(n, 2))


def apply_affine_points(points_px, a: AffineParams, noise=None, screen: ScreenSpec = EVE_SCREEN) -> np.ndarray:
    """Apply one affine to a whole stream of pixel positions, then add noise."""
    pts = np.asarray(points_px, dtype=float).reshape(-1, 2)
    out = screen.from_normalized(a.apply_normalized(screen.to_normalized(pts)))
    if noise is not None:
        out = out + np.asarray(noise, dtype=float).reshape(-1, 2)
    return out


def augment_stream(g_cm, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                   screen: ScreenSpec = EVE_SCREEN, affine: AffineParams | None = None):
    """Distort a ground-truth stream in cm with one affine plus per-sample noise.

    Returns ``(augmented_cm, affine)``.
    """
    g = np.asarray(g_cm, dtype=float).reshape(-1, 2)
    if affine is None:
        affine = sample_affine(rng, cfg, screen)
    noise = sample_noise(rng, cfg, screen, len(g))
    out = apply_affine_points(screen.cm_to_px(g), affine, noise, screen)
    return screen.px_to_cm(out), affine
