"""Screen-frame geometry.

The screen is the z=0 plane. The origin sits at the top-left corner of the
display, x grows rightward and y downward (both in cm, matching pixel
order), and the viewer is on the negative-z side. Gaze origins are assumed
to be already expressed in this frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DegenerateRay, RayBackward, RayParallel, UnitMismatch

Unit = Literal["cm", "px"]


@dataclass(frozen=True)
class ScreenSpec:
    width_cm: float = 55.3
    height_cm: float = 31.1
    width_px: int = 1920
    height_px: int = 1080

    def __post_init__(self):
        if not (self.width_cm > 0 and self.height_cm > 0):
            raise ValueError("screen size in cm must be positive")
        if int(self.width_px) != self.width_px or int(self.height_px) != self.height_px:
            raise ValueError("pixel dimensions must be integers")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("pixel dimensions must be >= 1")

    @property
    def px_per_cm(self) -> tuple[float, float]:
        return self.width_px / self.width_cm, self.height_px / self.height_cm

    @property
    def center_cm(self) -> np.ndarray:
        return np.array([self.width_cm / 2.0, self.height_cm / 2.0])

    @property
    def diagonal_px(self) -> float:
        return math.hypot(self.width_px, self.height_px)

    def cm_to_px(self, xy):
        """Vectorised cm -> px on an ``(..., 2)`` array."""
        xy = np.asarray(xy, dtype=float)
        return xy * np.array([self.width_px / self.width_cm, self.height_px / self.height_cm])

    def px_to_cm(self, xy):
        xy = np.asarray(xy, dtype=float)
        return xy * np.array([self.width_cm / self.width_px, self.height_cm / self.height_px])

    def on_screen(self, xy_cm):
        """Boolean mask of points inside the closed screen rectangle."""
        xy = np.asarray(xy_cm, dtype=float)
        return (
            (xy[..., 0] >= 0.0)
            & (xy[..., 0] <= self.width_cm)
            & (xy[..., 1] >= 0.0)
            & (xy[..., 1] <= self.height_cm)
        )

    def to_normalized(self, xy_px):
        """Pixel coordinates -> [-1, 1]^2 about the screen centre."""
        xy = np.asarray(xy_px, dtype=float)
        half = np.array([self.width_px / 2.0, self.height_px / 2.0])
        return (xy - half) / half

    def from_normalized(self, uv):
        uv = np.asarray(uv, dtype=float)
        half = np.array([self.width_px / 2.0, self.height_px / 2.0])
        return uv * half + half


EVE_SCREEN = ScreenSpec()


@dataclass(frozen=True)
class GazeDirection:
    """Unit 3-vector; the constructor normalises whatever it is given."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if not math.isfinite(n) or n == 0.0:
            raise ValueError("gaze direction must be a finite non-zero vector")
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    @classmethod
    def from_array(cls, v) -> GazeDirection:
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class GazeOrigin:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError("gaze origin must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class PoG:
    x: float
    y: float
    unit: Unit = "cm"

    def __post_init__(self):
        if self.unit not in ("cm", "px"):
            raise ValueError(f"unknown unit {self.unit!r}")

    def _check(self, other: PoG):
        if self.unit != other.unit:
            raise UnitMismatch(f"cannot combine {self.unit} with {other.unit}")

    def __add__(self, other: PoG) -> PoG:
        self._check(other)
        return PoG(self.x + other.x, self.y + other.y, self.unit)

    def __sub__(self, other: PoG) -> PoG:
        self._check(other)
        return PoG(self.x - other.x, self.y - other.y, self.unit)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


def direction_to_pog(d: GazeDirection, o: GazeOrigin, screen: ScreenSpec = EVE_SCREEN) -> PoG:
    """Intersect the ray ``o + t*d`` with the screen plane.

    Off-screen intersections are returned as-is; only rays that never reach
    the plane in front of the origin raise.
    """
    if abs(d.z) <= 1e-12:
        raise RayParallel("gaze ray is parallel to the screen plane")
    t = -o.z / d.z
    if t <= 0.0:
        raise RayBackward("gaze ray points away from the screen plane")
    return PoG(o.x + t * d.x, o.y + t * d.y, "cm")


def pog_to_direction(p: PoG, o: GazeOrigin) -> GazeDirection:
    if p.unit != "cm":
        raise UnitMismatch("pog_to_direction expects a PoG in cm")
    v = np.array([p.x - o.x, p.y - o.y, -o.z])
    if not np.any(v):
        raise DegenerateRay("PoG coincides with the gaze origin")
    return GazeDirection.from_array(v)


def cm_to_px(p: PoG, screen: ScreenSpec = EVE_SCREEN) -> PoG:
    if p.unit != "cm":
        raise UnitMismatch("expected a PoG in cm")
    x, y = screen.cm_to_px([p.x, p.y])
    return PoG(float(x), float(y), "px")


def px_to_cm(p: PoG, screen: ScreenSpec = EVE_SCREEN) -> PoG:
    if p.unit != "px":
        raise UnitMismatch("expected a PoG in px")
    x, y = screen.px_to_cm([p.x, p.y])
    return PoG(float(x), float(y), "cm")


def average_eyes(p_l: PoG, p_r: PoG) -> PoG:
    p_l._check(p_r)
    return PoG((p_l.x + p_r.x) / 2.0, (p_l.y + p_r.y) / 2.0, p_l.unit)


def angular_error(d1: GazeDirection, d2: GazeDirection) -> float:
    """Angle between two directions in degrees."""
    c = d1.x * d2.x + d1.y * d2.y + d1.z * d2.z
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def angular_error_pog(p_cm, g_cm, origin) -> np.ndarray:
    """Angular error (deg) between rays from ``origin`` through two PoG arrays.

    ``origin`` is a single 3-vector or an ``(n, 3)`` array of per-sample
    origins. Used by the evaluation report.
    """
    p = np.atleast_2d(np.asarray(p_cm, dtype=float))
    g = np.atleast_2d(np.asarray(g_cm, dtype=float))
    o = np.asarray(origin, dtype=float)
    if o.ndim == 1:
        o = np.broadcast_to(o, (p.shape[0], 3))
    a = np.column_stack([p[:, 0] - o[:, 0], p[:, 1] - o[:, 1], -o[:, 2]])
    b = np.column_stack([g[:, 0] - o[:, 0], g[:, 1] - o[:, 1], -o[:, 2]])
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    c = np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0)
    return np.degrees(np.arccos(c))
