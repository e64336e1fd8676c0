"""Validity gating and self-calibration.

A per-eye prediction is valid if it is on screen, or if it lies within three
"standard deviation distances" of that eye's valid-history mean. The
dispersion is the standard deviation of the Euclidean distances of the
valid history points from their mean; the rule only activates once
``min_history`` valid points exist.

Self-calibration shifts a prediction by the gap between the person's valid
history mean and the dataset-wide mean ground truth ``g_tr``.

History sets use 1-based sample positions ``1..n``: online mode sees
``{1, ..., t-1}``, offline mode sees every position except ``t``.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from .errors import NoValidSamples
from .geometry import EVE_SCREEN, PoG, ScreenSpec

Mode = Literal["online", "offline"]
MIN_HISTORY = 10


class ValidStats:
    """Running mean and distance spread of one eye's valid predictions.

    The mean is maintained incrementally. The distance spread depends on the
    current mean, so it is recomputed from the stored points when queried
    and cached until the next update.
    """

    def __init__(self):
        self._buf = np.empty((64, 2))
        self._n = 0
        self._sum = np.zeros(2)
        self._std = None

    @classmethod
    def from_points(cls, pts) -> ValidStats:
        s = cls()
        for p in np.asarray(pts, dtype=float).reshape(-1, 2):
            s.add(p)
        return s

    def add(self, p) -> None:
        if self._n == len(self._buf):
            self._buf = np.concatenate([self._buf, np.empty_like(self._buf)])
        self._buf[self._n] = p
        self._n += 1
        self._sum += self._buf[self._n - 1]
        self._std = None

    @property
    def n_valid(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        return self._buf[: self._n]

    @property
    def mean(self) -> np.ndarray:
        if self._n == 0:
            return np.full(2, np.nan)
        return self._sum / self._n

    @property
    def dist_std(self) -> float:
        if self._n == 0:
            return 0.0
        if self._std is None:
            self._std = batch_dist_std(self.points)
        return self._std


def batch_dist_std(points) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return 0.0
    d = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    return float(d.std())


def _assess(p, n_valid, mean, dist_std, screen, min_history) -> int:
    p = np.asarray(p, dtype=float)
    if screen.on_screen(p):
        return 1
    if n_valid >= min_history and np.linalg.norm(p - mean) <= 3.0 * dist_std:
        return 1
    return 0


def assess_eye(p_eye, stats: ValidStats, screen: ScreenSpec = EVE_SCREEN, min_history: int = MIN_HISTORY) -> int:
    """Validity flag (0/1) for one eye's prediction in cm."""
    p = p_eye.as_array() if isinstance(p_eye, PoG) else p_eye
    if stats.n_valid < min_history:
        return _assess(p, 0, None, 0.0, screen, min_history)
    return _assess(p, stats.n_valid, stats.mean, stats.dist_std, screen, min_history)


def combine_eyes(b_l: int, b_r: int) -> int:
    return int(b_l) * int(b_r)


def validity_flags(p_eye, screen: ScreenSpec = EVE_SCREEN, mode: Mode = "online",
                   min_history: int = MIN_HISTORY, history=None) -> np.ndarray:
    """Flags for a whole single-eye stream ``(n, 2)``.

    Online: each sample is judged against the statistics of the eye's
    earlier valid samples; flags are never revised afterwards.

    Offline: statistics come from the on-screen samples (which are valid
    whatever else happens), so for every off-screen sample they already
    exclude the sample itself. ``history`` (0-based positions, offline
    only) restricts which samples may contribute to the statistics.
    """
    pts = np.asarray(p_eye, dtype=float).reshape(-1, 2)
    on = screen.on_screen(pts)
    flags = on.astype(np.int64)
    if mode == "offline":
        member = on
        if history is not None:
            member = np.zeros(len(pts), dtype=bool)
            member[np.asarray(history, dtype=np.int64)] = True
            member &= on
        base = pts[member]
        if len(base) >= min_history:
            mean = base.mean(axis=0)
            reach = 3.0 * batch_dist_std(base)
            off = ~on
            flags[off] = (np.linalg.norm(pts[off] - mean, axis=1) <= reach).astype(np.int64)
        return flags
    if mode != "online":
        raise ValueError(f"unknown mode {mode!r}")
    if history is not None:
        raise ValueError("history subsets apply to offline mode only")
    stats = ValidStats()
    for i in range(len(pts)):
        if not on[i] and stats.n_valid >= min_history:
            flags[i] = int(np.linalg.norm(pts[i] - stats.mean) <= 3.0 * stats.dist_std)
        if flags[i]:
            stats.add(pts[i])
    return flags


def dataset_mean(g, v) -> np.ndarray:
    """Mean ground-truth PoG over valid samples, ``sum(g*v) / sum(v)``."""
    g = np.asarray(g, dtype=float).reshape(-1, 2)
    v = np.asarray(v, dtype=float).reshape(-1)
    total = v.sum()
    if total == 0:
        raise NoValidSamples("dataset mean needs at least one valid sample")
    return (g * v[:, None]).sum(axis=0) / total


def history_indices(mode: Mode, t: int, n_total: int) -> list[int]:
    """1-based history positions visible at position ``t``."""
    if not 1 <= t <= n_total:
        raise ValueError("t must lie in 1..n_total")
    if mode == "online":
        return list(range(1, t))
    if mode == "offline":
        return list(range(1, t)) + list(range(t + 1, n_total + 1))
    raise ValueError(f"unknown mode {mode!r}")


def self_calibrate(p, hist_p, hist_b, g_tr) -> np.ndarray:
    """Shift ``p`` by ``mean(valid history) - g_tr``; no valid history -> ``p``."""
    p = np.asarray(p.as_array() if isinstance(p, PoG) else p, dtype=float)
    hp = np.asarray(hist_p, dtype=float).reshape(-1, 2)
    hb = np.asarray(hist_b, dtype=float).reshape(-1)
    w = hb.sum()
    if w == 0:
        return p.copy()
    return p - ((hp * hb[:, None]).sum(axis=0) / w - np.asarray(g_tr, dtype=float))


def calibrate_stream(p, b, g_tr, mode: Mode = "offline", history=None):
    """Self-calibrate every sample of one person.

    ``history`` optionally restricts the usable history to a subset of
    sample positions (0-based); the sample itself is always excluded.
    Returns ``(refined, n_valid_history)``.
    """
    p = np.asarray(p, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1)
    g_tr = np.asarray(g_tr, dtype=float)
    n = len(p)
    pb = p * b[:, None]
    if mode == "online":
        if history is not None:
            raise ValueError("history subsets apply to offline mode only")
        s = np.vstack([np.zeros((1, 2)), np.cumsum(pb, axis=0)[:-1]])
        w = np.concatenate([[0.0], np.cumsum(b)[:-1]])
    elif mode == "offline":
        member = np.ones(n, dtype=bool)
        if history is not None:
            member = np.zeros(n, dtype=bool)
            member[np.asarray(history, dtype=np.int64)] = True
        tot_s = pb[member].sum(axis=0)
        tot_w = b[member].sum()
        s = tot_s - pb * member[:, None]
        w = tot_w - b * member
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = p.copy()
    has = w > 0
    out[has] = p[has] - (s[has] / w[has, None] - g_tr)
    return out, w.astype(np.int64)


class PersonHistory:
    """Ordered per-person store with online/offline history queries."""

    def __init__(self, person_id, mode: Mode = "online"):
        if mode not in ("online", "offline"):
            raise ValueError(f"unknown mode {mode!r}")
        self.person_id = person_id
        self.mode = mode
        self.entries: list[dict] = []

    def add(self, t: int, p_l, p_r, b_l: int, b_r: int, p_refined=None) -> None:
        if self.entries and t <= self.entries[-1]["t"]:
            raise ValueError("entries must arrive in increasing t")
        p_l = np.asarray(p_l, dtype=float)
        p_r = np.asarray(p_r, dtype=float)
        self.entries.append({
            "t": t, "p_l": p_l, "p_r": p_r, "p": (p_l + p_r) / 2.0,
            "b_l": int(b_l), "b_r": int(b_r), "b": combine_eyes(b_l, b_r),
            "p_refined": None if p_refined is None else np.asarray(p_refined, dtype=float),
        })

    def visible(self, t: int) -> list[dict]:
        """Entries in the history set of sample ``t``."""
        if self.mode == "online":
            return [e for e in self.entries if e["t"] < t]
        return [e for e in self.entries if e["t"] != t]

    def stats(self, t: int, eye: str) -> ValidStats:
        s = ValidStats()
        for e in self.visible(t):
            if e["b_" + eye]:
                s.add(e["p_" + eye])
        return s

    def calibrate(self, t: int, p, g_tr) -> np.ndarray:
        vis = self.visible(t)
        return self_calibrate(p, [e["p"] for e in vis] or np.empty((0, 2)), [e["b"] for e in vis], g_tr)
