"""Synthetic people standing in for an upstream gaze network.

Each person has a latent affine distortion of screen space (their
"optical vs visual axis" bias), isotropic prediction noise, a per-eye
disparity, and a blink rate. Blinked samples get wild predictions and
ground-truth validity ``v = 0``.

Seeding: :func:`generate_people` derives one child ``SeedSequence`` per
person from the master seed via ``SeedSequence(seed).spawn(n)``; person
``j`` always gets child ``j``, so adding people never changes earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .geometry import EVE_SCREEN, ScreenSpec
from .raster import AffineParams, AugmentConfig, apply_affine_points, sample_affine
from .streams import PersonStream


@dataclass(frozen=True)
class PersonProfile:
    person_id: str
    distortion: AffineParams
    noise_sigma_px: float = 10.0
    blink_rate: float = 0.02
    eye_offsets_cm: tuple[tuple[float, float], tuple[float, float]] = ((-0.5, 0.0), (0.5, 0.0))
    wild_onscreen_frac: float = 0.1  # share of corrupted samples that land on screen

    def __post_init__(self):
        if not 0.0 <= self.blink_rate < 1.0:
            raise ValueError("blink_rate must lie in [0, 1)")
        if self.noise_sigma_px < 0:
            raise ValueError("noise_sigma_px must be non-negative")
        if not 0.0 <= self.wild_onscreen_frac <= 1.0:
            raise ValueError("wild_onscreen_frac must lie in [0, 1]")


@dataclass(frozen=True)
class TrajectoryConfig:
    mode: Literal["free_viewing", "random_points"] = "free_viewing"
    n_samples: int = 2000
    seed: int = 0
    fixation_mean: float = 30.0  # samples
    saccade_samples: int = 3

    def __post_init__(self):
        if self.mode not in ("free_viewing", "random_points"):
            raise ValueError(f"unknown trajectory mode {self.mode!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def trajectory(traj: TrajectoryConfig, screen: ScreenSpec, rng: np.random.Generator) -> np.ndarray:
    """Ground-truth PoGs in cm, ``(n, 2)``, all on screen."""
    n = traj.n_samples
    size = np.array([screen.width_cm, screen.height_cm])
    if traj.mode == "random_points":
        return rng.uniform(0.0, 1.0, size=(n, 2)) * size
    out = np.empty((n, 2))
    cur = rng.uniform(0.0, 1.0, 2) * size
    i = 0
    while i < n:
        dwell = int(rng.geometric(1.0 / traj.fixation_mean))
        stop = min(n, i + dwell)
        out[i:stop] = cur
        i = stop
        nxt = rng.uniform(0.0, 1.0, 2) * size
        for k in range(1, traj.saccade_samples + 1):
            if i >= n:
                break
            out[i] = cur + (nxt - cur) * (k / traj.saccade_samples)
            i += 1
        cur = nxt
    return out


def _wild(rng: np.random.Generator, n: int, screen: ScreenSpec, onscreen_frac: float) -> np.ndarray:
    """Draws from the 3x-extent box around the screen.

    A share ``onscreen_frac`` lands uniformly on the screen; the rest is
    uniform over the box with the screen itself excluded.
    """
    size = np.array([screen.width_cm, screen.height_cm])
    out = np.empty((n, 2))
    on = rng.uniform(size=n) < onscreen_frac
    out[on] = rng.uniform(0.0, 1.0, size=(int(on.sum()), 2)) * size
    todo = np.flatnonzero(~on)
    while len(todo):
        cand = (rng.uniform(0.0, 1.0, size=(len(todo), 2)) * 3.0 - 1.0) * size
        off = ~screen.on_screen(cand)
        out[todo[off]] = cand[off]
        todo = todo[~off]
    return out


def generate_stream(profile: PersonProfile, traj: TrajectoryConfig, screen: ScreenSpec = EVE_SCREEN,
                    rng: np.random.Generator | None = None) -> PersonStream:
    """Simulate one person's initial predictions alongside their ground truth."""
    if rng is None:
        rng = np.random.default_rng(traj.seed)
    g = trajectory(traj, screen, rng)
    n = len(g)
    noise = rng.normal(0.0, profile.noise_sigma_px, size=(n, 2)) if profile.noise_sigma_px > 0 else np.zeros((n, 2))
    p_px = apply_affine_points(screen.cm_to_px(g), profile.distortion, noise, screen)
    p = screen.px_to_cm(p_px)
    off_l, off_r = (np.asarray(o, dtype=float) for o in profile.eye_offsets_cm)
    p_l = p + off_l
    p_r = p + off_r
    blink = rng.uniform(size=n) < profile.blink_rate
    k = int(blink.sum())
    if k:
        p_l[blink] = _wild(rng, k, screen, profile.wild_onscreen_frac)
        p_r[blink] = _wild(rng, k, screen, profile.wild_onscreen_frac)
    v = (~blink).astype(np.int64)
    return PersonStream(profile.person_id, np.arange(n), p_l, p_r, g, v,
                        meta={"distortion": profile.distortion.theta.tolist()})


# ---------------------------------------------------------------------------
# profile families

# Translation std (cm per axis) giving a mean raw angular error of roughly
# 2.0-2.3 deg at 60 cm once noise is added.
KAPPA_SHIFT_CM = 1.95


def kappa_profile(rng: np.random.Generator, person_id: str, screen: ScreenSpec = EVE_SCREEN,
                  blink_rate: float = 0.02) -> PersonProfile:
    """Small, mostly-translational bias of the size angle kappa produces."""
    shift_cm = rng.normal(0.0, KAPPA_SHIFT_CM, 2)
    frac = shift_cm / np.array([screen.width_cm, screen.height_cm])
    scale = 1.0 + rng.normal(0.0, 0.02, 2)
    a = AffineParams.from_components(tuple(scale), rng.normal(0.0, 1.0), rng.normal(0.0, 0.01), tuple(frac), screen)
    return PersonProfile(person_id, a, noise_sigma_px=10.0, blink_rate=blink_rate)


def augmented_profile(rng: np.random.Generator, person_id: str, aug: AugmentConfig = AugmentConfig(),
                      screen: ScreenSpec = EVE_SCREEN, blink_rate: float = 0.02) -> PersonProfile:
    """Person whose bias is drawn from the PT augmentation ranges."""
    return PersonProfile(person_id, sample_affine(rng, aug, screen), noise_sigma_px=aug.noise_sigma_px(screen),
                         blink_rate=blink_rate)


def generate_people(n_people: int, n_samples: int, seed: int = 0, family: str = "kappa",
                    mode: str = "free_viewing", screen: ScreenSpec = EVE_SCREEN,
                    aug: AugmentConfig = AugmentConfig(), blink_rate: float = 0.02,
                    prefix: str = "p") -> list[PersonStream]:
    """Generate ``n_people`` independent streams from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n_people)
    streams = []
    for j, child in enumerate(children):
        rng = np.random.default_rng(child)
        pid = f"{prefix}{j:03d}"
        if family == "kappa":
            prof = kappa_profile(rng, pid, screen, blink_rate)
        elif family == "augmented":
            prof = augmented_profile(rng, pid, aug, screen, blink_rate)
        elif family == "identity":
            prof = PersonProfile(pid, AffineParams.identity(), 0.0, blink_rate, ((0.0, 0.0), (0.0, 0.0)))
        else:
            raise ValueError(f"unknown profile family {family!r}")
        traj = TrajectoryConfig(mode=mode, n_samples=n_samples)
        streams.append(generate_stream(prof, traj, screen, rng))
    return streams
