"""End-to-end refinement: validity gating, self-calibration and PT.

Per person the stages are

1. per-eye validity flags, combined by product;
2. self-calibration of the eye-averaged prediction against ``g_tr``;
3. PT: the sample heatmap of the calibrated prediction plus the history
   heatmap of the person's valid calibrated predictions go through the
   spatial transformer, and the warped sample channel is decoded.

Offline mode sees every other sample of the person. Online mode sees only
earlier samples, and passes the initial prediction through untouched while
the number of valid earlier samples is at most ``online_threshold``. The
online PT history map is rebuilt every ``online_block`` samples from the
calibrated predictions strictly before the block.
"""

from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EmptyDataset, LengthExceedsStream, MissingCheckpoint, NoValidSamples
from .geometry import EVE_SCREEN, ScreenSpec, angular_error_pog
from .pt import EPS, PtArch, PtModel, PtTrainConfig, forward, load_checkpoint, train
from .raster import (
    AugmentConfig,
    HeatmapGrid,
    apply_affine_points,
    decode_batch,
    degenerate_mask,
    rasterize_history,
    rasterize_point,
    rasterize_points,
    sample_affine,
    sample_noise,
)
from .refinement import MIN_HISTORY, calibrate_stream, dataset_mean, validity_flags
from .streams import PersonStream

STAGES = ("initial", "sc", "pt")
VIEW_DISTANCE_CM = 60.0
_PT_CHUNK = 128


@dataclass
class PipelineConfig:
    screen: ScreenSpec = EVE_SCREEN
    mode: str = "offline"
    height: int = 72
    width: int = 128
    sigma: float = 1.5
    min_history: int = MIN_HISTORY
    online_threshold: int = 2000
    online_block: int = 100  # online PT history map refresh period, samples
    use_vm: bool = True
    use_sc: bool = True
    use_pt: bool = True
    checkpoint: str | None = None
    g_tr: tuple[float, float] | None = None  # overrides the checkpoint's value
    origin_z_cm: float = -VIEW_DISTANCE_CM  # default eye position for angular error
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("online", "offline"):
            raise ConfigError(f"mode must be 'online' or 'offline', got {self.mode!r}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("heatmap must be at least 8x8")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.online_threshold < 0:
            raise ConfigError("online_threshold must be >= 0")
        if self.online_block < 1:
            raise ConfigError("online_block must be >= 1")
        if self.min_history < 0:
            raise ConfigError("min_history must be >= 0")
        if not self.origin_z_cm < 0:
            raise ConfigError("origin_z_cm must be negative (in front of the screen)")

    @property
    def grid(self) -> HeatmapGrid:
        return HeatmapGrid(self.screen, self.height, self.width, self.sigma)

    def default_origin(self) -> np.ndarray:
        c = self.screen.center_cm
        return np.array([c[0], c[1], self.origin_z_cm])


@dataclass
class RefinedStream:
    """Per-sample outputs of every stage for one person."""

    stream: PersonStream
    b_l: np.ndarray
    b_r: np.ndarray
    p_sc: np.ndarray
    p_final: np.ndarray

    @property
    def b(self) -> np.ndarray:
        return self.b_l * self.b_r

    def stage(self, name: str) -> np.ndarray:
        return {"initial": self.stream.p, "sc": self.p_sc, "pt": self.p_final}[name]

    def columns(self) -> dict:
        return {
            "b_l": self.b_l, "b_r": self.b_r, "b": self.b,
            "p_sc_x_cm": self.p_sc[:, 0], "p_sc_y_cm": self.p_sc[:, 1],
            "p_ref_x_cm": self.p_final[:, 0], "p_ref_y_cm": self.p_final[:, 1],
        }


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class PersonReport:
    person_id: str
    n_samples: int
    n_eval: int  # samples with ground truth and v == 1
    n_flag_valid: int
    n_flag_invalid: int
    errors: dict  # stage -> {"cm", "px", "deg"}


@dataclass
class EvalReport:
    persons: list[PersonReport]
    aggregate: dict = field(default_factory=dict)
    n_eval: int = 0

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "n_eval": self.n_eval,
            "persons": [asdict(p) for p in self.persons],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def error(self, stage: str, unit: str = "cm") -> float:
        return self.aggregate[stage][unit]


def _person_report(r: RefinedStream, cfg: PipelineConfig) -> PersonReport | None:
    s = r.stream
    if s.g is None:
        return None
    m = np.ones(len(s), dtype=bool) if s.v is None else s.v == 1
    origin = s.origin[m] if s.origin is not None else cfg.default_origin()
    errors = {}
    g = s.g[m]
    for st in STAGES:
        p = r.stage(st)[m]
        if len(g):
            cm = float(np.linalg.norm(p - g, axis=1).mean())
            px = float(np.linalg.norm(cfg.screen.cm_to_px(p) - cfg.screen.cm_to_px(g), axis=1).mean())
            deg = float(angular_error_pog(p, g, origin).mean())
        else:
            cm = px = deg = math.nan
        errors[st] = {"cm": cm, "px": px, "deg": deg}
    nb = int(r.b.sum())
    return PersonReport(s.person_id, len(s), int(m.sum()), nb, len(s) - nb, errors)


def build_report(refined: list[RefinedStream], cfg: PipelineConfig) -> EvalReport | None:
    persons = [p for p in (_person_report(r, cfg) for r in refined) if p is not None]
    if not persons:
        return None
    weights = np.array([p.n_eval for p in persons], dtype=float)
    total = weights.sum()
    agg = {}
    for st in STAGES:
        agg[st] = {}
        for unit in ("cm", "px", "deg"):
            vals = np.array([p.errors[st][unit] for p in persons])
            used = weights > 0
            agg[st][unit] = float((vals[used] * weights[used]).sum() / total) if total else math.nan
    return EvalReport(persons, agg, int(total))


# ---------------------------------------------------------------------------
# refinement


def resolve_g_tr(cfg: PipelineConfig, meta: dict | None, g_tr=None) -> np.ndarray | None:
    if g_tr is not None:
        return np.asarray(g_tr, dtype=float)
    if cfg.g_tr is not None:
        return np.asarray(cfg.g_tr, dtype=float)
    if meta and meta.get("g_tr") is not None:
        return np.asarray(meta["g_tr"], dtype=float)
    return None


def _person_rng(seed: int, person_id: str, block: int = 0) -> np.random.Generator:
    key = zlib.crc32(str(person_id).encode("utf-8"))
    return np.random.default_rng([seed, key, block])


def _pt_apply(model: PtModel, samples_cm: np.ndarray, history: np.ndarray, grid: HeatmapGrid,
              fallback: np.ndarray) -> np.ndarray:
    """Warp and decode a batch of sample points that share one history map.

    Samples whose map (before or after warping) has no mass above ``EPS``
    keep their fallback position: the point sits so far off the grid that
    only an underflowing Gaussian tail is left. Nearer off-grid points
    decode to the border cell.
    """
    out = fallback.copy()
    for start in range(0, len(samples_cm), _PT_CHUNK):
        sl = slice(start, start + _PT_CHUNK)
        rs = rasterize_points(samples_cm[sl], grid)
        x = np.empty(rs.shape + (2,))
        x[..., 0] = rs
        x[..., 1] = history
        _, warped = forward(model, x)
        ws = warped[..., 0]
        ok = ~(degenerate_mask(rs) | degenerate_mask(ws))
        ok &= (rs.max(axis=(1, 2)) > EPS) & (ws.max(axis=(1, 2)) > EPS)
        if ok.any():
            out[sl][ok] = decode_batch(ws[ok], grid)
    return out


def refine_person(cfg: PipelineConfig, stream: PersonStream, g_tr, model: PtModel | None = None,
                  history=None) -> RefinedStream:
    """Run every enabled stage on one person.

    ``history`` (offline only) restricts the usable history to the given
    0-based positions.
    """
    n = len(stream)
    grid = cfg.grid
    p = stream.p
    mode = cfg.mode
    if mode == "online" and history is not None:
        raise ValueError("history subsets apply to offline mode only")
    if cfg.use_vm:
        b_l = validity_flags(stream.p_l, cfg.screen, mode, cfg.min_history, history)
        b_r = validity_flags(stream.p_r, cfg.screen, mode, cfg.min_history, history)
    else:
        b_l = np.ones(n, dtype=np.int64)
        b_r = np.ones(n, dtype=np.int64)
    b = b_l * b_r
    member = np.ones(n, dtype=bool)
    if history is not None:
        member[:] = False
        member[np.asarray(history, dtype=np.int64)] = True
    if cfg.use_sc:
        p_sc, _ = calibrate_stream(p, b, g_tr, mode, history)
    else:
        p_sc = p.copy()
    p_final = p_sc.copy()
    if mode == "online":
        past_valid = np.concatenate([[0], np.cumsum(b)[:-1]])
        live = past_valid > cfg.online_threshold
        p_sc = np.where(live[:, None], p_sc, p)
        p_final = p_sc.copy()
        if cfg.use_pt and model is not None and live.any():
            first = int(np.argmax(live))
            block0 = first // cfg.online_block
            for k in range(block0, (n - 1) // cfg.online_block + 1):
                lo, hi = k * cfg.online_block, min(n, (k + 1) * cfg.online_block)
                idx = np.arange(lo, hi)
                idx = idx[live[idx]]
                past = b[:lo] == 1
                if not len(idx) or not past.any():
                    continue
                hmap = rasterize_history(p_sc[:lo], b[:lo], grid, _person_rng(cfg.seed, stream.person_id, k))
                p_final[idx] = _pt_apply(model, p_sc[idx], hmap, grid, p_sc[idx])
    elif cfg.use_pt and model is not None:
        hist_b = b * member
        if hist_b.any():
            hmap = rasterize_history(p_sc, hist_b, grid, _person_rng(cfg.seed, stream.person_id))
            p_final = _pt_apply(model, p_sc, hmap, grid, p_sc)
    return RefinedStream(stream, b_l, b_r, p_sc, p_final)


def _prepare(cfg: PipelineConfig, model, g_tr):
    meta = None
    if cfg.use_pt and model is None:
        if not cfg.checkpoint:
            raise MissingCheckpoint("PT is enabled but no checkpoint path was given")
        model, meta = load_checkpoint(cfg.checkpoint)
    if model is not None and (model.arch.height, model.arch.width) != (cfg.height, cfg.width):
        raise ConfigError("checkpoint heatmap size differs from the configured one")
    g = resolve_g_tr(cfg, meta, g_tr)
    if cfg.use_sc and g is None:
        raise ConfigError("self-calibration needs g_tr (from the checkpoint or the config)")
    return (model if cfg.use_pt else None), g


def run(cfg: PipelineConfig, streams, model: PtModel | None = None, g_tr=None):
    """Refine every person. Returns ``(refined streams, EvalReport or None)``.

    ``model`` and ``g_tr`` may be passed directly; otherwise they come from
    ``cfg.checkpoint`` (and ``cfg.g_tr`` for the latter).
    """
    model, g = _prepare(cfg, model, g_tr)
    refined = [refine_person(cfg, s, g, model) for s in streams]
    return refined, build_report(refined, cfg)


def history_subset(n: int, length: int) -> np.ndarray | None:
    """Evenly spaced history positions; ``None`` means the whole stream."""
    if length >= n - 1:
        return None
    if length <= 0:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.round(np.linspace(0, n - 1, length)).astype(np.int64))


def ablate_history(cfg: PipelineConfig, streams, lengths, model: PtModel | None = None, g_tr=None) -> list[dict]:
    """Offline errors per stage when each person's history is cut to ``L`` samples."""
    if cfg.mode != "offline":
        raise ConfigError("the history ablation runs in offline mode")
    model, g = _prepare(cfg, model, g_tr)
    streams = list(streams)
    rows = []
    for length in lengths:
        length = int(length)
        if length < 0:
            raise ConfigError("history lengths must be >= 0")
        refined = []
        for s in streams:
            use = length
            if length > len(s):
                warnings.warn(f"history length {length} exceeds stream {s.person_id!r} of length {len(s)}; clamped",
                              LengthExceedsStream, stacklevel=2)
                use = len(s)
            refined.append(refine_person(cfg, s, g, model, history_subset(len(s), use)))
        rep = build_report(refined, cfg)
        if rep is None:
            raise NoValidSamples("the history ablation needs ground truth")
        row = {"length": length}
        for st in STAGES:
            row[f"{st}_cm"] = rep.error(st, "cm")
            row[f"{st}_deg"] = rep.error(st, "deg")
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# PT training data


def build_pt_dataset(streams, train_cfg: PtTrainConfig, grid: HeatmapGrid, aug: AugmentConfig = AugmentConfig(),
                     subsample: float = 0.1, rng: np.random.Generator | None = None, g_tr=None):
    """Synthesise PT training pairs from ground-truth streams.

    A uniform fraction ``subsample`` of the valid samples becomes anchors.
    Each anchor gets its own synthetic person: a history of ``L`` other
    samples of the same stream (``L`` cycling through
    ``train_cfg.history_lengths``), one affine draw applied to anchor and
    history, and fresh per-point noise. Input channels are the augmented
    anchor and the augmented history; the target is the clean history drawn
    in the same visiting order.

    With ``g_tr`` given, the augmented points are shifted so the augmented
    history has mean ``g_tr``, which is what SC hands to PT at inference.

    Returns float32 ``inputs (N, H, W, 2)`` and ``targets (N, H, W)``.
    """
    if not 0.0 < subsample <= 1.0:
        raise ConfigError("subsample must lie in (0, 1]")
    if rng is None:
        rng = np.random.default_rng(train_cfg.seed)
    streams = [s for s in streams if s.g is not None]
    pool = []
    for j, s in enumerate(streams):
        v = np.ones(len(s), dtype=np.int64) if s.v is None else s.v
        if len(s) < 2:
            continue
        pool += [(j, t) for t in np.flatnonzero(v == 1)]
    if not pool:
        raise EmptyDataset("no valid ground-truth samples to train on")
    k = max(1, int(round(subsample * len(pool))))
    pick = np.sort(rng.choice(len(pool), size=k, replace=False))
    screen = grid.screen
    inputs = np.empty((k, grid.height, grid.width, 2), dtype=np.float32)
    targets = np.empty((k, grid.height, grid.width), dtype=np.float32)
    lengths = train_cfg.history_lengths
    for m, i in enumerate(pick):
        j, t = pool[i]
        s = streams[j]
        n = len(s)
        v = np.ones(n, dtype=np.int64) if s.v is None else s.v
        length = min(lengths[m % len(lengths)], n - 1)
        others = rng.choice(n - 1, size=length, replace=False)
        hidx = np.sort(others + (others >= t))
        affine = sample_affine(rng, aug, screen)
        pts = s.g[np.concatenate([[t], hidx])]
        noise = sample_noise(rng, aug, screen, len(pts))
        aug_pts = screen.px_to_cm(apply_affine_points(screen.cm_to_px(pts), affine, noise, screen))
        hv = v[hidx]
        valid_pos = np.flatnonzero(hv)
        if g_tr is not None and len(valid_pos):
            aug_pts = aug_pts + (np.asarray(g_tr, dtype=float) - aug_pts[1:][valid_pos].mean(axis=0))
        order = valid_pos[rng.permutation(len(valid_pos))]
        inputs[m, ..., 0] = rasterize_point(aug_pts[0], grid)
        inputs[m, ..., 1] = rasterize_history(aug_pts[1:], hv, grid, order=order)
        targets[m] = rasterize_history(s.g[hidx], hv, grid, order=order)
    return inputs, targets


def training_g_tr(streams) -> np.ndarray:
    """Dataset-wide mean ground truth of the training streams."""
    gs, vs = [], []
    for s in streams:
        if s.g is None:
            continue
        gs.append(s.g)
        vs.append(np.ones(len(s), dtype=np.int64) if s.v is None else s.v)
    if not gs:
        raise NoValidSamples("training streams carry no ground truth")
    return dataset_mean(np.concatenate(gs), np.concatenate(vs))


def train_pt(streams, train_cfg: PtTrainConfig, grid: HeatmapGrid = HeatmapGrid(),
             aug: AugmentConfig = AugmentConfig(), subsample: float = 0.1, arch: PtArch | None = None, log=None):
    """Build the training set, fit PT and assemble checkpoint metadata.

    Returns ``(model, meta)``; ``meta`` carries ``g_tr`` and the loss trace.
    """
    streams = list(streams)
    g_tr = training_g_tr(streams)
    rng = np.random.default_rng([train_cfg.seed, 1])
    inputs, targets = build_pt_dataset(streams, train_cfg, grid, aug, subsample, rng, g_tr=g_tr)
    if arch is None:
        arch = PtArch(height=grid.height, width=grid.width)
    res = train(inputs, targets, train_cfg, arch=arch, log=log)
    meta = {
        "g_tr": [float(g_tr[0]), float(g_tr[1])],
        "loss_trace": [float(x) for x in res.loss_trace],
        "n_train": int(len(inputs)),
        "seed": int(train_cfg.seed),
        "grid": {"height": grid.height, "width": grid.width, "sigma": grid.sigma},
        "screen": asdict(grid.screen),
        "augment": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(aug).items()},
        "train": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(train_cfg).items()},
    }
    return res.model, meta
