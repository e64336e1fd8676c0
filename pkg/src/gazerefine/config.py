"""TOML configuration with command-line overrides.

Layout (every key optional)::

    seed = 0

    [screen]      width_cm, height_cm, width_px, height_px
    [pipeline]    mode, height, width, sigma, min_history, online_threshold,
                  online_block, vm, sc, pt, checkpoint, g_tr, origin_z_cm
    [simulate]    n_people, n_samples, family, trajectory, blink_rate, prefix
    [train]       lr, momentum, epochs, batch_size, history_lengths, clip_norm,
                  subsample, head, channels
    [augment]     scale, rotation_deg, shear, translation_frac, noise_frac_diag

Overrides are dotted ``section.key=value`` strings whose value is parsed as
a TOML scalar or array (bare words fall back to strings); they win over the
file.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

from .errors import ConfigError
from .geometry import ScreenSpec
from .pipeline import PipelineConfig
from .pt import PtArch, PtTrainConfig
from .raster import AugmentConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = {
    "screen": ("width_cm", "height_cm", "width_px", "height_px"),
    "pipeline": ("mode", "height", "width", "sigma", "min_history", "online_threshold", "online_block",
                 "vm", "sc", "pt", "checkpoint", "g_tr", "origin_z_cm"),
    "simulate": ("n_people", "n_samples", "family", "trajectory", "blink_rate", "prefix"),
    "train": ("lr", "momentum", "epochs", "batch_size", "history_lengths", "clip_norm", "subsample", "head",
              "channels"),
    "augment": ("scale", "rotation_deg", "shear", "translation_frac", "noise_frac_diag"),
}


@dataclass
class SimulateConfig:
    n_people: int = 10
    n_samples: int = 2000
    family: str = "kappa"
    trajectory: str = "free_viewing"
    blink_rate: float = 0.02
    prefix: str = "p"

    def __post_init__(self):
        if self.n_people < 1 or self.n_samples < 1:
            raise ConfigError("n_people and n_samples must be >= 1")
        if self.family not in ("kappa", "augmented", "identity"):
            raise ConfigError(f"unknown family {self.family!r}")
        if self.trajectory not in ("free_viewing", "random_points"):
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if not 0.0 <= self.blink_rate < 1.0:
            raise ConfigError("blink_rate must lie in [0, 1)")


@dataclass
class Settings:
    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    train: PtTrainConfig = field(default_factory=PtTrainConfig)
    arch: PtArch = field(default_factory=PtArch)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    subsample: float = 0.1


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if "." in key:
        section, name = key.split(".", 1)
    else:
        section, name = "", key
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, name, value


def merge(data: dict, overrides) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for text in overrides or ():
        section, name, value = parse_override(text)
        if section:
            out.setdefault(section, {})[name] = value
        else:
            out[name] = value
    return out


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def build(data: dict) -> Settings:
    """Validate a merged config dict and build typed settings."""
    for key, val in data.items():
        if key == "seed":
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(val, dict):
            raise ConfigError(f"section {key!r} must be a table")
        unknown = set(val) - set(SECTIONS[key])
        if unknown:
            raise ConfigError(f"unknown key {key}.{sorted(unknown)[0]}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    try:
        screen = ScreenSpec(**data.get("screen", {}))
        pl = dict(data.get("pipeline", {}))
        for short, full in (("vm", "use_vm"), ("sc", "use_sc"), ("pt", "use_pt")):
            if short in pl:
                pl[full] = pl.pop(short)
        if "g_tr" in pl:
            pl["g_tr"] = _tuple(pl["g_tr"])
        pipeline = PipelineConfig(screen=screen, seed=seed, **pl)
        simulate = SimulateConfig(**data.get("simulate", {}))
        tr = dict(data.get("train", {}))
        subsample = tr.pop("subsample", 0.1)
        head = tr.pop("head", "flatten")
        channels = _tuple(tr.pop("channels", (8, 16, 32, 32)))
        if "history_lengths" in tr:
            tr["history_lengths"] = _tuple(tr["history_lengths"])
        train = PtTrainConfig(seed=seed, **tr)
        arch = PtArch(height=pipeline.height, width=pipeline.width, channels=channels, head=head)
        augment = AugmentConfig(**{k: _tuple(v) for k, v in data.get("augment", {}).items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(subsample, (int, float)) or not 0.0 < subsample <= 1.0:
        raise ConfigError("train.subsample must lie in (0, 1]")
    return Settings(seed, pipeline, simulate, train, arch, augment, float(subsample))


def load(path=None, overrides=()) -> Settings:
    data = load_toml(path) if path else {}
    return build(merge(data, overrides))
