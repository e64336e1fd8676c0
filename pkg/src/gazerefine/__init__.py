"""Refinement of cross-person point-of-gaze predictions.

Validity gating, self-calibration against a dataset-wide mean, and a small
spatial transformer that learns a person-specific affine correction from
history heatmaps.
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateHeatmap,
    DegenerateRay,
    DuplicateIndex,
    EmptyDataset,
    GazeRefineError,
    LengthExceedsStream,
    MissingCheckpoint,
    NoValidSamples,
    ParseError,
    RayBackward,
    RayParallel,
    SchemaError,
    UnitMismatch,
)
from .geometry import EVE_SCREEN, GazeDirection, GazeOrigin, PoG, ScreenSpec
from .pipeline import EvalReport, PipelineConfig, ablate_history, run, train_pt
from .pt import PtArch, PtModel, PtTrainConfig, load_checkpoint, save_checkpoint
from .raster import AffineParams, AugmentConfig, HeatmapGrid
from .streams import PersonStream, read_csv, write_csv

__version__ = "0.1.0"
