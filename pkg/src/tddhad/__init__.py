"""One-step hyperspectral anomaly detection with a transferable detector.

The package trains a dual-attention encoder-decoder on anomalies simulated
from a single cube and applies the frozen checkpoint to cubes with any
band count.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArgumentError,
    ConfigError,
    DataError,
    FormatError,
    LoadError,
    NumericError,
    SizeError,
    TDDError,
)
from .hsi import BinaryMask, HsiCube, Patch, ScoreMap, load_cube, load_mask, load_score_map, normalize_cube  # noqa: E402
from .evaluate import AucReport, evaluate, grx, roc_series  # noqa: E402
from .pipeline import Checkpoint, TrainConfig, infer, load_checkpoint, save_checkpoint, train  # noqa: E402
from .net import NetworkConfig, TDDNet  # noqa: E402
