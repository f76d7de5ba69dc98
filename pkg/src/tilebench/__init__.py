"""Tile-based weakly supervised biomarker prediction from H&E slides."""

from .core import (CohortManifest, ScoreRow, SlideRecord, SplitRole, Task, TileRecord, load_manifest,
                   load_tiles, read_scores, write_scores)
from .errors import ConfigError, NumericError, TilebenchError

__version__ = "0.1.0"

__all__ = ["CohortManifest", "ConfigError", "NumericError", "ScoreRow", "SlideRecord", "SplitRole",
           "Task", "TileRecord", "TilebenchError", "load_manifest", "load_tiles", "read_scores",
           "write_scores", "__version__"]
