"""Goal-area pedestrian trajectory and bounding-box forecasting."""
from .core import (BoxTrack, ConfigError, GridSpec, ModelConfig, NumericError, PixelBox, RunConfig, Sample,
                   ShapeError, load_config, make_grid_spec)
from .estimator import GoalNetForecaster
from .metrics import MetricsReport
from .trajectory import PredictionBundle

__all__ = [
    "BoxTrack", "ConfigError", "GoalNetForecaster", "GridSpec", "MetricsReport", "ModelConfig",
    "NumericError", "PixelBox", "PredictionBundle", "RunConfig", "Sample", "ShapeError",
    "load_config", "make_grid_spec",
]
__version__ = "0.1.0"
