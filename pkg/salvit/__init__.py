"""Saliency-guided vision transformer and few-shot keypoint detection on a small numpy autodiff core."""
from .config import RunConfig, load_config
from .errors import ContractError, DimensionError, NumericError, ParameterError, SalViTError
from .fskd import Episode, KeypointDetector, KeypointPrediction, ModelConfig, Sample

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DimensionError", "Episode", "KeypointDetector", "KeypointPrediction", "ModelConfig",
    "NumericError", "ParameterError", "RunConfig", "Sample", "SalViTError", "load_config",
]
