"""Managed aggregation of multi-layer uni-modal representations for vision-language fusion."""
from __future__ import annotations

from .crossmodal import CrossModalConfig, CrossModalState, CrossModalTower
from .encoders import EncoderConfig, LayerStack
from .errors import ConfigError, ContractError, DimensionError, NonFiniteGradientError
from .managers import ManagerKind
from .model import ManagerTower, ModelConfig
from .tensor import Rng, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "CrossModalConfig", "CrossModalState", "CrossModalTower",
    "DimensionError", "EncoderConfig", "LayerStack", "ManagerKind", "ManagerTower",
    "ModelConfig", "NonFiniteGradientError", "Rng", "Tensor",
]
