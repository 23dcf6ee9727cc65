"""Perspective-guided fractional-dilation convolution for crowd counting."""

from .errors import (
    ConfigError,
    DataError,
    DomainError,
    FormatError,
    GenerationError,
    InvalidStateError,
    LengthError,
    NumericalError,
    PfdError,
    ShapeError,
    UsageError,
)
from .fdconv import ConvWeights, dilated_conv_ref, fdconv_backward, fdconv_forward, pgc_smooth_forward
from .metrics import game, mae_rmse
from .network import PFDNet, PfdnetConfig, predict_count
from .penet import PENet, PENetConfig
from .perspective import RateParams, fit_perspective_map, normalize_zeta, rate_map
from .tensor_core import Rng

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DomainError", "FormatError", "GenerationError", "InvalidStateError",
    "LengthError", "NumericalError", "PfdError", "ShapeError", "UsageError",
    "ConvWeights", "dilated_conv_ref", "fdconv_backward", "fdconv_forward", "pgc_smooth_forward",
    "game", "mae_rmse", "PFDNet", "PfdnetConfig", "predict_count", "PENet", "PENetConfig",
    "RateParams", "fit_perspective_map", "normalize_zeta", "rate_map", "Rng",
]
