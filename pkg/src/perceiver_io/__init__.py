"""Encode-process-decode attention networks on a small float64 autodiff engine."""

from .attention import AttentionConfig, AttentionModule, ConfigError, SelfAttention
from .encodings import FourierSpec, QueryBuilder, fourier_features, fourier_position_encoding
from .experiments import ExperimentConfig, load_config, run
from .flops import count as count_flops
from .flops import preset_report, scaling_curve
from .gradcheck import grad_check
from .model import AverageProjectDecoder, PerceiverConfig, PerceiverIO
from .tensor import Parameter, ShapeError, Tape, Tensor
from .training import Lamb, Schedule, composite_loss, schedule_rate

__all__ = [
    "AttentionConfig",
    "AttentionModule",
    "AverageProjectDecoder",
    "ConfigError",
    "ExperimentConfig",
    "FourierSpec",
    "Lamb",
    "Parameter",
    "PerceiverConfig",
    "PerceiverIO",
    "QueryBuilder",
    "Schedule",
    "SelfAttention",
    "ShapeError",
    "Tape",
    "Tensor",
    "composite_loss",
    "count_flops",
    "fourier_features",
    "fourier_position_encoding",
    "grad_check",
    "load_config",
    "preset_report",
    "run",
    "scaling_curve",
    "schedule_rate",
]
