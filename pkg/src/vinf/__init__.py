"""Clip-parallel inference runtime for a toy temporal video-diffusion model."""

from .clip import ClipPlan, LayerHaloSpec, TemporalContext, partition, sync_contexts
from .config import RunConfig
from .errors import ConfigError, PartitionError, ProtocolError, ShapeError, TransportError, VinfError
from .pipeline import DenoiseConfig, Distributed, ModelConfig, build_model, denoise, eps_theta
from .tensor import load_tensor, max_abs_diff, save_tensor, tensor_from_seed
from .temporal import DualScopeConfig, attention_full, dual_scope_reference, group_norm, temporal_conv

__version__ = "0.1.0"

__all__ = [
    "ClipPlan", "LayerHaloSpec", "TemporalContext", "partition", "sync_contexts",
    "RunConfig",
    "ConfigError", "PartitionError", "ProtocolError", "ShapeError", "TransportError", "VinfError",
    "DenoiseConfig", "Distributed", "ModelConfig", "build_model", "denoise", "eps_theta",
    "load_tensor", "max_abs_diff", "save_tensor", "tensor_from_seed",
    "DualScopeConfig", "attention_full", "dual_scope_reference", "group_norm", "temporal_conv",
]
