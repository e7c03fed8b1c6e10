"""Operator surface: config files, binary containers, datasets and commands."""

from .config import ConfigError, RunConfig, load_config, parse_config
from .io import (
    Checkpoint,
    DigestMismatch,
    FormatError,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
    tensor_bytes,
    tensor_from_bytes,
)
from .shapes import gen_shapes

__all__ = [
    "Checkpoint",
    "ConfigError",
    "DigestMismatch",
    "FormatError",
    "RunConfig",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
    "gen_shapes",
    "load_checkpoint",
    "load_config",
    "load_tensor",
    "parse_config",
    "save_checkpoint",
    "save_tensor",
    "tensor_bytes",
    "tensor_from_bytes",
]
