"""Checkpoint exporter for the MFIR model file format."""

from .container import (
    ARCH_TAGS,
    LSTM_GATE_NAMES,
    ExportError,
    LayerSpec,
    ModelFile,
    TensorRecord,
    read_model,
    write_model,
)
from .export import ExportReport, export, identity_mapping
from .mapping import ExportMapping, LayerPlan, TensorRule, load_mapping, parse_mapping
from .sources import load_checkpoint

__all__ = [
    "ARCH_TAGS",
    "LSTM_GATE_NAMES",
    "ExportError",
    "ExportMapping",
    "ExportReport",
    "LayerPlan",
    "LayerSpec",
    "ModelFile",
    "TensorRecord",
    "TensorRule",
    "export",
    "identity_mapping",
    "load_checkpoint",
    "load_mapping",
    "parse_mapping",
    "read_model",
    "write_model",
]
