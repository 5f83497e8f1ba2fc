"""Readers for the checkpoint formats the exporter accepts.

Every reader returns a flat dict of name -> numpy array. Torch files need
the optional torch dependency; .npz and .mfir only need numpy.
"""

import os
from typing import Dict

import numpy as np

from .container import ExportError, ModelFile, read_model

BATCH_NORM_MARKERS = ("running_mean", "running_var", "num_batches_tracked")


def _reject_batch_norm(names):
    for name in names:
        lowered = name.lower()
        for marker in BATCH_NORM_MARKERS:
            if marker in lowered:
                raise ExportError(
                    "batch-norm",
                    f"checkpoint tensor {name!r} belongs to a batch-norm "
                    f"layer; fold normalization into the weights before "
                    f"exporting",
                )


def _load_npz(path: str) -> Dict[str, np.ndarray]:
    try:
        with np.load(path) as data:
            return {name: np.asarray(data[name]) for name in data.files}
    except (OSError, ValueError) as e:
        raise ExportError("io", f"cannot read {path}: {e}") from e


def _load_torch(path: str) -> Dict[str, np.ndarray]:
    try:
        import torch
    except ImportError:
        raise ExportError(
            "io",
            f"{path} looks like a torch checkpoint but torch is not "
            f"installed; install mfir-export[torch]",
        )
    try:
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except TypeError:  # older torch without weights_only
            state = torch.load(path, map_location="cpu")
    except Exception as e:
        raise ExportError("io", f"cannot read {path}: {e}") from e
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise ExportError("io", f"{path} does not contain a state dict")
    out = {}
    for name, value in state.items():
        if not torch.is_tensor(value):
            continue  # skip non-tensor entries like step counters
        out[str(name)] = value.detach().cpu().numpy()
    return out


def _load_mfir(path: str) -> Dict[str, np.ndarray]:
    model = read_model(path)
    return flatten_mfir(model)


def flatten_mfir(model: ModelFile) -> Dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(model.layers):
        for name, arr in layer.tensors.items():
            out[f"layers.{i}.{name}"] = arr
    return out


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    """Read a checkpoint into a flat name -> array dict.

    Dispatches on extension: .npz, .pt/.pth (torch), .mfir. Rejects
    checkpoints that contain batch-norm statistics.
    """
    if not os.path.exists(path):
        raise ExportError("io", f"checkpoint {path} does not exist")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".npz":
        tensors = _load_npz(path)
    elif ext in (".pt", ".pth"):
        tensors = _load_torch(path)
    elif ext == ".mfir":
        tensors = _load_mfir(path)
    else:
        raise ExportError(
            "io", f"unrecognized checkpoint extension {ext!r} on {path}"
        )
    if not tensors:
        raise ExportError("io", f"checkpoint {path} contains no tensors")
    _reject_batch_norm(tensors)
    return tensors
