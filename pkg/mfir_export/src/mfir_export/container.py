"""Reading and writing MFIR v1 model files.

An MFIR model is a UTF-8 JSON manifest plus a binary blob at the manifest
path with ".bin" appended. The blob concatenates all tensors as row-major
little-endian float32 with no padding; manifest offsets are byte offsets.
The manifest holds {"version": 1, "arch_tag", "input_dim", "layers": [...]},
each layer {"kind", "shape", "tensors": [{"name", "offset", "shape"}]}.

This module is self-contained on purpose: the exporter talks to the fusion
toolkit only through this file format and its command line.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np

ARCH_TAGS = ("mlp", "cnn", "resmlp", "rnn", "lstm")
LSTM_GATE_NAMES = ("input", "forget", "cell", "output")

# manifest tensor names per layer kind, in blob order
KIND_TENSORS = {
    "dense": ("weight", "bias"),
    "conv": ("filters", "bias"),
    "rnn": ("input_weight", "hidden_weight", "bias"),
    "lstm": tuple(
        f"{g}.{part}"
        for g in LSTM_GATE_NAMES
        for part in ("input_weight", "hidden_weight", "bias")
    ),
}


class ExportError(Exception):
    """Exporter failure with a stable error code.

    Codes: bad-mapping, unsupported-kind, unmapped-tensor, missing-source,
    shape-rule, batch-norm, dtype, bad-container, io.
    """

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"[{code}] {message}")


def resblock_tensor_names(n_inner: int):
    names = []
    for j in range(n_inner):
        names += [f"inner{j}.weight", f"inner{j}.bias"]
    return tuple(names)


def _layer_shape(kind: str, tensors: dict, skip_source=None):
    """The manifest "shape" summary for a layer, derived from its tensors."""
    if kind == "dense":
        return [int(tensors["weight"].shape[0]), int(tensors["weight"].shape[1])]
    if kind == "conv":
        return [int(s) for s in tensors["filters"].shape]
    if kind == "rnn":
        w = tensors["input_weight"]
        return [int(w.shape[0]), int(w.shape[1])]
    if kind == "lstm":
        w = tensors["input.input_weight"]
        return [int(w.shape[0]), int(w.shape[1])]
    if kind == "resblock":
        n_inner = len(tensors) // 2
        return [int(tensors["inner0.weight"].shape[0]), n_inner, int(skip_source)]
    raise ExportError("unsupported-kind", f"unknown layer kind {kind!r}")


@dataclass
class LayerSpec:
    """One manifest layer: its kind, ordered tensors, and resblock wiring."""

    kind: str
    tensors: dict  # name -> float32 ndarray, insertion order = blob order
    skip_source: int | None = None


@dataclass
class TensorRecord:
    name: str  # "layers.{i}.{tensor}"
    shape: tuple
    offset: int
    sha256: str


@dataclass
class ModelFile:
    arch_tag: str
    input_dim: int
    layers: List[LayerSpec] = field(default_factory=list)


def expected_tensor_names(layer: LayerSpec):
    if layer.kind == "resblock":
        n_inner = len(layer.tensors) // 2
        return resblock_tensor_names(n_inner)
    try:
        return KIND_TENSORS[layer.kind]
    except KeyError:
        raise ExportError("unsupported-kind", f"unknown layer kind {layer.kind!r}")


def write_model(model: ModelFile, path: str) -> List[TensorRecord]:
    """Write manifest + blob; returns one record per tensor written."""
    if model.arch_tag not in ARCH_TAGS:
        raise ExportError("unsupported-kind", f"unknown arch {model.arch_tag!r}")
    records = []
    chunks = []
    offset = 0
    layer_entries = []
    for i, layer in enumerate(model.layers):
        entries = []
        for name in expected_tensor_names(layer):
            arr = np.ascontiguousarray(layer.tensors[name], dtype="<f4")
            data = arr.tobytes()
            entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            records.append(
                TensorRecord(
                    name=f"layers.{i}.{name}",
                    shape=tuple(arr.shape),
                    offset=offset,
                    sha256=hashlib.sha256(data).hexdigest(),
                )
            )
            chunks.append(data)
            offset += len(data)
        layer_entries.append(
            {
                "kind": layer.kind,
                "shape": _layer_shape(layer.kind, layer.tensors, layer.skip_source),
                "tensors": entries,
            }
        )
    manifest = {
        "version": 1,
        "arch_tag": model.arch_tag,
        "input_dim": int(model.input_dim),
        "layers": layer_entries,
    }
    try:
        with open(str(path) + ".bin", "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise ExportError("io", str(e)) from e
    return records


def read_model(path: str) -> ModelFile:
    """Parse a manifest + blob pair. Tensors stay float32."""
    if not os.path.exists(path):
        raise ExportError("bad-container", f"no manifest at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ExportError("bad-container", f"cannot parse manifest {path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("version") != 1:
        raise ExportError("bad-container", f"{path} is not a v1 model manifest")
    blob_path = str(path) + ".bin"
    if not os.path.exists(blob_path):
        raise ExportError("bad-container", f"no blob at {blob_path}")
    with open(blob_path, "rb") as f:
        blob = f.read()

    layers = []
    for entry in manifest.get("layers", []):
        kind = entry.get("kind")
        tensors = {}
        for t in entry.get("tensors", []):
            shape = tuple(int(s) for s in t["shape"])
            count = int(np.prod(shape)) if shape else 1
            off = int(t["offset"])
            if off < 0 or off + 4 * count > len(blob):
                raise ExportError(
                    "bad-container",
                    f"tensor {t.get('name')!r} runs past the end of the blob",
                )
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            tensors[t["name"]] = arr.reshape(shape)
        skip = None
        if kind == "resblock":
            skip = int(entry.get("shape", [0, 0, 0])[2])
        layers.append(LayerSpec(kind=kind, tensors=tensors, skip_source=skip))
    return ModelFile(
        arch_tag=manifest.get("arch_tag"),
        input_dim=int(manifest.get("input_dim", 0)),
        layers=layers,
    )
