"""MFIR v1: the on-disk model interchange format.

A model is stored as two files: a UTF-8 JSON manifest at the given path and
a binary blob at the same path with ".bin" appended. The blob is the
concatenation of all tensors as row-major little-endian float32, no padding;
manifest offsets are byte offsets into the blob. Tensors are promoted to
float64 in memory on load.

Manifest schema:
    {"version": 1, "arch_tag": ..., "input_dim": ...,
     "layers": [{"kind": "dense|conv|rnn|lstm|resblock", "shape": [...],
                 "tensors": [{"name": ..., "offset": ..., "shape": [...]}]}]}
"""

import json
import os

import numpy as np

from .model import (
    ARCH_TAGS,
    LSTM_GATE_NAMES,
    ConvLayer,
    DenseLayer,
    LstmLayer,
    Model,
    RecurrentLayer,
    ResidualBlock,
    validate,
)

__all__ = ["MfirError", "save_model", "load_model", "save_couplings", "load_couplings"]


class MfirError(Exception):
    """Serialization failure with a stable error code.

    Codes: missing-manifest, bad-manifest, missing-blob, bad-offset,
    bad-shape, non-finite, invalid-model, io.
    """

    def __init__(self, code, message):
        self.code = code
        super().__init__(f"[{code}] {message}")


def _blob_path(path):
    return str(path) + ".bin"


def _tensor_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _BlobWriter:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def add(self, name, arr):
        data = _tensor_bytes(arr)
        entry = {"name": name, "offset": self.offset, "shape": list(arr.shape)}
        self.chunks.append(data)
        self.offset += len(data)
        return entry


def _layer_manifest(layer, writer):
    if isinstance(layer, DenseLayer):
        return {
            "kind": "dense",
            "shape": [layer.out_dim, layer.in_dim],
            "tensors": [
                writer.add("weight", layer.weight),
                writer.add("bias", layer.bias),
            ],
        }
    if isinstance(layer, ConvLayer):
        return {
            "kind": "conv",
            "shape": list(layer.filters.shape),
            "tensors": [
                writer.add("filters", layer.filters),
                writer.add("bias", layer.bias),
            ],
        }
    if isinstance(layer, RecurrentLayer):
        return {
            "kind": "rnn",
            "shape": [layer.hidden_dim, layer.in_dim],
            "tensors": [
                writer.add("input_weight", layer.input_weight),
                writer.add("hidden_weight", layer.hidden_weight),
                writer.add("bias", layer.bias),
            ],
        }
    if isinstance(layer, LstmLayer):
        tensors = []
        for name, gate in zip(LSTM_GATE_NAMES, layer.gates):
            tensors.append(writer.add(f"{name}.input_weight", gate.input_weight))
            tensors.append(writer.add(f"{name}.hidden_weight", gate.hidden_weight))
            tensors.append(writer.add(f"{name}.bias", gate.bias))
        return {
            "kind": "lstm",
            "shape": [layer.hidden_dim, layer.in_dim],
            "tensors": tensors,
        }
    if isinstance(layer, ResidualBlock):
        tensors = []
        for j, inner in enumerate(layer.inner):
            tensors.append(writer.add(f"inner{j}.weight", inner.weight))
            tensors.append(writer.add(f"inner{j}.bias", inner.bias))
        return {
            "kind": "resblock",
            "shape": [layer.out_dim, len(layer.inner), layer.skip_source],
            "tensors": tensors,
        }
    raise MfirError("bad-shape", f"unknown layer type {type(layer).__name__}")


def save_model(model: Model, path) -> None:
    """Write the manifest to `path` and the blob to `path` + ".bin"."""
    violations = validate(model)
    if violations:
        raise MfirError("invalid-model", "; ".join(violations))
    writer = _BlobWriter()
    manifest = {
        "version": 1,
        "arch_tag": model.arch_tag,
        "input_dim": int(model.input_dim),
        "layers": [_layer_manifest(layer, writer) for layer in model.layers],
    }
    try:
        with open(_blob_path(path), "wb") as f:
            for chunk in writer.chunks:
                f.write(chunk)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise MfirError("io", str(e)) from e


class _BlobReader:
    def __init__(self, blob):
        self.blob = blob

    def read(self, entry):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        end = offset + 4 * count
        if offset < 0 or end > len(self.blob):
            raise MfirError(
                "bad-offset",
                f"tensor {entry.get('name')!r} spans bytes [{offset}, {end}) but "
                f"blob has {len(self.blob)}",
            )
        arr = np.frombuffer(self.blob, dtype="<f4", count=count, offset=offset)
        return arr.reshape(shape).astype(np.float64)


def _tensor_map(layer_entry, reader, expected):
    found = {t["name"]: t for t in layer_entry.get("tensors", [])}
    missing = [n for n in expected if n not in found]
    if missing:
        raise MfirError(
            "bad-manifest",
            f"layer kind {layer_entry.get('kind')!r} missing tensors {missing}",
        )
    return {n: reader.read(found[n]) for n in expected}


def _layer_from_manifest(entry, reader):
    kind = entry.get("kind")
    if kind == "dense":
        t = _tensor_map(entry, reader, ["weight", "bias"])
        return DenseLayer(t["weight"], t["bias"])
    if kind == "conv":
        t = _tensor_map(entry, reader, ["filters", "bias"])
        return ConvLayer(t["filters"], t["bias"])
    if kind == "rnn":
        t = _tensor_map(entry, reader, ["input_weight", "hidden_weight", "bias"])
        return RecurrentLayer(t["input_weight"], t["hidden_weight"], t["bias"])
    if kind == "lstm":
        names = []
        for g in LSTM_GATE_NAMES:
            names += [f"{g}.input_weight", f"{g}.hidden_weight", f"{g}.bias"]
        t = _tensor_map(entry, reader, names)
        gates = tuple(
            RecurrentLayer(
                t[f"{g}.input_weight"], t[f"{g}.hidden_weight"], t[f"{g}.bias"]
            )
            for g in LSTM_GATE_NAMES
        )
        return LstmLayer(gates)
    if kind == "resblock":
        shape = entry.get("shape", [])
        if len(shape) != 3:
            raise MfirError("bad-manifest", f"resblock shape must be [width, n, skip], got {shape}")
        n_inner, skip_source = int(shape[1]), int(shape[2])
        names = []
        for j in range(n_inner):
            names += [f"inner{j}.weight", f"inner{j}.bias"]
        t = _tensor_map(entry, reader, names)
        inner = [DenseLayer(t[f"inner{j}.weight"], t[f"inner{j}.bias"]) for j in range(n_inner)]
        return ResidualBlock(inner, skip_source)
    raise MfirError("bad-manifest", f"unknown layer kind {kind!r}")


def load_model(path) -> Model:
    """Read a manifest + blob pair and return a validated Model."""
    if not os.path.exists(path):
        raise MfirError("missing-manifest", f"no manifest at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MfirError("bad-manifest", f"cannot parse manifest {path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("version") != 1:
        raise MfirError("bad-manifest", f"unsupported manifest version in {path}")
    for key in ("arch_tag", "input_dim", "layers"):
        if key not in manifest:
            raise MfirError("bad-manifest", f"manifest missing key {key!r}")
    if manifest["arch_tag"] not in ARCH_TAGS:
        raise MfirError("bad-manifest", f"unknown arch_tag {manifest['arch_tag']!r}")

    blob_path = _blob_path(path)
    if not os.path.exists(blob_path):
        raise MfirError("missing-blob", f"no blob at {blob_path}")
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise MfirError("io", str(e)) from e

    reader = _BlobReader(blob)
    layers = [_layer_from_manifest(entry, reader) for entry in manifest["layers"]]
    model = Model(layers, int(manifest["input_dim"]), manifest["arch_tag"])

    flat = []
    for entry in manifest["layers"]:
        for t in entry.get("tensors", []):
            flat.append(reader.read(t))
    if not all(np.all(np.isfinite(a)) for a in flat):
        raise MfirError("non-finite", f"blob for {path} holds non-finite values")

    violations = validate(model)
    if violations:
        raise MfirError("invalid-model", "; ".join(violations))
    return model


def save_couplings(sites, per_model, path) -> None:
    """Write fusion couplings as an MFIR-style sidecar.

    sites: list of site labels (one per fused layer position);
    per_model: list over input models of lists of coupling matrices, one per
    site, each (target_width, model_width). Stored as float32.
    """
    writer = _BlobWriter()
    models = []
    for i, couplings in enumerate(per_model):
        if len(couplings) != len(sites):
            raise MfirError(
                "bad-shape",
                f"model {i} has {len(couplings)} couplings for {len(sites)} sites",
            )
        entries = []
        for site, mat in zip(sites, couplings):
            entry = writer.add(f"model{i}.{site}", np.asarray(mat))
            entry["site"] = site
            entries.append(entry)
        models.append({"index": i, "couplings": entries})
    manifest = {"version": 1, "kind": "couplings", "sites": list(sites), "models": models}
    try:
        with open(_blob_path(path), "wb") as f:
            for chunk in writer.chunks:
                f.write(chunk)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise MfirError("io", str(e)) from e


def load_couplings(path):
    """Read a coupling sidecar; returns (sites, per_model matrices)."""
    if not os.path.exists(path):
        raise MfirError("missing-manifest", f"no sidecar manifest at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MfirError("bad-manifest", f"cannot parse sidecar {path}: {e}") from e
    if manifest.get("kind") != "couplings" or manifest.get("version") != 1:
        raise MfirError("bad-manifest", f"{path} is not a v1 coupling sidecar")
    blob_path = _blob_path(path)
    if not os.path.exists(blob_path):
        raise MfirError("missing-blob", f"no blob at {blob_path}")
    with open(blob_path, "rb") as f:
        reader = _BlobReader(f.read())
    sites = manifest["sites"]
    per_model = []
    for m in manifest["models"]:
        per_model.append([reader.read(t) for t in m["couplings"]])
    return sites, per_model
