"""Assemble MFIR model files from mapped checkpoint tensors."""

import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .container import (
    ExportError,
    LayerSpec,
    ModelFile,
    TensorRecord,
    read_model,
    write_model,
)
from .mapping import ExportMapping, LayerPlan, TensorRule
from .sources import load_checkpoint


@dataclass
class ExportReport:
    arch: str
    input_dim: int
    path: str
    tensors: List[TensorRecord]
    downcast: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_dim": self.input_dim,
            "path": self.path,
            "blob": self.path + ".bin",
            "tensors": [
                {
                    "name": t.name,
                    "shape": list(t.shape),
                    "offset": t.offset,
                    "sha256": t.sha256,
                }
                for t in self.tensors
            ],
            "downcast": list(self.downcast),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def identity_mapping(model: ModelFile) -> ExportMapping:
    """Mapping that re-exports an MFIR model unchanged."""
    layers = []
    rules = []
    for i, layer in enumerate(model.layers):
        if layer.kind == "resblock":
            layers.append(
                LayerPlan(
                    "resblock",
                    n_inner=len(layer.tensors) // 2,
                    skip_source=layer.skip_source or 0,
                )
            )
        else:
            layers.append(LayerPlan(layer.kind))
        for name in layer.tensors:
            rules.append(TensorRule(f"layers.{i}.{name}", i, name))
    return ExportMapping(model.arch_tag, model.input_dim, layers, rules)


def _checked_array(rule: TensorRule, arr: np.ndarray, downcast: List[str]):
    if not np.issubdtype(arr.dtype, np.floating):
        raise ExportError(
            "dtype",
            f"{rule.source!r} has dtype {arr.dtype}; only floating point "
            f"tensors can be exported",
        )
    if arr.dtype.itemsize > 4:
        warnings.warn(
            f"{rule.source!r} is {arr.dtype} and will be downcast to float32",
            UserWarning,
            stacklevel=3,
        )
        downcast.append(rule.source)
    arr = np.asarray(arr, dtype=np.float64)
    if rule.transpose:
        if arr.ndim != 2:
            raise ExportError(
                "shape-rule",
                f"{rule.source!r} has rule transpose but {arr.ndim} axes",
            )
        arr = arr.T
    return arr


def _split_gates(rule: TensorRule, arr: np.ndarray) -> Dict[str, np.ndarray]:
    if arr.shape[0] % 4 != 0:
        raise ExportError(
            "shape-rule",
            f"{rule.source!r} stacks four gates but its first axis has "
            f"size {arr.shape[0]}",
        )
    h = arr.shape[0] // 4
    chunks = {}
    for j, gate in enumerate(rule.gate_order):
        chunks[f"{gate}.{rule.role}"] = arr[j * h : (j + 1) * h]
    return chunks


def _layer_consistent(i: int, plan: LayerPlan, tensors: Dict[str, np.ndarray]):
    def bad(msg):
        raise ExportError("shape-rule", f"layer {i} ({plan.kind}): {msg}")

    def need(name, ndim):
        arr = tensors[name]
        if arr.ndim != ndim:
            bad(f"{name} has {arr.ndim} axes, expected {ndim}")
        return arr

    if plan.kind == "dense":
        w = need("weight", 2)
        b = need("bias", 1)
        if b.shape[0] != w.shape[0]:
            bad(f"bias {b.shape} does not match weight {w.shape}")
    elif plan.kind == "conv":
        f = need("filters", 4)
        b = need("bias", 1)
        if f.shape[2] != f.shape[3]:
            bad(f"filters {f.shape} are not square")
        if b.shape[0] != f.shape[0]:
            bad(f"bias {b.shape} does not match filters {f.shape}")
    elif plan.kind == "rnn":
        w = need("input_weight", 2)
        hw = need("hidden_weight", 2)
        b = need("bias", 1)
        h = w.shape[0]
        if hw.shape != (h, h):
            bad(f"hidden_weight {hw.shape} is not ({h}, {h})")
        if b.shape[0] != h:
            bad(f"bias {b.shape} does not match hidden size {h}")
    elif plan.kind == "lstm":
        h = tensors["input.input_weight"].shape[0]
        d = tensors["input.input_weight"].shape[1]
        for gate in ("input", "forget", "cell", "output"):
            w = need(f"{gate}.input_weight", 2)
            hw = need(f"{gate}.hidden_weight", 2)
            b = need(f"{gate}.bias", 1)
            if w.shape != (h, d):
                bad(f"{gate}.input_weight {w.shape} is not ({h}, {d})")
            if hw.shape != (h, h):
                bad(f"{gate}.hidden_weight {hw.shape} is not ({h}, {h})")
            if b.shape[0] != h:
                bad(f"{gate}.bias {b.shape} does not match hidden size {h}")
    elif plan.kind == "resblock":
        width = tensors["inner0.weight"].shape[0]
        for j in range(plan.n_inner):
            w = need(f"inner{j}.weight", 2)
            b = need(f"inner{j}.bias", 1)
            if w.shape != (width, width):
                bad(f"inner{j}.weight {w.shape} is not ({width}, {width})")
            if b.shape[0] != width:
                bad(f"inner{j}.bias {b.shape} does not match width {width}")


def build_model(
    checkpoint: Dict[str, np.ndarray], mapping: ExportMapping, downcast: List[str]
) -> ModelFile:
    mapped = {r.source for r in mapping.rules}
    missing = sorted(mapped - set(checkpoint))
    if missing:
        raise ExportError(
            "missing-source", f"mapping names absent checkpoint tensors: {missing}"
        )
    unmapped = sorted(set(checkpoint) - mapped)
    if unmapped:
        raise ExportError(
            "unmapped-tensor",
            f"checkpoint tensors with no mapping entry: {unmapped}; map "
            f"every tensor or drop it from the checkpoint",
        )

    parts: Dict[tuple, List[np.ndarray]] = {}
    for rule in mapping.rules:
        arr = _checked_array(rule, checkpoint[rule.source], downcast)
        if rule.stacked_gates:
            pieces = _split_gates(rule, arr)
        else:
            pieces = {rule.role: arr}
        for target, piece in pieces.items():
            parts.setdefault((rule.layer, target), []).append(piece)

    layers = []
    for i, plan in enumerate(mapping.layers):
        tensors = {}
        for name in plan.required_tensors():
            pieces = parts[(i, name)]
            shapes = {p.shape for p in pieces}
            if len(shapes) > 1:
                raise ExportError(
                    "shape-rule",
                    f"layer {i} tensor {name!r} sums sources of differing "
                    f"shapes {sorted(shapes)}",
                )
            tensors[name] = pieces[0] if len(pieces) == 1 else sum(pieces)
        _layer_consistent(i, plan, tensors)
        skip = plan.skip_source if plan.kind == "resblock" else None
        layers.append(LayerSpec(plan.kind, tensors, skip_source=skip))
    return ModelFile(mapping.arch, mapping.input_dim, layers)


def export(
    checkpoint_path: str,
    out_path: str,
    mapping: Optional[ExportMapping] = None,
) -> ExportReport:
    """Convert a checkpoint into an MFIR model file at out_path.

    With no mapping the checkpoint must itself be an MFIR file, and the
    export is an identity re-export (always byte-stable: exporting the
    result again produces identical files).
    """
    if mapping is None:
        if os.path.splitext(checkpoint_path)[1].lower() != ".mfir":
            raise ExportError(
                "bad-mapping",
                f"{checkpoint_path} needs a mapping; only .mfir sources "
                f"can be exported without one",
            )
        mapping = identity_mapping(read_model(checkpoint_path))
    checkpoint = load_checkpoint(checkpoint_path)
    downcast: List[str] = []
    model = build_model(checkpoint, mapping, downcast)
    records = write_model(model, out_path)
    return ExportReport(
        arch=model.arch_tag,
        input_dim=model.input_dim,
        path=out_path,
        tensors=records,
        downcast=downcast,
    )
