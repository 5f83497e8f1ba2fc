"""Export mappings: how source checkpoint tensors become MFIR tensors.

A mapping is a JSON object:

    {
      "arch": "lstm",
      "input_dim": 3,
      "layers": [{"kind": "lstm"}, {"kind": "dense"}],
      "tensors": {
        "rnn.weight_ih_l0": {"layer": 0, "role": "input_weight",
                              "gate_order": ["input", "forget", "cell", "output"]},
        "rnn.bias_ih_l0":   {"layer": 0, "role": "bias", "rule": "add",
                              "gate_order": ["input", "forget", "cell", "output"]},
        ...
        "head.weight":      {"layer": 1, "role": "weight"},
        "head.bias":        {"layer": 1, "role": "bias"}
      }
    }

Each entry names the target layer index, the tensor role within that layer,
an optional shape rule, and, for stacked recurrent-gate tensors, the order
in which the source stacks the four gates.

Roles are the MFIR tensor names for the layer kind ("weight"/"bias" for
dense, "filters"/"bias" for conv, "input_weight"/"hidden_weight"/"bias"
for rnn, "inner{j}.weight"/"inner{j}.bias" for resblock). For lstm layers
a role may be either a per-gate name ("forget.bias") or a bare part name
("bias") for a source that stacks all four gates along the first axis, in
which case gate_order says which source block is which gate.

Rules: "none" (default), "transpose" (swap the axes of a matrix),
"add" (sum this source into the target; every source feeding that target
must carry it). "transpose+add" combines both.

Resblock layers take "inner" (inner layer count) and "skip_source" keys.
"""

import json
from dataclasses import dataclass, field
from typing import List, Optional

from .container import (
    ARCH_TAGS,
    KIND_TENSORS,
    LSTM_GATE_NAMES,
    ExportError,
    resblock_tensor_names,
)

VALID_RULES = ("none", "transpose", "add", "transpose+add")
LSTM_PARTS = ("input_weight", "hidden_weight", "bias")


@dataclass
class TensorRule:
    source: str
    layer: int
    role: str
    rule: str = "none"
    gate_order: Optional[tuple] = None

    @property
    def transpose(self) -> bool:
        return "transpose" in self.rule

    @property
    def accumulate(self) -> bool:
        return "add" in self.rule

    @property
    def stacked_gates(self) -> bool:
        return self.gate_order is not None

    def targets(self):
        """The MFIR tensor names within the layer this source covers."""
        if self.stacked_gates:
            return tuple(f"{g}.{self.role}" for g in LSTM_GATE_NAMES)
        return (self.role,)


@dataclass
class LayerPlan:
    kind: str
    n_inner: int = 0
    skip_source: int = 0

    def required_tensors(self):
        if self.kind == "resblock":
            return resblock_tensor_names(self.n_inner)
        try:
            return KIND_TENSORS[self.kind]
        except KeyError:
            raise ExportError("unsupported-kind", f"unknown layer kind {self.kind!r}")


@dataclass
class ExportMapping:
    arch: str
    input_dim: int
    layers: List[LayerPlan]
    rules: List[TensorRule] = field(default_factory=list)


def _parse_rule(source: str, raw: dict, n_layers: int, layer_kinds) -> TensorRule:
    if not isinstance(raw, dict):
        raise ExportError("bad-mapping", f"entry for {source!r} must be an object")
    try:
        layer = int(raw["layer"])
        role = str(raw["role"])
    except (KeyError, TypeError, ValueError):
        raise ExportError("bad-mapping", f"entry for {source!r} needs layer and role")
    if not 0 <= layer < n_layers:
        raise ExportError(
            "bad-mapping", f"{source!r} targets layer {layer} of {n_layers}"
        )
    rule = str(raw.get("rule", "none"))
    if rule not in VALID_RULES:
        raise ExportError(
            "bad-mapping", f"{source!r} has unknown rule {rule!r}; use {VALID_RULES}"
        )
    gate_order = raw.get("gate_order")
    if gate_order is not None:
        if layer_kinds[layer] != "lstm":
            raise ExportError(
                "bad-mapping", f"{source!r} sets gate_order on a non-lstm layer"
            )
        if sorted(gate_order) != sorted(LSTM_GATE_NAMES):
            raise ExportError(
                "bad-mapping",
                f"{source!r} gate_order must be a permutation of "
                f"{list(LSTM_GATE_NAMES)}, got {gate_order}",
            )
        if role not in LSTM_PARTS:
            raise ExportError(
                "bad-mapping",
                f"{source!r} stacks gates, so role must be one of {LSTM_PARTS}",
            )
        gate_order = tuple(gate_order)
    return TensorRule(source, layer, role, rule, gate_order)


def parse_mapping(data: dict) -> ExportMapping:
    if not isinstance(data, dict):
        raise ExportError("bad-mapping", "mapping must be a JSON object")
    arch = data.get("arch")
    if arch not in ARCH_TAGS:
        raise ExportError(
            "unsupported-kind", f"arch must be one of {list(ARCH_TAGS)}, got {arch!r}"
        )
    try:
        input_dim = int(data["input_dim"])
    except (KeyError, TypeError, ValueError):
        raise ExportError("bad-mapping", "mapping needs an integer input_dim")

    raw_layers = data.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ExportError("bad-mapping", "mapping needs a non-empty layers list")
    layers = []
    for i, entry in enumerate(raw_layers):
        kind = entry.get("kind") if isinstance(entry, dict) else None
        if kind == "resblock":
            layers.append(
                LayerPlan(
                    kind,
                    n_inner=int(entry.get("inner", 0)),
                    skip_source=int(entry.get("skip_source", 0)),
                )
            )
            if layers[-1].n_inner < 1:
                raise ExportError(
                    "bad-mapping", f"layer {i}: resblock needs inner >= 1"
                )
        elif kind in KIND_TENSORS:
            layers.append(LayerPlan(kind))
        else:
            raise ExportError("unsupported-kind", f"layer {i}: unknown kind {kind!r}")

    raw_tensors = data.get("tensors")
    if not isinstance(raw_tensors, dict) or not raw_tensors:
        raise ExportError("bad-mapping", "mapping needs a tensors table")
    kinds = [l.kind for l in layers]
    rules = [
        _parse_rule(src, raw, len(layers), kinds)
        for src, raw in sorted(raw_tensors.items())
    ]

    _check_coverage(layers, rules)
    return ExportMapping(arch, input_dim, layers, rules)


def _check_coverage(layers, rules):
    """Every required MFIR tensor covered exactly once (add-groups count
    as one covering between them)."""
    covered = {}
    for r in rules:
        plan = layers[r.layer]
        valid = plan.required_tensors()
        for target in r.targets():
            if target not in valid:
                raise ExportError(
                    "bad-mapping",
                    f"{r.source!r}: layer {r.layer} ({plan.kind}) has no "
                    f"tensor {target!r}",
                )
            covered.setdefault((r.layer, target), []).append(r)
    for key, sources in covered.items():
        if len(sources) > 1 and not all(s.accumulate for s in sources):
            names = [s.source for s in sources]
            raise ExportError(
                "bad-mapping",
                f"layer {key[0]} tensor {key[1]!r} is covered by {names}; "
                f"multiple sources must all use rule \"add\"",
            )
    for i, plan in enumerate(layers):
        for target in plan.required_tensors():
            if (i, target) not in covered:
                raise ExportError(
                    "bad-mapping", f"layer {i} tensor {target!r} has no source"
                )


def load_mapping(path: str) -> ExportMapping:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ExportError("io", f"cannot read mapping {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ExportError("bad-mapping", f"mapping {path} is not valid JSON: {e}") from e
    return parse_mapping(data)
