"""Typed model representation: the substrate fusion and evaluation operate on.

A Model is an ordered list of layers plus an input dimension and an
architecture tag. Activations are fixed by the tag (ReLU for feedforward
tags, tanh for recurrent ones), so they are derived, never stored.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

__all__ = [
    "DenseLayer",
    "ConvLayer",
    "RecurrentLayer",
    "LstmLayer",
    "ResidualBlock",
    "Model",
    "ARCH_TAGS",
    "LSTM_GATE_NAMES",
    "validate",
]

ARCH_TAGS = ("mlp", "cnn", "resmlp", "rnn", "lstm")

# fixed gate order; the file format and the shared-coupling cost sum rely on it
LSTM_GATE_NAMES = ("input", "forget", "cell", "output")


def _arr(x):
    return np.asarray(x, dtype=np.float64)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = _arr(self.weight)
        self.bias = _arr(self.bias)

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]


@dataclass
class ConvLayer:
    """Stride-1 zero-padded square convolution; padding preserves the
    spatial size for every filter width."""

    filters: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self):
        self.filters = _arr(self.filters)
        self.bias = _arr(self.bias)

    @property
    def out_channels(self):
        return self.filters.shape[0]

    @property
    def in_channels(self):
        return self.filters.shape[1]

    @property
    def kernel(self):
        return self.filters.shape[2]


@dataclass
class RecurrentLayer:
    input_weight: np.ndarray  # (hidden, in)
    hidden_weight: np.ndarray  # (hidden, hidden)
    bias: np.ndarray  # (hidden,)

    def __post_init__(self):
        self.input_weight = _arr(self.input_weight)
        self.hidden_weight = _arr(self.hidden_weight)
        self.bias = _arr(self.bias)

    @property
    def hidden_dim(self):
        return self.input_weight.shape[0]

    @property
    def in_dim(self):
        return self.input_weight.shape[1]


@dataclass
class LstmLayer:
    """Four gates in the fixed order (input, forget, cell, output), each a
    (input_weight, hidden_weight, bias) triple over the same hidden size."""

    gates: Tuple[RecurrentLayer, RecurrentLayer, RecurrentLayer, RecurrentLayer]

    def __post_init__(self):
        self.gates = tuple(self.gates)

    @property
    def hidden_dim(self):
        return self.gates[0].hidden_dim

    @property
    def in_dim(self):
        return self.gates[0].in_dim


@dataclass
class ResidualBlock:
    """Dense chain plus a skip connection.

    skip_source indexes the tensor added before the block output: 0 is the
    block input, i >= 1 is the output of inner layer i. The block output is
    relu(skip + inner_chain(x)) where the last inner layer is left linear
    before the addition.
    """

    inner: List[DenseLayer]
    skip_source: int = 0

    @property
    def in_dim(self):
        return self.inner[0].in_dim

    @property
    def out_dim(self):
        return self.inner[-1].out_dim


@dataclass
class Model:
    layers: list
    input_dim: int
    arch_tag: str
    meta: dict = field(default_factory=dict)

    @property
    def activation(self):
        return "tanh" if self.arch_tag in ("rnn", "lstm") else "relu"

    def copy(self):
        return Model(
            layers=[_copy_layer(l) for l in self.layers],
            input_dim=self.input_dim,
            arch_tag=self.arch_tag,
            meta=dict(self.meta),
        )


def _copy_layer(layer):
    if isinstance(layer, DenseLayer):
        return DenseLayer(layer.weight.copy(), layer.bias.copy())
    if isinstance(layer, ConvLayer):
        return ConvLayer(layer.filters.copy(), layer.bias.copy())
    if isinstance(layer, RecurrentLayer):
        return RecurrentLayer(
            layer.input_weight.copy(), layer.hidden_weight.copy(), layer.bias.copy()
        )
    if isinstance(layer, LstmLayer):
        return LstmLayer(tuple(_copy_layer(g) for g in layer.gates))
    if isinstance(layer, ResidualBlock):
        return ResidualBlock([_copy_layer(l) for l in layer.inner], layer.skip_source)
    raise TypeError(f"unknown layer type {type(layer)!r}")


def _finite(*arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)


def _check_dense(layer, idx, report):
    if layer.weight.ndim != 2:
        report.append(f"layer {idx}: dense weight must be 2-d, got {layer.weight.shape}")
        return
    if layer.weight.shape[0] < 1 or layer.weight.shape[1] < 1:
        report.append(f"layer {idx}: dense weight has empty dimension {layer.weight.shape}")
    if layer.bias.shape != (layer.weight.shape[0],):
        report.append(
            f"layer {idx}: bias shape {layer.bias.shape} does not match out dim "
            f"{layer.weight.shape[0]}"
        )
    if not _finite(layer.weight, layer.bias):
        report.append(f"layer {idx}: non-finite entries")


def _check_recurrent(layer, idx, report, gate=None):
    tag = f"layer {idx}" if gate is None else f"layer {idx} gate {gate}"
    h = layer.input_weight.shape[0]
    if layer.hidden_weight.shape != (h, h):
        report.append(
            f"{tag}: hidden weight must be square ({h}, {h}), got {layer.hidden_weight.shape}"
        )
    if layer.bias.shape != (h,):
        report.append(f"{tag}: bias shape {layer.bias.shape} does not match hidden {h}")
    if not _finite(layer.input_weight, layer.hidden_weight, layer.bias):
        report.append(f"{tag}: non-finite entries")


def validate(model: Model) -> list:
    """Return a list of invariant violations; empty iff the model is valid."""
    report = []
    if model.arch_tag not in ARCH_TAGS:
        report.append(f"unknown arch_tag {model.arch_tag!r}")
        return report
    if not model.layers:
        report.append("model has no layers")
        return report
    if model.input_dim < 1:
        report.append(f"input_dim must be >= 1, got {model.input_dim}")

    kinds = {
        "mlp": (DenseLayer,),
        "cnn": (ConvLayer, DenseLayer),
        "resmlp": (DenseLayer, ResidualBlock),
        "rnn": (RecurrentLayer, DenseLayer),
        "lstm": (LstmLayer, DenseLayer),
    }[model.arch_tag]
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, kinds):
            report.append(
                f"layer {i}: type {type(layer).__name__} not allowed for arch "
                f"{model.arch_tag}"
            )
    if report:
        return report

    prev = model.input_dim
    seen_dense_after_conv = False
    for i, layer in enumerate(model.layers):
        if isinstance(layer, DenseLayer):
            _check_dense(layer, i, report)
            if layer.weight.ndim != 2:
                return report
            expected = prev
            if model.arch_tag == "cnn" and not seen_dense_after_conv and i > 0:
                # first dense after the conv stack sees channels * spatial positions
                if layer.in_dim % prev != 0:
                    report.append(
                        f"layer {i}: dense in dim {layer.in_dim} not a multiple of "
                        f"channel count {prev}"
                    )
                seen_dense_after_conv = True
                prev = layer.out_dim
                continue
            if layer.in_dim != expected:
                report.append(
                    f"layer {i}: in dim {layer.in_dim} does not chain from previous "
                    f"width {expected}"
                )
            prev = layer.out_dim
        elif isinstance(layer, ConvLayer):
            if layer.filters.ndim != 4 or layer.filters.shape[2] != layer.filters.shape[3]:
                report.append(f"layer {i}: filters must be (out, in, k, k), got {layer.filters.shape}")
                return report
            if layer.kernel < 1:
                report.append(f"layer {i}: kernel must be >= 1")
            if layer.bias.shape != (layer.out_channels,):
                report.append(
                    f"layer {i}: bias shape {layer.bias.shape} does not match out "
                    f"channels {layer.out_channels}"
                )
            if not _finite(layer.filters, layer.bias):
                report.append(f"layer {i}: non-finite entries")
            if layer.in_channels != prev:
                report.append(
                    f"layer {i}: in channels {layer.in_channels} does not chain from "
                    f"previous width {prev}"
                )
            prev = layer.out_channels
        elif isinstance(layer, RecurrentLayer):
            _check_recurrent(layer, i, report)
            if layer.in_dim != prev:
                report.append(
                    f"layer {i}: recurrent in dim {layer.in_dim} does not chain from "
                    f"previous width {prev}"
                )
            prev = layer.hidden_dim
        elif isinstance(layer, LstmLayer):
            if len(layer.gates) != 4:
                report.append(f"layer {i}: LSTM needs exactly 4 gates, got {len(layer.gates)}")
                return report
            h0, in0 = layer.gates[0].hidden_dim, layer.gates[0].in_dim
            for g, gate in enumerate(layer.gates):
                _check_recurrent(gate, i, report, gate=g)
                if gate.input_weight.shape != (h0, in0):
                    report.append(
                        f"layer {i} gate {g}: shape {gate.input_weight.shape} differs "
                        f"from gate 0 shape {(h0, in0)}"
                    )
            if in0 != prev:
                report.append(
                    f"layer {i}: LSTM in dim {in0} does not chain from previous width {prev}"
                )
            prev = h0
        elif isinstance(layer, ResidualBlock):
            if not layer.inner:
                report.append(f"layer {i}: residual block has no inner layers")
                return report
            for j, inner in enumerate(layer.inner):
                _check_dense(inner, f"{i}.{j}", report)
            if layer.in_dim != prev:
                report.append(
                    f"layer {i}: block in dim {layer.in_dim} does not chain from "
                    f"previous width {prev}"
                )
            w = layer.in_dim
            for j in range(1, len(layer.inner)):
                if layer.inner[j].in_dim != layer.inner[j - 1].out_dim:
                    report.append(
                        f"layer {i}: inner chain break between {j - 1} and {j}"
                    )
            if not (0 <= layer.skip_source < len(layer.inner)):
                report.append(f"layer {i}: skip_source {layer.skip_source} out of range")
            else:
                src_w = w if layer.skip_source == 0 else layer.inner[layer.skip_source - 1].out_dim
                if src_w != layer.out_dim:
                    report.append(
                        f"layer {i}: skip source width {src_w} does not match block "
                        f"output {layer.out_dim}"
                    )
            prev = layer.out_dim
    return report
