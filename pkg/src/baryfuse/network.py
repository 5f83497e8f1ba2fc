"""Forward evaluation: logits and accuracy for every supported architecture.

Conventions: ReLU between feedforward layers, linear output layer. Residual
blocks apply relu(skip + chain(x)) with the last inner layer left linear
before the addition. Convolutions are stride 1 with zero padding that
preserves the spatial size, followed by ReLU; the flatten before the dense
head is channel-major. Recurrent nets run h_t = tanh(W x_t + H h_{t-1} + b)
from h_0 = 0; LSTMs use the standard gate equations in the fixed gate order
(input, forget, cell, output); the dense head reads the final hidden state.
"""

import numpy as np

from .model import (
    ConvLayer,
    DenseLayer,
    LstmLayer,
    Model,
    RecurrentLayer,
    ResidualBlock,
)

__all__ = ["forward", "accuracy", "predict"]


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _dense(layer: DenseLayer, x):
    return x @ layer.weight.T + layer.bias


def _block(layer: ResidualBlock, x):
    acts = [x]
    z = x
    for j, lay in enumerate(layer.inner):
        z = _dense(lay, z)
        if j < len(layer.inner) - 1:
            z = _relu(z)
        acts.append(z)
    return _relu(acts[layer.skip_source] + z)


def _conv(layer: ConvLayer, x):
    # x: (N, C, H, W); stride 1, zero padding preserving H and W
    k = layer.kernel
    lo, hi = (k - 1) // 2, k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("ncijab,ocab->noij", win, layer.filters, optimize=True)
    return out + layer.bias[None, :, None, None]


def _feedforward(model: Model, x):
    h = x
    n = len(model.layers)
    flattened = not any(isinstance(l, ConvLayer) for l in model.layers)
    for i, layer in enumerate(model.layers):
        last = i == n - 1
        if isinstance(layer, ConvLayer):
            h = _relu(_conv(layer, h))
        elif isinstance(layer, ResidualBlock):
            h = _block(layer, h)
        elif isinstance(layer, DenseLayer):
            if not flattened:
                h = h.reshape(h.shape[0], -1)  # channel-major (C, H, W) order
                flattened = True
            h = _dense(layer, h)
            if not last:
                h = _relu(h)
        else:
            raise ValueError(f"unexpected layer {type(layer).__name__} in forward")
    return h


def _lstm_step(layer: LstmLayer, x_t, h, c):
    gi, gf, gc, go = layer.gates
    i = _sigmoid(x_t @ gi.input_weight.T + h @ gi.hidden_weight.T + gi.bias)
    f = _sigmoid(x_t @ gf.input_weight.T + h @ gf.hidden_weight.T + gf.bias)
    g = np.tanh(x_t @ gc.input_weight.T + h @ gc.hidden_weight.T + gc.bias)
    o = _sigmoid(x_t @ go.input_weight.T + h @ go.hidden_weight.T + go.bias)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def _recurrent(model: Model, x):
    # x: (N, T, d); the head reads the final hidden state
    N, T, _ = x.shape
    h = None
    head_start = None
    for i, layer in enumerate(model.layers):
        if isinstance(layer, RecurrentLayer):
            h = np.zeros((N, layer.hidden_dim))
            for t in range(T):
                h = np.tanh(
                    x[:, t] @ layer.input_weight.T + h @ layer.hidden_weight.T + layer.bias
                )
        elif isinstance(layer, LstmLayer):
            h = np.zeros((N, layer.hidden_dim))
            c = np.zeros((N, layer.hidden_dim))
            for t in range(T):
                h, c = _lstm_step(layer, x[:, t], h, c)
        else:
            head_start = i
            break
    if h is None:
        raise ValueError("recurrent model has no recurrent layer")
    if head_start is not None:
        n = len(model.layers)
        for i in range(head_start, n):
            layer = model.layers[i]
            if not isinstance(layer, DenseLayer):
                raise ValueError("recurrent head must be dense layers")
            h = _dense(layer, h)
            if i < n - 1:
                h = _relu(h)
    return h


def forward(model: Model, x) -> np.ndarray:
    """Logits for a single input or a batch.

    mlp/resmlp: (d,) or (N, d). cnn: (C, H, W) or (N, C, H, W).
    rnn/lstm: (T, d) or (N, T, d). Returns (num_classes,) for single inputs,
    (N, num_classes) for batches.
    """
    x = np.asarray(x, dtype=np.float64)
    if model.arch_tag in ("rnn", "lstm"):
        single = x.ndim == 2
        xb = x[None] if single else x
        if xb.ndim != 3:
            raise ValueError(f"expected (T, d) or (N, T, d) input, got {x.shape}")
        if xb.shape[2] != model.input_dim:
            raise ValueError(
                f"feature dim {xb.shape[2]} does not match input_dim {model.input_dim}"
            )
        out = _recurrent(model, xb)
    elif model.arch_tag == "cnn":
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.ndim != 4:
            raise ValueError(f"expected (C, H, W) or (N, C, H, W) input, got {x.shape}")
        if xb.shape[1] != model.input_dim:
            raise ValueError(
                f"channel dim {xb.shape[1]} does not match input_dim {model.input_dim}"
            )
        out = _feedforward(model, xb)
    else:
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2:
            raise ValueError(f"expected (d,) or (N, d) input, got {x.shape}")
        if xb.shape[1] != model.input_dim:
            raise ValueError(
                f"feature dim {xb.shape[1]} does not match input_dim {model.input_dim}"
            )
        out = _feedforward(model, xb)
    return out[0] if single else out


def predict(model: Model, x) -> np.ndarray:
    """Class indices by argmax; ties break toward the lowest index."""
    logits = forward(model, x)
    if logits.ndim == 1:
        return np.argmax(logits)
    return np.argmax(logits, axis=1)


def accuracy(model: Model, dataset) -> float:
    """Fraction of dataset rows whose argmax logit matches the label."""
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    pred = predict(model, dataset.inputs)
    return float(np.mean(pred == np.asarray(dataset.labels)))
