"""Shared builders for test models and permuted-equivalent copies.

The permuted copies are constructed directly from the permutation algebra
(independent of the fusion code) so recovery tests have a ground truth.
"""

import numpy as np

from baryfuse.model import (
    ConvLayer,
    DenseLayer,
    LstmLayer,
    Model,
    RecurrentLayer,
    ResidualBlock,
)


def perm_matrix(rng, n):
    mat = np.zeros((n, n))
    mat[np.arange(n), rng.permutation(n)] = 1.0
    return mat


def random_mlp(rng, input_dim=4, widths=(8, 6), out_dim=3, scale=1.0):
    dims = [input_dim, *widths, out_dim]
    layers = [
        DenseLayer(scale * rng.standard_normal((dims[i + 1], dims[i])),
                   scale * rng.standard_normal(dims[i + 1]))
        for i in range(len(dims) - 1)
    ]
    return Model(layers, input_dim, "mlp")


def random_resmlp(rng, input_dim=4, width=8, out_dim=3, n_inner=2, skip_source=0):
    entry = DenseLayer(rng.standard_normal((width, input_dim)),
                       rng.standard_normal(width))
    inner = [
        DenseLayer(rng.standard_normal((width, width)), rng.standard_normal(width))
        for _ in range(n_inner)
    ]
    head = DenseLayer(rng.standard_normal((out_dim, width)),
                      rng.standard_normal(out_dim))
    return Model([entry, ResidualBlock(inner, skip_source), head], input_dim, "resmlp")


def random_cnn(rng, in_channels=1, channels=(4, 3), k=3, side=4, out_dim=2):
    layers = []
    c_prev = in_channels
    for c in channels:
        layers.append(ConvLayer(0.5 * rng.standard_normal((c, c_prev, k, k)),
                                0.5 * rng.standard_normal(c)))
        c_prev = c
    layers.append(DenseLayer(0.5 * rng.standard_normal((out_dim, c_prev * side * side)),
                             0.5 * rng.standard_normal(out_dim)))
    # input_dim counts channels for conv stacks
    return Model(layers, in_channels, "cnn")


def random_rnn(rng, input_dim=3, hidden=8, out_dim=2):
    rec = RecurrentLayer(rng.standard_normal((hidden, input_dim)),
                         rng.standard_normal((hidden, hidden)) / np.sqrt(hidden),
                         rng.standard_normal(hidden))
    head = DenseLayer(rng.standard_normal((out_dim, hidden)),
                      rng.standard_normal(out_dim))
    return Model([rec, head], input_dim, "rnn")


def random_lstm(rng, input_dim=3, hidden=8, out_dim=2):
    gates = tuple(
        RecurrentLayer(rng.standard_normal((hidden, input_dim)),
                       rng.standard_normal((hidden, hidden)) / np.sqrt(hidden),
                       rng.standard_normal(hidden))
        for _ in range(4)
    )
    head = DenseLayer(rng.standard_normal((out_dim, hidden)),
                      rng.standard_normal(out_dim))
    return Model([LstmLayer(gates), head], input_dim, "lstm")


def permute_mlp(model, perms):
    """Permuted-equivalent copy: hidden layer l gets row perm P_l.

    perms has one matrix per hidden layer; input and output stay fixed.
    """
    full = [np.eye(model.input_dim), *perms, np.eye(model.layers[-1].weight.shape[0])]
    layers = []
    for i, layer in enumerate(model.layers):
        w = full[i + 1] @ layer.weight @ full[i].T
        b = full[i + 1] @ layer.bias
        layers.append(DenseLayer(w, b))
    return Model(layers, model.input_dim, model.arch_tag)


def permute_resmlp(model, perm):
    """All layers in the skip set share the one hidden permutation."""
    entry, block, head = model.layers
    new_entry = DenseLayer(perm @ entry.weight, perm @ entry.bias)
    new_inner = [DenseLayer(perm @ l.weight @ perm.T, perm @ l.bias)
                 for l in block.inner]
    new_head = DenseLayer(head.weight @ perm.T, head.bias)
    return Model(
        [new_entry, ResidualBlock(new_inner, block.skip_source), new_head],
        model.input_dim, "resmlp",
    )


def permute_rnn(model, perm):
    rec, head = model.layers
    new_rec = RecurrentLayer(perm @ rec.input_weight,
                             perm @ rec.hidden_weight @ perm.T,
                             perm @ rec.bias)
    new_head = DenseLayer(head.weight @ perm.T, head.bias)
    return Model([new_rec, new_head], model.input_dim, "rnn")


def permute_lstm(model, perm):
    cell, head = model.layers
    gates = tuple(
        RecurrentLayer(perm @ g.input_weight,
                       perm @ g.hidden_weight @ perm.T,
                       perm @ g.bias)
        for g in cell.gates
    )
    new_head = DenseLayer(head.weight @ perm.T, head.bias)
    return Model([LstmLayer(gates), new_head], model.input_dim, "lstm")


def permute_cnn(model, perms):
    """Channel permutation per conv layer; dense head permuted channel-major."""
    convs = [l for l in model.layers if isinstance(l, ConvLayer)]
    head = model.layers[-1]
    full = [np.eye(convs[0].filters.shape[1]), *perms]
    layers = []
    for i, conv in enumerate(convs):
        f = np.einsum("oc,cdab,ed->oeab", full[i + 1], conv.filters, full[i])
        layers.append(ConvLayer(f, full[i + 1] @ conv.bias))
    spatial = head.weight.shape[1] // convs[-1].filters.shape[0]
    expand = np.kron(full[-1], np.eye(spatial))
    layers.append(DenseLayer(head.weight @ expand.T, head.bias.copy()))
    return Model(layers, model.input_dim, "cnn")


def max_abs_param_diff(a, b):
    from baryfuse.landscape import flatten_model
    return float(np.max(np.abs(flatten_model(a) - flatten_model(b))))
