"""Barycentric fusion for recurrent layers (RNN, LSTM).

Hidden-to-hidden weights live on the layer's own nodes on both sides, so
their contribution to the coupling cost is a Gromov-style term: the same
coupling appears on the rows and the columns. Each per-model coupling is
solved by a fixed-point iteration (cost = input-side barycentric cost +
alpha_h * hidden-side relational cost, re-linearized at the current
coupling), then the fused input and hidden matrices are replaced by the
exact quadratic minimizers under the solved couplings.

With alpha_h = 0 the relational term vanishes and the coupling path is
bit-identical to the dense machinery in `fusion`, which this module shares.
LSTM gates share one coupling per model per layer; their costs sum.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .fusion import (
    FusionConfig,
    FusionError,
    FusionResult,
    _check_compatible,
    _coupling_matrix,
    _augment,
    _force_coupling_update,
    _identity_coupling,
    _objective,
    _relchange,
    _resolve_init,
    _row_normalized,
    _site_list,
    _split,
    barycenter_matrix_update,
    extend_with_bias_node,
    wb_fuse_layer,
)
from .model import DenseLayer, LstmLayer, Model, RecurrentLayer, validate
from .ot import entropic_gw_solve, gw_iterate_pairs, sinkhorn, uniform_hist
from .tensorops import sq_loss_tensor_apply

__all__ = [
    "GwbConfig",
    "gwb_fuse_layer",
    "lstm_fuse_layer",
    "gwb_fuse_model",
    "align_recurrent_model",
]


@dataclass
class GwbConfig:
    """Recurrent-fusion knobs on top of the shared FusionConfig.

    alpha_h weighs the hidden-to-hidden relational cost against the
    input-side cost. alpha_in_inner controls whether that weight is applied
    inside the coupling fixed point (default) or only in the reported
    objective, in which case the inner iteration uses weight 1.
    """

    base: FusionConfig = field(default_factory=FusionConfig)
    alpha_h: float = 5.0
    inner_max: int = 10
    alpha_in_inner: bool = True

    def effective_alpha(self) -> float:
        if self.alpha_h < 0:
            raise ValueError("alpha_h must be >= 0")
        return self.alpha_h if self.alpha_in_inner else 1.0


def _gwb_objective(W, H, W_inputs, H_inputs, coup_mats, prev_mats, lam, alpha_h):
    """sum_i lam_i (<input cost, Pi_i> + alpha_h <hidden cost at Pi_i, Pi_i>)."""
    total = 0.0
    for i, (lam_i, Pi) in enumerate(zip(lam, coup_mats)):
        total += lam_i * float(
            (sq_loss_tensor_apply(W, W_inputs[i], prev_mats[i]) * Pi).sum()
        )
        if alpha_h != 0.0:
            total += (
                lam_i
                * alpha_h
                * float((sq_loss_tensor_apply(H, H_inputs[i], Pi) * Pi).sum())
            )
    return total


def gwb_fuse_layer(W_init, H_init, inputs, prev_couplings, cfg: GwbConfig):
    """Fuse one recurrent layer given the previous layer's couplings.

    W matrices are treated as opaque (k, m) edge matrices whose columns are
    bridged by prev_couplings, so the caller decides whether a bias column
    is appended (extend the coupling accordingly). H matrices are square on
    the layer's own nodes. inputs is a list of (W_i, H_i) pairs. Returns
    (W, H, couplings, trace).
    """
    W_inputs = [np.asarray(W, dtype=np.float64) for W, _ in inputs]
    H_inputs = [np.asarray(H, dtype=np.float64) for _, H in inputs]
    prev_mats = [_coupling_matrix(p) for p in prev_couplings]
    n = len(W_inputs)
    if len(prev_mats) != n:
        raise ValueError("need one previous coupling per input model")
    W = np.array(W_init, dtype=np.float64)
    H = np.array(H_init, dtype=np.float64)
    k_t = W.shape[0]
    if H.shape != (k_t, k_t):
        raise ValueError(f"H_init must be square of width {k_t}, got {H.shape}")
    for i, (Wi, Hi, P) in enumerate(zip(W_inputs, H_inputs, prev_mats)):
        if Hi.shape != (Wi.shape[0], Wi.shape[0]):
            raise ValueError(f"model {i}: hidden matrix must be square on its rows")
        if P.shape != (W.shape[1], Wi.shape[1]):
            raise ValueError(
                f"model {i}: previous coupling shape {P.shape} does not bridge "
                f"target cols {W.shape[1]} to model cols {Wi.shape[1]}"
            )
    lam = cfg.base.resolved_lam(n)
    alpha = cfg.effective_alpha()
    p = uniform_hist(k_t)

    trace = []
    couplings = None
    for outer in range(1, cfg.base.outer_max + 1):
        couplings = []
        for i in range(n):
            fixed = sq_loss_tensor_apply(W, W_inputs[i], prev_mats[i])
            couplings.append(
                entropic_gw_solve(
                    fixed,
                    H,
                    H_inputs[i],
                    p,
                    uniform_hist(W_inputs[i].shape[0]),
                    alpha,
                    cfg.base.sinkhorn,
                    cfg.inner_max,
                )
            )
        coup_mats = [c.matrix for c in couplings]
        b1 = _gwb_objective(
            W, H, W_inputs, H_inputs, coup_mats, prev_mats, lam, cfg.alpha_h
        )
        W_new = barycenter_matrix_update(W_inputs, coup_mats, prev_mats, lam)
        H_new = barycenter_matrix_update(H_inputs, coup_mats, coup_mats, lam)
        b2 = _gwb_objective(
            W_new, H_new, W_inputs, H_inputs, coup_mats, prev_mats, lam, cfg.alpha_h
        )
        if not (np.isfinite(b1) and np.isfinite(b2)):
            raise FusionError(
                f"non-finite recurrent objective (before={b1!r}, after={b2!r})"
            )
        trace.append((outer, b1, b2))
        if cfg.alpha_h == 0.0:
            rel = _relchange(W_new, W)
        else:
            rel = max(_relchange(W_new, W), _relchange(H_new, H))
        W, H = W_new, H_new
        if rel <= cfg.base.outer_tol:
            break
    return W, H, couplings, trace


def _gate_arrays(layer: LstmLayer):
    aug = [_augment(g.input_weight, g.bias) for g in layer.gates]
    hid = [np.asarray(g.hidden_weight, dtype=np.float64) for g in layer.gates]
    return aug, hid


def lstm_fuse_layer(init: LstmLayer, inputs: List[LstmLayer], prev_couplings, cfg: GwbConfig):
    """Fuse one LSTM layer; all four gates share one coupling per model.

    The coupling cost is the sum over gates of the input-side barycentric
    cost plus alpha_h times the hidden-side relational cost. Biases are
    handled here: gate input weights are augmented with their bias column
    and prev_couplings (raw, over previous-layer nodes) are extended with
    the bias pseudo-node internally. Returns (LstmLayer, couplings, trace).
    """
    n = len(inputs)
    prev_raw = [_coupling_matrix(p) for p in prev_couplings]
    if len(prev_raw) != n:
        raise ValueError("need one previous coupling per input model")
    prev_mats = [extend_with_bias_node(P, 1.0 / P.shape[0]) for P in prev_raw]

    W_init, H_init = _gate_arrays(init)
    per_model = [_gate_arrays(m) for m in inputs]
    k_t = W_init[0].shape[0]
    lam = cfg.base.resolved_lam(n)
    alpha = cfg.effective_alpha()
    p = uniform_hist(k_t)

    W = [np.array(g) for g in W_init]
    H = [np.array(g) for g in H_init]
    trace = []
    couplings = None
    for outer in range(1, cfg.base.outer_max + 1):
        couplings = []
        for i in range(n):
            aug_i, hid_i = per_model[i]
            fixed = sq_loss_tensor_apply(W[0], aug_i[0], prev_mats[i])
            for g in range(1, 4):
                fixed = fixed + sq_loss_tensor_apply(W[g], aug_i[g], prev_mats[i])
            q = uniform_hist(aug_i[0].shape[0])
            if alpha == 0.0:
                c = sinkhorn(fixed, p, q, cfg.base.sinkhorn)
            else:
                sims = [(H[g], hid_i[g]) for g in range(4)]
                c = gw_iterate_pairs(
                    fixed, sims, p, q, alpha, cfg.base.sinkhorn, cfg.inner_max
                )
            couplings.append(c)
        coup_mats = [c.matrix for c in couplings]

        b1 = sum(
            _gwb_objective(
                W[g],
                H[g],
                [per_model[i][0][g] for i in range(n)],
                [per_model[i][1][g] for i in range(n)],
                coup_mats,
                prev_mats,
                lam,
                cfg.alpha_h,
            )
            for g in range(4)
        )
        W_new = [
            barycenter_matrix_update(
                [per_model[i][0][g] for i in range(n)], coup_mats, prev_mats, lam
            )
            for g in range(4)
        ]
        H_new = [
            barycenter_matrix_update(
                [per_model[i][1][g] for i in range(n)], coup_mats, coup_mats, lam
            )
            for g in range(4)
        ]
        b2 = sum(
            _gwb_objective(
                W_new[g],
                H_new[g],
                [per_model[i][0][g] for i in range(n)],
                [per_model[i][1][g] for i in range(n)],
                coup_mats,
                prev_mats,
                lam,
                cfg.alpha_h,
            )
            for g in range(4)
        )
        if not (np.isfinite(b1) and np.isfinite(b2)):
            raise FusionError(
                f"non-finite recurrent objective (before={b1!r}, after={b2!r})"
            )
        trace.append((outer, b1, b2))
        if cfg.alpha_h == 0.0:
            rel = _relchange(np.vstack(W_new), np.vstack(W))
        else:
            rel = max(
                _relchange(np.vstack(W_new), np.vstack(W)),
                _relchange(np.vstack(H_new), np.vstack(H)),
            )
        W, H = W_new, H_new
        if rel <= cfg.base.outer_tol:
            break

    gates = []
    for g in range(4):
        weight, bias = _split(W[g])
        gates.append(RecurrentLayer(weight, H[g], bias))
    return LstmLayer(tuple(gates)), couplings, trace


def gwb_fuse_model(models, cfg: GwbConfig) -> FusionResult:
    """Fuse recurrent models (rnn, lstm) layer by layer.

    Couplings thread forward from the pinned identity coupling on the input
    features, through each recurrent layer's shared coupling, into the
    dense readout head, which is fused by the dense machinery under
    cfg.base (including last_layer_policy).
    """
    sites = _check_compatible(models)
    if models[0].arch_tag not in ("rnn", "lstm"):
        raise ValueError("feedforward models are fused by wb_fuse_model")
    n = len(models)
    lam = cfg.base.resolved_lam(n)
    input_dim = models[0].input_dim
    init_model, _ = _resolve_init(models, cfg.base, sites)

    prev = [np.eye(input_dim) / input_dim for _ in range(n)]
    fused_layers = [None] * len(models[0].layers)
    per_model_couplings = [[] for _ in range(n)]
    traces = []
    labels = [s[0] for s in sites]

    for s_idx, site in enumerate(sites):
        label, kind, l, _ = site
        is_last = s_idx == len(sites) - 1

        if kind == "rnn":
            if is_last and cfg.base.last_layer_policy == "identity":
                raise ValueError(
                    "identity last-layer policy needs a dense output layer; "
                    "got a recurrent layer last"
                )
            layer_objs = [m.layers[l] for m in models]
            init_layer = init_model.layers[l]
            prev_ext = [extend_with_bias_node(P, 1.0 / P.shape[0]) for P in prev]
            pairs = [
                (_augment(x.input_weight, x.bias), x.hidden_weight) for x in layer_objs
            ]
            W, H, couplings, trace = gwb_fuse_layer(
                _augment(init_layer.input_weight, init_layer.bias),
                init_layer.hidden_weight,
                pairs,
                prev_ext,
                cfg,
            )
            weight, bias = _split(W)
            fused_layers[l] = RecurrentLayer(weight, H, bias)
        elif kind == "lstm":
            if is_last and cfg.base.last_layer_policy == "identity":
                raise ValueError(
                    "identity last-layer policy needs a dense output layer; "
                    "got a recurrent layer last"
                )
            layer_objs = [m.layers[l] for m in models]
            fused_layer, couplings, trace = lstm_fuse_layer(
                init_model.layers[l], layer_objs, prev, cfg
            )
            fused_layers[l] = fused_layer
        elif kind == "dense":
            layer_objs = [m.layers[l] for m in models]
            init_layer = init_model.layers[l]
            aug_inputs = [_augment(x.weight, x.bias) for x in layer_objs]
            aug_init = _augment(init_layer.weight, init_layer.bias)
            prev_ext = [extend_with_bias_node(P, 1.0 / P.shape[0]) for P in prev]
            if is_last and cfg.base.last_layer_policy == "identity":
                forced = [_identity_coupling(init_layer.out_dim) for _ in range(n)]
                W, trace = _force_coupling_update(
                    aug_init, aug_inputs, forced, prev_ext, lam
                )
                couplings = forced
            else:
                W, couplings, trace = wb_fuse_layer(
                    aug_init, aug_inputs, prev_ext, cfg.base
                )
            weight, bias = _split(W)
            fused_layers[l] = DenseLayer(weight, bias)
        else:
            raise ValueError(f"unexpected site kind {kind} in recurrent fusion")

        for i in range(n):
            per_model_couplings[i].append(couplings[i])
        traces.append(trace)
        prev = [_coupling_matrix(c) for c in couplings]

    fused = Model(fused_layers, input_dim, models[0].arch_tag)
    bad = validate(fused)
    if bad:
        raise FusionError("fusion produced an invalid model: " + "; ".join(bad))
    return FusionResult(fused, per_model_couplings, traces, labels)


def align_recurrent_model(model: Model, couplings, prev_couplings=None) -> Model:
    """Transform a recurrent model into the fused coordinate frame.

    Per layer: input weights W <- k * k_prev * Pi @ W @ Pi_prev^T, hidden
    weights H <- k^2 * Pi @ H @ Pi^T, biases b <- k * Pi @ b, all computed
    through row-normalized couplings so exact permutation couplings act as
    exact conjugation. LSTM gates share their layer's coupling. Dense head
    layers transform like align_model. prev_couplings defaults to the
    shifted site chain starting at the pinned input coupling.
    """
    if model.arch_tag not in ("rnn", "lstm"):
        raise ValueError("feedforward models are aligned by align_model")
    sites = _site_list(model)
    if len(couplings) != len(sites):
        raise ValueError(f"need {len(sites)} couplings, got {len(couplings)}")
    mats = [_coupling_matrix(c) for c in couplings]

    if prev_couplings is None:
        prev_mats = []
        prev = np.eye(model.input_dim) / model.input_dim
        for s_idx in range(len(sites)):
            prev_mats.append(prev)
            prev = mats[s_idx]
    else:
        if len(prev_couplings) != len(sites):
            raise ValueError("prev_couplings must match the number of sites")
        prev_mats = [_coupling_matrix(c) for c in prev_couplings]

    layers = list(model.layers)
    for s_idx, site in enumerate(sites):
        _, kind, l, _ = site
        Pi = _row_normalized(mats[s_idx])
        Pn = _row_normalized(prev_mats[s_idx])
        layer = model.layers[l]
        if kind == "rnn":
            layers[l] = RecurrentLayer(
                Pi @ layer.input_weight @ Pn.T,
                Pi @ layer.hidden_weight @ Pi.T,
                Pi @ layer.bias,
            )
        elif kind == "lstm":
            gates = tuple(
                RecurrentLayer(
                    Pi @ g.input_weight @ Pn.T,
                    Pi @ g.hidden_weight @ Pi.T,
                    Pi @ g.bias,
                )
                for g in layer.gates
            )
            layers[l] = LstmLayer(gates)
        elif kind == "dense":
            layers[l] = DenseLayer(Pi @ layer.weight @ Pn.T, Pi @ layer.bias)
        else:
            raise ValueError(f"cannot align site kind {kind} here")
    return Model(layers, model.input_dim, model.arch_tag)
