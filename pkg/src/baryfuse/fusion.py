"""Barycentric layer-wise fusion for feedforward models, plus baselines.

Each layer is fused by alternating two steps: solve one entropic OT problem
per input model against the current fused weights (couplings of layer
nodes), then replace the fused weights by the exact minimizer of the
quadratic barycenter objective under those couplings. Couplings thread
forward through the network so every layer is compared in the coordinates
of the already-aligned previous layer.

Biases ride along as one extra input column: the previous-layer coupling is
extended block-diagonally with a single pseudo-node entry whose mass is one
previous-layer node (1 / prev_width), which reduces to the plain bias
average b <- k * Pi @ b under uniform marginals.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .model import (
    ConvLayer,
    DenseLayer,
    LstmLayer,
    Model,
    RecurrentLayer,
    ResidualBlock,
    validate,
)
from .ot import Coupling, SinkhornParams, sinkhorn, uniform_hist
from .tensorops import frobenius_loss_tensor_apply, sq_loss_tensor_apply

__all__ = [
    "FusionConfig",
    "FusionResult",
    "FusionError",
    "first_layer_coupling",
    "wb_fuse_layer",
    "wb_fuse_model",
    "resnet_coupling_policy",
    "ot_fusion_baseline",
    "vanilla_average",
    "align_model",
    "barycenter_matrix_update",
    "extend_with_bias_node",
]


class FusionError(RuntimeError):
    """Numerical failure inside a fusion run (non-finite objective etc.)."""


@dataclass
class FusionConfig:
    """Knobs shared by every fusion family.

    lam: barycenter weights over the input models (None = uniform).
    target_widths: output width per fusion site; None copies the widths of
    the init model. init_policy: ("copy", index) reuses an input model as
    the initial fused iterate (index None means the first model);
    ("random",) draws Gaussian std 0.01 weights, required when target
    widths differ from the base models. last_layer_policy "identity" pins
    the output layer coupling to I/k (classes correspond by label);
    "solve" treats it like any other layer.
    """

    sinkhorn: SinkhornParams = field(default_factory=SinkhornParams)
    outer_max: int = 10
    outer_tol: float = 1e-6
    lam: Optional[np.ndarray] = None
    target_widths: Optional[List[int]] = None
    init_policy: tuple = ("copy", None)
    last_layer_policy: str = "identity"
    seed: int = 0

    def resolved_lam(self, n: int) -> np.ndarray:
        if self.lam is None:
            return uniform_hist(n)
        lam = np.asarray(self.lam, dtype=np.float64)
        if lam.shape != (n,):
            raise ValueError(f"lambda must have length {n}, got shape {lam.shape}")
        if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
            raise ValueError("lambda must be a histogram (nonnegative, sum 1)")
        return lam


@dataclass
class FusionResult:
    fused: Model
    couplings: list  # [model][site] -> Coupling
    traces: list  # [site] -> list of (outer_iter, obj_after_couplings, obj_after_update)
    sites: list  # [site] -> label


def first_layer_coupling(input_dim: int, n: int) -> list:
    """Input nodes are pinned: every model starts from I / input_dim."""
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    u = uniform_hist(input_dim)
    return [
        Coupling(np.eye(input_dim) / input_dim, u, u, 0.0, True, 0) for _ in range(n)
    ]


def _coupling_matrix(c):
    return c.matrix if isinstance(c, Coupling) else np.asarray(c, dtype=np.float64)


def extend_with_bias_node(mat, mass: float):
    """Append a bias pseudo-node pair carrying `mass` on the new diagonal."""
    mat = _coupling_matrix(mat)
    r, c = mat.shape
    out = np.zeros((r + 1, c + 1))
    out[:r, :c] = mat
    out[r, c] = mass
    return out


def _augment(weight, bias):
    return np.hstack([weight, np.asarray(bias, dtype=np.float64)[:, None]])


def _split(aug):
    return aug[:, :-1], aug[:, -1]


def barycenter_matrix_update(inputs, couplings, prev_couplings, lam):
    """Exact minimizer of the quadratic barycenter objective in the fused matrix.

    Solves argmin_W sum_i lam_i sum_{j,g,q,s} (W[j,q] - W_i[g,s])^2
    Pi_i[j,g] P_i[q,s] elementwise:
        W = (sum_i lam_i Pi_i W_i P_i^T) / (sum_i lam_i outer(r_i, c_i))
    with r_i, c_i the row sums of Pi_i and P_i. Under exactly uniform
    marginals this equals k * k_prev * sum_i lam_i Pi_i W_i P_i^T.
    """
    num = None
    den = None
    for lam_i, Wi, ci, pi in zip(lam, inputs, couplings, prev_couplings):
        Pi = _coupling_matrix(ci)
        P = _coupling_matrix(pi)
        term = lam_i * (Pi @ np.asarray(Wi, dtype=np.float64) @ P.T)
        d = lam_i * np.outer(Pi.sum(axis=1), P.sum(axis=1))
        num = term if num is None else num + term
        den = d if den is None else den + d
    if np.any(den <= 0):
        raise FusionError("degenerate coupling marginals in barycenter update")
    return num / den


def _filter_update(inputs, couplings, prev_couplings, lam):
    # componentwise barycenter_matrix_update for (out, in, k, k) filter banks
    num = None
    den = None
    for lam_i, Fi, ci, pi in zip(lam, inputs, couplings, prev_couplings):
        Pi = _coupling_matrix(ci)
        P = _coupling_matrix(pi)
        term = lam_i * np.einsum(
            "jg,gsab,qs->jqab", Pi, np.asarray(Fi, dtype=np.float64), P, optimize=True
        )
        d = lam_i * np.outer(Pi.sum(axis=1), P.sum(axis=1))
        num = term if num is None else num + term
        den = d if den is None else den + d
    if np.any(den <= 0):
        raise FusionError("degenerate coupling marginals in barycenter update")
    return num / den[:, :, None, None]


def _objective(W, inputs, coup_mats, lam, cost_of):
    """B(W; couplings) = sum_i lam_i <cost_i(W), Pi_i>."""
    total = 0.0
    for i, (lam_i, Pi) in enumerate(zip(lam, coup_mats)):
        total += lam_i * float((cost_of(W, i) * Pi).sum())
    return total


def _relchange(new, old):
    denom = np.linalg.norm(old.ravel())
    return float(np.linalg.norm((new - old).ravel()) / max(denom, 1e-30))


def _alternate_layer(W_init, inputs, prev_mats, cfg, cost_of, update_fn, solve_fn):
    """Shared alternation engine: couplings, exact weight update, repeat.

    cost_of(W, i) builds model i's coupling cost; solve_fn(cost, i) solves
    the coupling; update_fn is the exact weight minimizer. The trace records
    the objective before and after each weight update.
    """
    n = len(inputs)
    lam = cfg.resolved_lam(n)
    W = np.array(W_init, dtype=np.float64)
    trace = []
    couplings = None
    for outer in range(1, cfg.outer_max + 1):
        couplings = []
        for i in range(n):
            couplings.append(solve_fn(cost_of(W, i), i))
        coup_mats = [c.matrix for c in couplings]
        b1 = _objective(W, inputs, coup_mats, lam, cost_of)
        W_new = update_fn(inputs, coup_mats, prev_mats, lam)
        b2 = _objective(W_new, inputs, coup_mats, lam, cost_of)
        if not (np.isfinite(b1) and np.isfinite(b2)):
            raise FusionError(
                f"non-finite barycenter objective (before={b1!r}, after={b2!r})"
            )
        trace.append((outer, b1, b2))
        rel = _relchange(W_new, W)
        W = W_new
        if rel <= cfg.outer_tol:
            break
    return W, couplings, trace


def wb_fuse_layer(W_init, inputs, prev_couplings, cfg: FusionConfig):
    """Fuse one dense layer given the previous layer's couplings.

    W_init: (k_t, m) initial fused matrix; inputs: per-model (k_i, m_i)
    matrices; prev_couplings: per-model (m, m_i) couplings (Coupling objects
    or raw matrices). Alternates Sinkhorn solves for the layer couplings
    with the exact barycentric weight update until the relative change of
    the fused matrix drops below cfg.outer_tol or cfg.outer_max is reached.
    Returns (fused matrix, couplings, trace).
    """
    inputs = [np.asarray(Wi, dtype=np.float64) for Wi in inputs]
    prev_mats = [_coupling_matrix(p) for p in prev_couplings]
    if len(inputs) != len(prev_mats):
        raise ValueError("need one previous coupling per input model")
    W_init = np.asarray(W_init, dtype=np.float64)
    for Wi, P in zip(inputs, prev_mats):
        if P.shape != (W_init.shape[1], Wi.shape[1]):
            raise ValueError(
                f"previous coupling shape {P.shape} does not bridge target cols "
                f"{W_init.shape[1]} to model cols {Wi.shape[1]}"
            )
    k_t = W_init.shape[0]

    def cost_of(W, i):
        return sq_loss_tensor_apply(W, inputs[i], prev_mats[i])

    def solve_fn(cost, i):
        return sinkhorn(
            cost, uniform_hist(k_t), uniform_hist(inputs[i].shape[0]), cfg.sinkhorn
        )

    return _alternate_layer(
        W_init, inputs, prev_mats, cfg, cost_of, barycenter_matrix_update, solve_fn
    )


def _identity_coupling(k: int) -> Coupling:
    u = uniform_hist(k)
    return Coupling(np.eye(k) / k, u, u, 0.0, True, 0)


def resnet_coupling_policy(block: ResidualBlock, couplings):
    """Pick the coupling every member of a skip-connected set must share.

    couplings: list where index 0 is the block-input coupling and index j
    (j >= 1) is the coupling of inner layer j. Returns the skip-source
    entry, i.e. the earliest member of the set; the caller assigns it to
    the block output layer so the whole set shares one coupling.
    """
    shared = couplings[block.skip_source]
    ref = _coupling_matrix(shared)
    if ref.shape[0] != block.out_dim:
        raise ValueError(
            f"skip set members disagree on width: coupling rows {ref.shape[0]} vs "
            f"block output {block.out_dim}"
        )
    return shared


def _force_coupling_update(W_init, aug_inputs, forced, prev_mats, lam, conv=False):
    """Single exact weight update under externally fixed couplings."""
    coup_mats = [_coupling_matrix(c) for c in forced]
    cost = frobenius_loss_tensor_apply if conv else sq_loss_tensor_apply
    update = _filter_update if conv else barycenter_matrix_update

    def cost_of(W, i):
        return cost(W, aug_inputs[i], prev_mats[i])

    b1 = _objective(W_init, aug_inputs, coup_mats, lam, cost_of)
    W = update(aug_inputs, coup_mats, prev_mats, lam)
    b2 = _objective(W, aug_inputs, coup_mats, lam, cost_of)
    if not (np.isfinite(b1) and np.isfinite(b2)):
        raise FusionError("non-finite objective under forced couplings")
    return W, [(1, b1, b2)]


def _ot_pass_site(aug_target, aug_inputs, prev_mats, lam, cfg):
    """One OT-baseline site: align incoming edges, one solve, average.

    The cost is the plain pairwise squared distance between target rows and
    aligned rows (not the barycentric tensor cost), and there is no
    coupling/weight alternation.
    """
    k_t = aug_target.shape[0]
    couplings = []
    aligned = []
    b = 0.0
    for lam_i, Wi, P in zip(lam, aug_inputs, prev_mats):
        r = P.sum(axis=1)
        if np.any(r <= 0):
            raise FusionError("degenerate previous coupling in baseline fusion")
        W_hat = Wi @ (P / r[:, None]).T  # k_prev * Wi @ P^T at uniform marginals
        diff = aug_target[:, None, :] - W_hat[None, :, :]
        cost = np.einsum("jgm,jgm->jg", diff, diff)
        c = sinkhorn(cost, uniform_hist(k_t), uniform_hist(Wi.shape[0]), cfg.sinkhorn)
        couplings.append(c)
        b += lam_i * float((cost * c.matrix).sum())
        rr = c.matrix.sum(axis=1)
        aligned.append((c.matrix / rr[:, None]) @ W_hat)
    W = None
    for lam_i, A in zip(lam, aligned):
        W = lam_i * A if W is None else W + lam_i * A
    return W, couplings, [(1, b, b)]


# ---------------------------------------------------------------------------
# model-level walkers


def _site_list(model: Model):
    """Flatten a model into fusion sites: (label, kind, layer idx, inner idx)."""
    sites = []
    for l, layer in enumerate(model.layers):
        if isinstance(layer, DenseLayer):
            sites.append((f"layer{l}", "dense", l, None))
        elif isinstance(layer, ConvLayer):
            sites.append((f"layer{l}", "conv", l, None))
        elif isinstance(layer, ResidualBlock):
            for j in range(len(layer.inner)):
                sites.append((f"layer{l}.inner{j}", "rdense", l, j))
        elif isinstance(layer, RecurrentLayer):
            sites.append((f"layer{l}", "rnn", l, None))
        elif isinstance(layer, LstmLayer):
            sites.append((f"layer{l}", "lstm", l, None))
        else:
            raise ValueError(f"unknown layer type {type(layer).__name__}")
    return sites


def _site_out_width(model: Model, site) -> int:
    _, kind, l, j = site
    layer = model.layers[l]
    if kind == "dense":
        return layer.out_dim
    if kind == "conv":
        return layer.out_channels
    if kind == "rdense":
        return layer.inner[j].out_dim
    return layer.hidden_dim


def _check_compatible(models):
    if len(models) < 1:
        raise ValueError("need at least one input model")
    base = models[0]
    for m in models:
        bad = validate(m)
        if bad:
            raise ValueError("invalid input model: " + "; ".join(bad))
    sites0 = _site_list(base)
    for m in models[1:]:
        if m.arch_tag != base.arch_tag:
            raise ValueError(f"arch mismatch: {m.arch_tag} vs {base.arch_tag}")
        if m.input_dim != base.input_dim:
            raise ValueError("input_dim mismatch between models")
        if [s[1:] for s in _site_list(m)] != [s[1:] for s in sites0]:
            raise ValueError("models have different layer structure")
        for l, (la, lb) in enumerate(zip(m.layers, base.layers)):
            if isinstance(lb, ConvLayer) and la.kernel != lb.kernel:
                raise ValueError(f"layer {l}: kernel size mismatch")
            if isinstance(lb, ResidualBlock) and la.skip_source != lb.skip_source:
                raise ValueError(f"layer {l}: skip_source mismatch")
        if _site_out_width(m, _site_list(m)[-1]) != _site_out_width(base, sites0[-1]):
            raise ValueError("models disagree on output width")
    return sites0


def _random_like(models, target_widths, rng):
    """Gaussian std 0.01 model with the requested site widths."""
    base = models[0]
    sites = _site_list(base)
    widths = dict(zip([s[0] for s in sites], target_widths))
    layers = []
    prev = base.input_dim
    for l, layer in enumerate(base.layers):
        if isinstance(layer, DenseLayer):
            w = widths[f"layer{l}"]
            in_dim = prev
            if base.arch_tag == "cnn" and l > 0 and isinstance(base.layers[l - 1], ConvLayer):
                spatial = layer.in_dim // base.layers[l - 1].out_channels
                in_dim = prev * spatial
            layers.append(DenseLayer(rng.normal(0, 0.01, (w, in_dim)), np.zeros(w)))
            prev = w
        elif isinstance(layer, ConvLayer):
            w = widths[f"layer{l}"]
            k = layer.kernel
            layers.append(ConvLayer(rng.normal(0, 0.01, (w, prev, k, k)), np.zeros(w)))
            prev = w
        elif isinstance(layer, ResidualBlock):
            inner = []
            for j in range(len(layer.inner)):
                w = widths[f"layer{l}.inner{j}"]
                inner.append(DenseLayer(rng.normal(0, 0.01, (w, prev)), np.zeros(w)))
                prev = w
            layers.append(ResidualBlock(inner, layer.skip_source))
        elif isinstance(layer, RecurrentLayer):
            w = widths[f"layer{l}"]
            layers.append(
                RecurrentLayer(
                    rng.normal(0, 0.01, (w, prev)),
                    rng.normal(0, 0.01, (w, w)),
                    np.zeros(w),
                )
            )
            prev = w
        elif isinstance(layer, LstmLayer):
            w = widths[f"layer{l}"]
            gates = tuple(
                RecurrentLayer(
                    rng.normal(0, 0.01, (w, prev)),
                    rng.normal(0, 0.01, (w, w)),
                    np.zeros(w),
                )
                for _ in range(4)
            )
            layers.append(LstmLayer(gates))
            prev = w
        else:
            raise ValueError(f"random init cannot build {type(layer).__name__}")
    return Model(layers, base.input_dim, base.arch_tag)


def _resolve_init(models, cfg, sites):
    n = len(models)
    base_width_sets = [[_site_out_width(m, s) for s in _site_list(m)] for m in models]
    kind = cfg.init_policy[0]
    if kind == "copy":
        idx = cfg.init_policy[1]
        if idx is None:
            idx = 0
        if not (0 <= idx < n):
            raise ValueError(f"copy init index {idx} out of range for {n} models")
        widths = cfg.target_widths
        if widths is None:
            widths = base_width_sets[idx]
        if list(widths) != base_width_sets[idx]:
            raise ValueError(
                "copy init requires target widths equal to the copied model; "
                "use init_policy=('random',) for different widths"
            )
        return models[idx].copy(), list(widths)
    if kind == "random":
        widths = cfg.target_widths
        if widths is None:
            if all(ws == base_width_sets[0] for ws in base_width_sets):
                widths = base_width_sets[0]
            else:
                raise ValueError("random init needs explicit target_widths")
        if len(widths) != len(sites):
            raise ValueError(
                f"target_widths needs one entry per fusion site ({len(sites)}), "
                f"got {len(widths)}"
            )
        if widths[-1] != base_width_sets[0][-1]:
            raise ValueError("last target width must equal the models' output width")
        seed = cfg.seed
        if len(cfg.init_policy) > 1 and cfg.init_policy[1] is not None:
            seed = cfg.init_policy[1]
        return _random_like(models, widths, np.random.default_rng(seed)), list(widths)
    raise ValueError(f"unknown init policy {cfg.init_policy!r}")


def _augment_conv(layer: ConvLayer):
    # bias as a pseudo input channel whose filter carries the bias at [0, 0]
    out_c, in_c, k, _ = layer.filters.shape
    aug = np.zeros((out_c, in_c + 1, k, k))
    aug[:, :in_c] = layer.filters
    aug[:, in_c, 0, 0] = layer.bias
    return aug


def _split_conv(aug):
    return aug[:, :-1], aug[:, -1, 0, 0]


def wb_fuse_model(models, cfg: FusionConfig) -> FusionResult:
    """Fuse feedforward models (mlp, cnn, resmlp) layer by layer.

    Couplings thread forward: each layer's costs are computed against the
    previous layer's solved couplings, starting from the pinned identity
    coupling on the input nodes. Residual blocks share one coupling across
    each skip-connected set; convolution layers compare filters by
    Frobenius norm; at the conv-to-dense transition the channel coupling is
    expanded block-diagonally over spatial positions.
    """
    sites = _check_compatible(models)
    if models[0].arch_tag in ("rnn", "lstm"):
        raise ValueError("recurrent models are fused by gwb_fuse_model")
    init_model, _ = _resolve_init(models, cfg, sites)
    return _fuse_feedforward(models, cfg, sites, init_model, method="wb")


def ot_fusion_baseline(models, cfg: FusionConfig) -> FusionResult:
    """Single-pass fusion baseline: no coupling/weight alternation.

    Per layer, each model's incoming edges are aligned through the
    previous-layer coupling, one OT problem per model is solved against the
    target model's own weights, and the aligned weights are averaged.
    """
    sites = _check_compatible(models)
    if models[0].arch_tag in ("rnn", "lstm"):
        raise ValueError("recurrent models are fused by gwb_fuse_model")
    init_model, _ = _resolve_init(models, cfg, sites)
    return _fuse_feedforward(models, cfg, sites, init_model, method="ot")


def _fuse_feedforward(models, cfg, sites, init_model, method):
    n = len(models)
    lam = cfg.resolved_lam(n)
    input_dim = models[0].input_dim

    trunk = first_layer_coupling(input_dim, n)  # shared by the current skip set
    prev = [c.matrix for c in trunk]
    prev_width_t = input_dim

    fused_layers = [None] * len(models[0].layers)
    per_model_couplings = [[] for _ in range(n)]
    traces = []
    labels = [s[0] for s in sites]
    pending_blocks = {}  # layer idx -> per-model [input coupling, inner couplings...]

    for s_idx, site in enumerate(sites):
        label, kind, l, j = site
        is_last = s_idx == len(sites) - 1

        if kind in ("dense", "rdense"):
            if kind == "dense":
                layer_objs = [m.layers[l] for m in models]
                init_layer = init_model.layers[l]
            else:
                layer_objs = [m.layers[l].inner[j] for m in models]
                init_layer = init_model.layers[l].inner[j]
            aug_inputs = [_augment(x.weight, x.bias) for x in layer_objs]
            aug_init = _augment(init_layer.weight, init_layer.bias)

            # expand channel couplings over spatial positions when leaving convs
            if (
                models[0].arch_tag == "cnn"
                and l > 0
                and isinstance(models[0].layers[l - 1], ConvLayer)
            ):
                spatial = init_layer.in_dim // init_model.layers[l - 1].out_channels
                for m, lay in zip(models, layer_objs):
                    if lay.in_dim // m.layers[l - 1].out_channels != spatial:
                        raise ValueError("models disagree on spatial size at flatten")
                prev = [np.kron(P, np.eye(spatial)) / spatial for P in prev]
                prev_width_t = prev_width_t * spatial

            prev_ext = [extend_with_bias_node(P, 1.0 / prev_width_t) for P in prev]

            block = models[0].layers[l] if kind == "rdense" else None
            if kind == "rdense" and j == 0:
                pending_blocks[l] = [[trunk[i]] for i in range(n)]
            closes_block = block is not None and j == len(block.inner) - 1

            if is_last and cfg.last_layer_policy == "identity":
                if kind == "rdense":
                    raise ValueError(
                        "identity last-layer policy needs a dense output layer; "
                        "a residual block output would break skip-set sharing"
                    )
                k_out = init_layer.out_dim
                forced = [_identity_coupling(k_out) for _ in range(n)]
                W, trace = _force_coupling_update(
                    aug_init, aug_inputs, forced, prev_ext, lam
                )
                couplings = forced
            elif closes_block:
                couplings = [
                    resnet_coupling_policy(block, pending_blocks[l][i])
                    for i in range(n)
                ]
                W, trace = _force_coupling_update(
                    aug_init, aug_inputs, couplings, prev_ext, lam
                )
            elif method == "ot":
                W, couplings, trace = _ot_pass_site(
                    aug_init, aug_inputs, prev_ext, lam, cfg
                )
            else:
                W, couplings, trace = wb_fuse_layer(aug_init, aug_inputs, prev_ext, cfg)

            weight, bias = _split(W)
            if kind == "dense":
                fused_layers[l] = DenseLayer(weight, bias)
                trunk = couplings
            else:
                if fused_layers[l] is None:
                    fused_layers[l] = ResidualBlock([], models[0].layers[l].skip_source)
                fused_layers[l].inner.append(DenseLayer(weight, bias))
                for i in range(n):
                    pending_blocks[l][i].append(couplings[i])
                if closes_block:
                    trunk = couplings

        elif kind == "conv":
            layer_objs = [m.layers[l] for m in models]
            init_layer = init_model.layers[l]
            aug_inputs = [_augment_conv(x) for x in layer_objs]
            aug_init = _augment_conv(init_layer)
            prev_ext = [extend_with_bias_node(P, 1.0 / prev_width_t) for P in prev]

            if is_last:
                raise ValueError("a conv layer cannot be the output layer")
            if method == "ot":
                # flatten filters so the baseline cost is the Frobenius distance
                k2 = aug_init.shape[2] * aug_init.shape[3]
                flat = [a.reshape(a.shape[0], -1) for a in aug_inputs]
                prev_flat = [np.kron(P, np.eye(k2)) for P in prev_ext]
                W_flat, couplings, trace = _ot_pass_site(
                    aug_init.reshape(aug_init.shape[0], -1), flat, prev_flat, lam, cfg
                )
                W = W_flat.reshape(
                    aug_init.shape[0], aug_init.shape[1], aug_init.shape[2], aug_init.shape[3]
                )
            else:
                k_t = aug_init.shape[0]

                def cost_of(Wc, i):
                    return frobenius_loss_tensor_apply(Wc, aug_inputs[i], prev_ext[i])

                def solve_fn(cost, i):
                    return sinkhorn(
                        cost,
                        uniform_hist(k_t),
                        uniform_hist(aug_inputs[i].shape[0]),
                        cfg.sinkhorn,
                    )

                W, couplings, trace = _alternate_layer(
                    aug_init, aug_inputs, prev_ext, cfg, cost_of, _filter_update, solve_fn
                )
            filters, bias = _split_conv(W)
            fused_layers[l] = ConvLayer(filters, bias)
            trunk = couplings
        else:
            raise ValueError(f"unexpected site kind {kind} in feedforward fusion")

        for i in range(n):
            per_model_couplings[i].append(couplings[i])
        traces.append(trace)
        prev = [_coupling_matrix(c) for c in couplings]
        prev_width_t = W.shape[0]

    fused = Model(fused_layers, input_dim, models[0].arch_tag)
    bad = validate(fused)
    if bad:
        raise FusionError("fusion produced an invalid model: " + "; ".join(bad))
    return FusionResult(fused, per_model_couplings, traces, labels)


def vanilla_average(models, lam=None) -> Model:
    """Elementwise weighted average of identically shaped models."""
    _check_compatible(models)
    base = models[0]
    for m in models[1:]:
        for l, (la, lb) in enumerate(zip(m.layers, base.layers)):
            if isinstance(lb, DenseLayer) and la.weight.shape != lb.weight.shape:
                raise ValueError(f"layer {l}: shape mismatch in vanilla average")
            if isinstance(lb, ConvLayer) and la.filters.shape != lb.filters.shape:
                raise ValueError(f"layer {l}: shape mismatch in vanilla average")
            if isinstance(lb, RecurrentLayer) and la.input_weight.shape != lb.input_weight.shape:
                raise ValueError(f"layer {l}: shape mismatch in vanilla average")
    lam = FusionConfig(lam=lam).resolved_lam(len(models))

    def avg(get):
        out = None
        for w, m in zip(lam, models):
            t = w * get(m)
            out = t if out is None else out + t
        return out

    layers = []
    for l, layer in enumerate(base.layers):
        if isinstance(layer, DenseLayer):
            layers.append(
                DenseLayer(
                    avg(lambda m: m.layers[l].weight), avg(lambda m: m.layers[l].bias)
                )
            )
        elif isinstance(layer, ConvLayer):
            layers.append(
                ConvLayer(
                    avg(lambda m: m.layers[l].filters), avg(lambda m: m.layers[l].bias)
                )
            )
        elif isinstance(layer, RecurrentLayer):
            layers.append(
                RecurrentLayer(
                    avg(lambda m: m.layers[l].input_weight),
                    avg(lambda m: m.layers[l].hidden_weight),
                    avg(lambda m: m.layers[l].bias),
                )
            )
        elif isinstance(layer, LstmLayer):
            gates = tuple(
                RecurrentLayer(
                    avg(lambda m, g=g: m.layers[l].gates[g].input_weight),
                    avg(lambda m, g=g: m.layers[l].gates[g].hidden_weight),
                    avg(lambda m, g=g: m.layers[l].gates[g].bias),
                )
                for g in range(4)
            )
            layers.append(LstmLayer(gates))
        elif isinstance(layer, ResidualBlock):
            inner = [
                DenseLayer(
                    avg(lambda m, j=j: m.layers[l].inner[j].weight),
                    avg(lambda m, j=j: m.layers[l].inner[j].bias),
                )
                for j in range(len(layer.inner))
            ]
            layers.append(ResidualBlock(inner, layer.skip_source))
    return Model(layers, base.input_dim, base.arch_tag)


def _row_normalized(mat):
    mat = _coupling_matrix(mat)
    r = mat.sum(axis=1)
    if np.any(r <= 0):
        raise FusionError("coupling has an empty row; cannot normalize")
    return mat / r[:, None]


def align_model(model: Model, couplings, prev_couplings=None) -> Model:
    """Transform a feedforward model into the fused coordinate frame.

    Applies W <- k * k_prev * Pi @ W @ Pi_prev^T per site and
    b <- k * Pi @ b, computed through row-normalized couplings so exact
    permutation couplings act as exact permutations. couplings: one per
    fusion site. prev_couplings defaults to the shifted site chain starting
    at the pinned input coupling, with the conv-to-dense spatial expansion
    applied the same way as during fusion; pass it explicitly to override
    (entries are then used as given, fully expanded).
    """
    if model.arch_tag in ("rnn", "lstm"):
        raise ValueError("recurrent models are aligned by align_recurrent_model")
    sites = _site_list(model)
    if len(couplings) != len(sites):
        raise ValueError(f"need {len(sites)} couplings, got {len(couplings)}")
    mats = [_coupling_matrix(c) for c in couplings]

    if prev_couplings is None:
        prev_mats = []
        prev = np.eye(model.input_dim) / model.input_dim
        for s_idx, site in enumerate(sites):
            _, kind, l, _ = site
            if (
                kind == "dense"
                and model.arch_tag == "cnn"
                and l > 0
                and isinstance(model.layers[l - 1], ConvLayer)
            ):
                spatial = model.layers[l].in_dim // model.layers[l - 1].out_channels
                prev = np.kron(prev, np.eye(spatial)) / spatial
            prev_mats.append(prev)
            prev = mats[s_idx]
    else:
        if len(prev_couplings) != len(sites):
            raise ValueError("prev_couplings must match the number of sites")
        prev_mats = [_coupling_matrix(c) for c in prev_couplings]

    layers = [_shallow_block_copy(layer) for layer in model.layers]
    for s_idx, site in enumerate(sites):
        _, kind, l, j = site
        Pi = _row_normalized(mats[s_idx])
        Pn = _row_normalized(prev_mats[s_idx])
        if kind == "dense":
            layer = model.layers[l]
            layers[l] = DenseLayer(Pi @ layer.weight @ Pn.T, Pi @ layer.bias)
        elif kind == "rdense":
            layer = model.layers[l].inner[j]
            layers[l].inner[j] = DenseLayer(Pi @ layer.weight @ Pn.T, Pi @ layer.bias)
        elif kind == "conv":
            layer = model.layers[l]
            filters = np.einsum("jg,gsab,qs->jqab", Pi, layer.filters, Pn, optimize=True)
            layers[l] = ConvLayer(filters, Pi @ layer.bias)
        else:
            raise ValueError(f"cannot align site kind {kind} here")
    return Model(layers, model.input_dim, model.arch_tag)


def _shallow_block_copy(layer):
    if isinstance(layer, ResidualBlock):
        return ResidualBlock(list(layer.inner), layer.skip_source)
    return layer
