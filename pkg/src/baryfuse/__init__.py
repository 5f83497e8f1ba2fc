"""Layer-wise neural network fusion via entropic optimal transport barycenters.

The package aligns the hidden units of several trained networks with soft
couplings (entropic OT / Gromov-Wasserstein fixed points) and averages the
aligned weights into a single fused model. It also ships the plain baselines
(elementwise averaging, single-pass OT fusion), a tiny deterministic trainer
for synthetic tasks, and loss-landscape instruments for measuring linear mode
connectivity barriers before and after alignment.
"""

import os as _os

# cap BLAS threads before numpy first loads (no-op if numpy is already in)
if "BARYFUSE_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["BARYFUSE_THREADS"])

from .tensorops import sq_loss_tensor_apply, frobenius_loss_tensor_apply
from .ot import (
    SinkhornParams,
    Coupling,
    SinkhornUnderflowError,
    uniform_hist,
    sinkhorn,
    gw_iterate_pairs,
    entropic_gw_solve,
)
from .model import (
    DenseLayer,
    ConvLayer,
    RecurrentLayer,
    LstmLayer,
    ResidualBlock,
    Model,
    validate,
)
from .mfir import (
    save_model,
    load_model,
    save_couplings,
    load_couplings,
    MfirError,
)
from .fusion import (
    FusionConfig,
    FusionResult,
    FusionError,
    first_layer_coupling,
    barycenter_matrix_update,
    extend_with_bias_node,
    wb_fuse_layer,
    wb_fuse_model,
    resnet_coupling_policy,
    ot_fusion_baseline,
    vanilla_average,
    align_model,
)
from .recurrent_fusion import (
    GwbConfig,
    gwb_fuse_layer,
    lstm_fuse_layer,
    gwb_fuse_model,
    align_recurrent_model,
)
from .network import forward, predict, accuracy
from .datasets import (
    Dataset,
    two_gaussians,
    two_moons,
    sequence_parity,
    save_dataset,
    load_dataset,
)
from .training import TrainingError, train
from .landscape import (
    PlaneGrid,
    flatten_model,
    unflatten_model,
    make_plane,
    grid_eval,
    grid_to_csv,
    segment_barrier,
)

__version__ = "0.1.0"
