"""Softmax-free classification on fixed evenly-distributed class centroids.

Numerical library and CLI implementing norm-adaptive cosine and
self-correlation losses over predefined class centroids, with analytic
gradients, a minimal trainable backbone, cosine-distance classification,
and desk-scale experiment tooling.
"""

from .classify import (
    EvalMetrics,
    GdaModel,
    classify_cosine,
    classify_cosine_batch,
    gda_fit,
    gda_predict,
    norm_stratified_accuracy,
    offdiag_energy,
    subspace_alignment,
)
from .data import Dataset, load_cifar10_bin, load_digits8, load_mnist_idx, synth_blobs
from .losses import (
    DeltaState,
    LatentBatch,
    LossBundle,
    cosine_loss,
    delta_schedule,
    mse_loss_normalized,
    nac_loss,
    pod_loss,
    sc_loss,
    softmax_ce_loss,
)
from .net import Network, build_network, grad_check, load_checkpoint, save_checkpoint
from .pedcc import (
    CentroidSet,
    SubspaceProjector,
    generate_circle_centroids,
    generate_simplex_centroids,
    load_centroids,
    save_centroids,
    subspace_projector,
    verify_centroids,
)
from .train import TrainConfig, TrainHistory, evaluate, run_training

__version__ = "0.1.0"

__all__ = [
    "CentroidSet",
    "Dataset",
    "DeltaState",
    "EvalMetrics",
    "GdaModel",
    "LatentBatch",
    "LossBundle",
    "Network",
    "SubspaceProjector",
    "TrainConfig",
    "TrainHistory",
    "build_network",
    "classify_cosine",
    "classify_cosine_batch",
    "cosine_loss",
    "delta_schedule",
    "evaluate",
    "gda_fit",
    "gda_predict",
    "generate_circle_centroids",
    "generate_simplex_centroids",
    "grad_check",
    "load_centroids",
    "load_checkpoint",
    "load_cifar10_bin",
    "load_digits8",
    "load_mnist_idx",
    "mse_loss_normalized",
    "nac_loss",
    "norm_stratified_accuracy",
    "offdiag_energy",
    "pod_loss",
    "run_training",
    "save_centroids",
    "save_checkpoint",
    "sc_loss",
    "softmax_ce_loss",
    "subspace_alignment",
    "subspace_projector",
    "synth_blobs",
    "verify_centroids",
]
