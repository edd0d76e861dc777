"""Loss functions over latent features, with analytic gradients.

Every loss here constrains the raw latent vectors x_i of a mini-batch
against a fixed centroid set; none touches a posterior probability except
the softmax cross-entropy baseline. Each batch loss returns a
:class:`LossBundle` holding the scalar value and the full (B, n) gradient
with respect to the raw features, so a backbone can be trained by plain
backpropagation without any autodiff framework.

Loss definitions, with p the unit centroid assigned to a sample and
r = ||x|| the raw feature norm:

* cosine-to-centroid:   cos = (x . p) / (r + eps)
* norm-adaptive cosine: cos_na = (x . p) / (r + max(delta, eps)), where the
  schedule delta = alpha * epoch * mean_norm grows over training and
  pressures small-norm features to grow.
* nac loss:     mean over the batch of (1 - cos_na)^2
* cosine loss:  nac loss with delta = 0
* mse loss:     (1/2B) sum ||x_i/r_i - p_i||^2, algebraically mean(1 - cos)
* sc loss:      sum of squared off-diagonal entries of
                R = D D^T / (B - 1), where D (n x B) stacks columns
                x_i/r_i - p_i; penalizes inter-dimension correlation.
* pod loss:     nac + lam * sc
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pedcc import CentroidSet

DEFAULT_EPS = 1e-12

# Guard used only inside gradient expressions to avoid 0/0 at x = 0, where
# the losses are not differentiable anyway; such rows get zero gradient.
_ZERO_NORM_GUARD = 1e-300


@dataclass
class LatentBatch:
    """Raw latent features of a mini-batch with their class labels."""

    features: np.ndarray  # (B, n) float64, unnormalized
    labels: np.ndarray  # (B,) integers in [0, k)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a (B, n) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be one integer per feature row")
        if self.features.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative")

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DeltaState:
    """Inputs of the adaptive denominator schedule delta = alpha * epoch * mean_norm.

    ``epoch`` is 1-based; ``mean_norm`` is the average raw latent L2 norm
    over the training set after the previous epoch, initialized to 0.05
    before the first epoch.
    """

    alpha: float
    epoch: int
    mean_norm: float = 0.05
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epoch < 1:
            raise ValueError("epoch index is 1-based")
        if self.mean_norm <= 0:
            raise ValueError("mean_norm must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class LossBundle:
    """Scalar loss plus its gradient with respect to the raw features."""

    value: float
    grad: np.ndarray  # same shape as the batch features


@dataclass
class Logits:
    """Outputs of a trainable linear head (softmax baseline path only)."""

    values: np.ndarray  # (B, k)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("logits must be a (B, k) matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("logits must be finite")


@dataclass
class DerivativeProfile:
    """Sampled d(loss)/d(theta) curve over [0, 180] degrees."""

    theta_deg: np.ndarray
    values: np.ndarray
    max_value: float
    argmax_deg: float


def delta_schedule(state: DeltaState) -> float:
    """The adaptive additive denominator value alpha * epoch * mean_norm."""
    return state.alpha * state.epoch * state.mean_norm


def cosine_to_centroid(x: np.ndarray, p: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    """Guarded cosine (x . p) / (||x|| + eps) against a unit centroid."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return float(np.dot(x, p) / (np.linalg.norm(x) + eps))


def norm_adaptive_cosine(
    x: np.ndarray, p: np.ndarray, delta: float, eps: float = DEFAULT_EPS
) -> float:
    """Cosine with the denominator inflated to ||x|| + max(delta, eps).

    Reduces exactly to :func:`cosine_to_centroid` when delta <= eps.
    """
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return float(np.dot(x, p) / (np.linalg.norm(x) + max(delta, eps)))


def _assigned_centroids(batch: LatentBatch, cs: CentroidSet) -> np.ndarray:
    if batch.dim != cs.dim:
        raise ValueError(
            f"latent dimension {batch.dim} does not match centroid dimension {cs.dim}"
        )
    if int(batch.labels.max()) >= cs.num_classes:
        raise ValueError("label out of range for the centroid set")
    return cs.points[batch.labels]


def nac_loss(
    batch: LatentBatch, cs: CentroidSet, delta: float = 0.0, eps: float = DEFAULT_EPS
) -> LossBundle:
    """Mean of (1 - cos_na)^2 over the batch, with its feature gradient.

    Per sample, with c = (x . p) / (r + d) and d = max(delta, eps):

        d/dx (1 - c)^2 = 2 (1 - c) * (c x / (r (r + d)) - p / (r + d)) / B

    Rows with exactly zero norm contribute loss 1 and zero gradient (the
    loss is not differentiable there).
    """
    x = batch.features
    p = _assigned_centroids(batch, cs)
    b = batch.batch_size
    d = max(float(delta), eps)
    r = np.linalg.norm(x, axis=1)
    denom = r + d
    cos = np.einsum("ij,ij->i", x, p) / denom
    resid = 1.0 - cos
    value = math.fsum(resid * resid) / b
    r_safe = np.maximum(r, _ZERO_NORM_GUARD)
    coef = 2.0 * resid / b
    grad = coef[:, None] * ((cos / (r_safe * denom))[:, None] * x - p / denom[:, None])
    grad[r == 0.0] = 0.0
    return LossBundle(value=value, grad=grad)


def cosine_loss(batch: LatentBatch, cs: CentroidSet, eps: float = DEFAULT_EPS) -> LossBundle:
    """Mean of (1 - cos)^2; identical to the norm-adaptive loss at delta = 0."""
    return nac_loss(batch, cs, delta=0.0, eps=eps)


def mse_loss_normalized(batch: LatentBatch, cs: CentroidSet) -> LossBundle:
    """Half mean squared distance between unit-normalized features and centroids.

    Algebraically equal to mean(1 - cos); kept as the squared-distance form
    so the identity can be asserted against the cosine form. The per-sample
    gradient is ((x.p / r) * x / r - p) / (r B). Zero-norm features are
    rejected (normalization undefined).
    """
    x = batch.features
    p = _assigned_centroids(batch, cs)
    b = batch.batch_size
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0.0):
        raise ValueError("zero-vector feature cannot be normalized")
    xn = x / r[:, None]
    diff = xn - p
    value = math.fsum(np.einsum("ij,ij->i", diff, diff)) / (2.0 * b)
    cos = np.einsum("ij,ij->i", xn, p)
    grad = (cos[:, None] * xn - p) / (r[:, None] * b)
    return LossBundle(value=value, grad=grad)


def _self_correlation(diff: np.ndarray, batch_size: int) -> np.ndarray:
    """R = D D^T / (B - 1) for an (n, B) difference matrix."""
    return diff @ diff.T / (batch_size - 1)


def offdiag_squared_sum(mat: np.ndarray) -> float:
    """Sum of squared off-diagonal entries."""
    off = mat - np.diag(np.diag(mat))
    return float(np.sum(off * off))


def sc_loss(batch: LatentBatch, cs: CentroidSet, pearson: bool = False) -> LossBundle:
    """Self-correlation constraint: off-diagonal energy of R = D D^T / (B-1).

    D stacks the columns x_i/r_i - p_i. The gradient flows through the
    unit normalization of the features. With ``pearson=True`` the matrix
    is rescaled to R_ij / sqrt(R_ii R_jj) before the off-diagonal penalty
    (ablation variant; the default is the plain product form).
    """
    x = batch.features
    p = _assigned_centroids(batch, cs)
    b = batch.batch_size
    if b < 2:
        raise ValueError("self-correlation loss needs a batch of at least 2 samples")
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0.0):
        raise ValueError("zero-vector feature cannot be normalized")
    xn = x / r[:, None]
    diff = (xn - p).T  # (n, B)
    corr = _self_correlation(diff, b)
    if pearson:
        diag = np.diag(corr)
        scale = np.sqrt(np.outer(diag, diag))
        scale_safe = np.maximum(scale, _ZERO_NORM_GUARD)
        cnorm = corr / scale_safe
        off = cnorm - np.diag(np.diag(cnorm))
        value = float(np.sum(off * off))
        # d value / d R: off-diagonals through the numerator, diagonals
        # through both sqrt factors of their row/column.
        g_corr = 2.0 * off / scale_safe
        diag_safe = np.maximum(diag, _ZERO_NORM_GUARD)
        np.fill_diagonal(g_corr, -2.0 * np.sum(off * off, axis=1) / diag_safe)
    else:
        off = corr - np.diag(np.diag(corr))
        value = float(np.sum(off * off))
        g_corr = 2.0 * off
    # value depends on D through R = D D^T/(B-1); with symmetric G = dvalue/dR,
    # dvalue/dD = 2 G D / (B-1).
    g_diff = 2.0 * g_corr @ diff / (b - 1)  # (n, B)
    g_xn = g_diff.T  # (B, n)
    grad = (g_xn - xn * np.einsum("ij,ij->i", xn, g_xn)[:, None]) / r[:, None]
    return LossBundle(value=value, grad=grad)


def pod_loss(
    batch: LatentBatch,
    cs: CentroidSet,
    delta: float = 0.0,
    lam: float = 1.0,
    eps: float = DEFAULT_EPS,
    pearson: bool = False,
) -> LossBundle:
    """Total objective: nac + lam * sc. With lam = 0 it is exactly nac."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    nac = nac_loss(batch, cs, delta=delta, eps=eps)
    if lam == 0.0:
        return nac
    sc = sc_loss(batch, cs, pearson=pearson)
    return LossBundle(value=nac.value + lam * sc.value, grad=nac.grad + lam * sc.grad)


def softmax_ce_loss(logits: Logits, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Numerically stabilized softmax cross-entropy and its logit gradient.

    Returns (value, grad) with grad = (softmax(z) - onehot) / B.
    """
    z = logits.values
    labels = np.asarray(labels, dtype=np.int64)
    b, k = z.shape
    if labels.shape != (b,):
        raise ValueError("labels must be one integer per logit row")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range for the logit width")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logprob = shifted[np.arange(b), labels] - logsumexp
    value = -math.fsum(logprob) / b
    grad = np.exp(shifted - logsumexp[:, None])
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return value, grad


def derivative_profile(kind: str, step_deg: float = 0.1) -> DerivativeProfile:
    """Sample d(loss)/d(theta) for the per-sample angular losses.

    ``kind`` selects the loss shape: "one_minus_cos" has derivative
    sin(theta), which never exceeds 1; "one_minus_cos_sq" has derivative
    2 (1 - cos) sin, peaking at 3*sqrt(3)/2 at 120 degrees. The grid must
    be at least 0.5-degree fine.
    """
    if step_deg <= 0 or step_deg > 0.5:
        raise ValueError("grid resolution must be in (0, 0.5] degrees")
    theta_deg = np.arange(0.0, 180.0 + step_deg / 2, step_deg)
    theta = np.deg2rad(theta_deg)
    if kind == "one_minus_cos":
        values = np.sin(theta)
    elif kind == "one_minus_cos_sq":
        values = 2.0 * (1.0 - np.cos(theta)) * np.sin(theta)
    else:
        raise ValueError(f"unknown profile kind {kind!r}")
    idx = int(np.argmax(values))
    return DerivativeProfile(
        theta_deg=theta_deg,
        values=values,
        max_value=float(values[idx]),
        argmax_deg=float(theta_deg[idx]),
    )
