"""Class decisions from latent features, plus diagnostic analyses.

The primary decision rule is the cosine between a latent vector and each
unit centroid, which reduces to an argmax of plain dot products and is
therefore invariant to positive rescaling of the feature. Gaussian
discriminant analysis over the latents is provided as an alternative rule.

Diagnostics cover the quantities tracked during training: accuracy split
at the mean latent norm, the off-diagonal self-correlation energy, and the
fraction of feature energy lying in the centroid span.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .losses import _self_correlation, offdiag_squared_sum
from .pedcc import CentroidSet, SubspaceProjector


def classify_cosine(x: np.ndarray, cs: CentroidSet) -> int:
    """Index of the centroid with the largest cosine to x.

    Computed as argmax of x . p_i over unit centroids (the feature norm
    cancels), so the decision is exactly invariant to positive scaling.
    Ties break to the smallest index; the zero vector scores 0 against
    every class and lands on class 0.
    """
    return int(np.argmax(cs.points @ np.asarray(x, dtype=np.float64)))


def classify_cosine_batch(X: np.ndarray, cs: CentroidSet) -> np.ndarray:
    """Row-wise cosine classification; returns (B,) predicted labels."""
    scores = np.asarray(X, dtype=np.float64) @ cs.points.T
    return np.argmax(scores, axis=1)


def degenerate_rows(X: np.ndarray) -> np.ndarray:
    """Mask of zero-vector rows, whose cosine decision is the class-0 fallback."""
    return ~np.any(np.asarray(X) != 0.0, axis=1)


@dataclass
class GdaModel:
    """Per-class Gaussian fit: means, shrunk covariances, log-priors.

    Covariances are shrunk as (1-g) S + g tr(S)/n I and must be positive
    definite afterwards; Cholesky factors and log-determinants are cached
    for prediction.
    """

    means: np.ndarray  # (k, n)
    covariances: np.ndarray  # (k, n, n)
    log_priors: np.ndarray  # (k,)
    shrinkage: float
    chol: np.ndarray = field(repr=False, default=None)
    log_dets: np.ndarray = field(repr=False, default=None)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def gda_fit(features: np.ndarray, labels: np.ndarray, shrinkage: float = 0.1) -> GdaModel:
    """Fit one Gaussian per class with covariance shrinkage toward a scaled identity."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    classes = np.unique(labels)
    k = int(classes.max()) + 1
    n = features.shape[1]
    means = np.zeros((k, n))
    covs = np.zeros((k, n, n))
    priors = np.zeros(k)
    for c in range(k):
        members = features[labels == c]
        if members.shape[0] < 2:
            raise ValueError(f"class {c} has {members.shape[0]} samples, need at least 2")
        means[c] = members.mean(axis=0)
        centered = members - means[c]
        emp = centered.T @ centered / (members.shape[0] - 1)
        covs[c] = (1.0 - shrinkage) * emp + shrinkage * (np.trace(emp) / n) * np.eye(n)
        priors[c] = members.shape[0] / features.shape[0]
    try:
        chol = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"singular covariance after shrinkage {shrinkage}; increase shrinkage"
        ) from exc
    log_dets = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return GdaModel(
        means=means,
        covariances=covs,
        log_priors=np.log(priors),
        shrinkage=shrinkage,
        chol=chol,
        log_dets=log_dets,
    )


def _gda_scores(model: GdaModel, X: np.ndarray) -> np.ndarray:
    """Log-posterior scores (up to a constant): log prior + Gaussian log-density."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    k = model.num_classes
    scores = np.empty((X.shape[0], k))
    if model.chol is None:
        model.chol = np.linalg.cholesky(model.covariances)
        model.log_dets = 2.0 * np.sum(
            np.log(np.diagonal(model.chol, axis1=1, axis2=2)), axis=1
        )
    for c in range(k):
        diff = (X - model.means[c]).T
        z = np.linalg.solve(model.chol[c], diff)  # lower-triangular system
        quad = np.sum(z * z, axis=0)
        scores[:, c] = model.log_priors[c] - 0.5 * (model.log_dets[c] + quad)
    return scores


def gda_predict(model: GdaModel, x: np.ndarray) -> int:
    """Most likely class for a single latent vector; ties break low."""
    return int(np.argmax(_gda_scores(model, x)[0]))


def gda_predict_batch(model: GdaModel, X: np.ndarray) -> np.ndarray:
    return np.argmax(_gda_scores(model, X), axis=1)


@dataclass
class StratifiedAccuracy:
    """Accuracy split at the mean latent norm of the evaluation set.

    An empty stratum (all norms equal) reports None rather than 0.
    """

    low: float | None
    high: float | None
    low_count: int
    high_count: int
    threshold: float


def norm_stratified_accuracy(latents, labels, predictions) -> StratifiedAccuracy:
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if latents.shape[0] == 0:
        raise ValueError("evaluation set is empty")
    norms = np.linalg.norm(latents, axis=1)
    threshold = float(norms.mean())
    low_mask = norms < threshold
    correct = labels == predictions

    def stratum(mask):
        return float(correct[mask].mean()) if mask.any() else None

    return StratifiedAccuracy(
        low=stratum(low_mask),
        high=stratum(~low_mask),
        low_count=int(low_mask.sum()),
        high_count=int((~low_mask).sum()),
        threshold=threshold,
    )


def subspace_alignment(latents, projector: SubspaceProjector) -> tuple[float, int]:
    """Mean of ||P x|| / ||x|| over nonzero latents; returns (ratio, skipped).

    The ratio lies in [0, 1] and approaches 1 when features concentrate in
    the centroid span. Zero vectors are skipped and counted.
    """
    latents = np.asarray(latents, dtype=np.float64)
    norms = np.linalg.norm(latents, axis=1)
    keep = norms > 0.0
    skipped = int((~keep).sum())
    if not keep.any():
        raise ValueError("all latents are zero vectors")
    projected = latents[keep] @ projector.projector
    ratios = np.linalg.norm(projected, axis=1) / norms[keep]
    return float(ratios.mean()), skipped


def offdiag_energy(latents, labels, cs: CentroidSet) -> float:
    """Off-diagonal self-correlation energy of an evaluation set (no gradient)."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = latents.shape[0]
    if b < 2:
        raise ValueError("need at least 2 samples")
    norms = np.linalg.norm(latents, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-vector feature cannot be normalized")
    xn = latents / norms[:, None]
    diff = (xn - cs.points[labels]).T
    return offdiag_squared_sum(_self_correlation(diff, b))


@dataclass
class EvalMetrics:
    """One-pass evaluation summary over a dataset split."""

    accuracy: float
    per_class_accuracy: list
    low_norm_accuracy: float | None
    high_norm_accuracy: float | None
    mean_norm: float
    offdiag_energy: float | None
    subspace_alignment: float | None
    n_samples: int
    n_degenerate: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalMetrics":
        return cls(**json.loads(text))


def compute_metrics(latents, labels, predictions, cs: CentroidSet,
                    projector: SubspaceProjector | None = None) -> EvalMetrics:
    """Assemble every EvalMetrics field from one pass over the latents."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    correct = labels == predictions
    per_class = []
    for c in range(cs.num_classes):
        mask = labels == c
        per_class.append(float(correct[mask].mean()) if mask.any() else None)
    strata = norm_stratified_accuracy(latents, labels, predictions)
    degenerate = degenerate_rows(latents)
    try:
        energy = offdiag_energy(latents[~degenerate], labels[~degenerate], cs)
    except ValueError:
        energy = None
    alignment = None
    if projector is not None:
        try:
            alignment, _ = subspace_alignment(latents, projector)
        except ValueError:
            alignment = None
    return EvalMetrics(
        accuracy=float(correct.mean()),
        per_class_accuracy=per_class,
        low_norm_accuracy=strata.low,
        high_norm_accuracy=strata.high,
        mean_norm=float(np.linalg.norm(latents, axis=1).mean()),
        offdiag_energy=energy,
        subspace_alignment=alignment,
        n_samples=int(labels.shape[0]),
        n_degenerate=int(degenerate.sum()),
    )


def export_features_csv(path, latents, labels, predictions) -> None:
    """Feature export: header id,label,pred,norm,f0..f{n-1}; one row per sample."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    n = latents.shape[1] if latents.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "pred", "norm"] + [f"f{i}" for i in range(n)])
        for i in range(latents.shape[0]):
            norm = float(np.linalg.norm(latents[i]))
            writer.writerow(
                [i, int(labels[i]), int(predictions[i]), repr(norm)]
                + [repr(float(v)) for v in latents[i]]
            )


def read_features_csv(path):
    """Inverse of :func:`export_features_csv`; returns (latents, labels, preds)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 4
        rows = list(reader)
    latents = np.array([[float(v) for v in row[4 : 4 + n]] for row in rows]).reshape(len(rows), n)
    labels = np.array([int(row[1]) for row in rows], dtype=np.int64)
    preds = np.array([int(row[2]) for row in rows], dtype=np.int64)
    return latents, labels, preds
