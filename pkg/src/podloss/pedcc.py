"""Predefined evenly-distributed class centroids on the unit hypersphere.

A simplex centroid set consists of k unit vectors in n dimensions (k <= n+1)
whose pairwise inner products all equal -1/(k-1); this is the configuration
that maximizes the minimum inter-class angle. Circle sets place k unit
vectors at equal angular spacing on the 2-D unit circle and exist for
visualization; for k > 3 they do not satisfy the simplex Gram property.

Construction is analytic: regular-simplex vertices are built in k dimensions,
expressed in an orthonormal basis of the hyperplane orthogonal to the
all-ones vector (k-1 coordinates), zero-padded to n dimensions, and rotated
by a seeded random orthogonal matrix so the set never aligns with the
coordinate axes by default.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PEDC"
FORMAT_VERSION = 1

# Invariant tolerances.
NORM_TOL = 1e-12
DOT_TOL = 1e-9
GAP_TOL = 1e-12


class DimensionError(ValueError):
    """Class count exceeds what the latent dimension supports (k > n+1)."""


class RankError(ValueError):
    """Centroid set does not span a (k-1)-dimensional subspace."""


@dataclass(frozen=True)
class CentroidSet:
    """k fixed unit vectors, one per class, plus generation metadata.

    ``points`` is a (k, n) float64 matrix with one centroid per row. The
    array is marked read-only; centroid sets are immutable and safe to
    share across threads.
    """

    points: np.ndarray
    seed: int = 0
    mode: str = "simplex"  # "simplex" | "circle"

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError("points must be a (k, n) matrix")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if self.mode not in ("simplex", "circle"):
            raise ValueError(f"unknown centroid mode {self.mode!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def num_classes(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class SubspaceProjector:
    """Orthonormal basis of the centroid span and the matching projector.

    ``basis`` is (k-1, n) with orthonormal rows; ``projector`` is the n x n
    symmetric idempotent matrix basis.T @ basis.
    """

    basis: np.ndarray
    projector: np.ndarray

    @property
    def rank(self) -> int:
        return self.basis.shape[0]


@dataclass(frozen=True)
class CentroidReport:
    """Deviation report from :func:`verify_centroids`.

    For simplex sets ``max_pair_deviation`` is the worst absolute deviation
    of an off-diagonal pairwise dot product from -1/(k-1); for circle sets
    it is the worst deviation of a consecutive angular gap from 2*pi/k
    (radians).
    """

    max_norm_deviation: float
    max_pair_deviation: float
    pair_target: float
    mode: str

    @property
    def passed(self) -> bool:
        pair_tol = DOT_TOL if self.mode == "simplex" else GAP_TOL
        return self.max_norm_deviation <= NORM_TOL and self.max_pair_deviation <= pair_tol


def _helmert_basis(k: int) -> np.ndarray:
    """Orthonormal (k-1, k) basis of the hyperplane orthogonal to ones(k)."""
    basis = np.zeros((k - 1, k))
    for i in range(1, k):
        basis[i - 1, :i] = 1.0
        basis[i - 1, i] = -float(i)
        basis[i - 1] /= math.sqrt(i * (i + 1))
    return basis


def _random_rotation(n: int, seed: int) -> np.ndarray:
    """Seeded random orthogonal matrix: QR of a Gaussian, sign-fixed diagonal."""
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((n, n))
    q, r = np.linalg.qr(gauss)
    q *= np.sign(np.diag(r))
    return q


def generate_simplex_centroids(k: int, n: int, seed: int = 0, rotate: bool = True) -> CentroidSet:
    """Generate k unit centroids in n dims with pairwise dots -1/(k-1).

    Requires 2 <= k <= n+1. Output is bit-identical across runs for fixed
    (k, n, seed); different seeds differ by a global rotation only.
    ``rotate=False`` keeps the axis-aligned analytic construction for
    debugging.
    """
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    if k > n + 1:
        raise DimensionError(
            f"k > n+1: cannot place {k} evenly-distributed centroids in {n} dimensions"
        )
    # Regular simplex vertices in k dims: sqrt(k/(k-1)) * (e_i - ones/k),
    # then coordinates in the hyperplane orthogonal to ones(k).
    vertices = math.sqrt(k / (k - 1)) * (np.eye(k) - np.full((k, k), 1.0 / k))
    coords = vertices @ _helmert_basis(k).T  # (k, k-1), rows unit norm
    points = np.zeros((k, n))
    points[:, : k - 1] = coords
    if rotate:
        points = points @ _random_rotation(n, seed)
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    return CentroidSet(points=points, seed=seed, mode="simplex")


def generate_circle_centroids(k: int, phase: float = 0.0) -> CentroidSet:
    """k unit vectors in 2-D at angles phase + 2*pi*i/k."""
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    angles = phase + 2.0 * np.pi * np.arange(k) / k
    points = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return CentroidSet(points=points, seed=0, mode="circle")


def verify_centroids(cs: CentroidSet) -> CentroidReport:
    """Measure how far a centroid set deviates from its defining invariants."""
    norms = np.linalg.norm(cs.points, axis=1)
    max_norm_dev = float(np.max(np.abs(norms - 1.0)))
    k = cs.num_classes
    if cs.mode == "circle":
        angles = np.arctan2(cs.points[:, 1], cs.points[:, 0])
        gaps = np.mod(np.roll(angles, -1) - angles, 2.0 * np.pi)
        target = 2.0 * np.pi / k
        max_pair_dev = float(np.max(np.abs(gaps - target)))
    else:
        target = -1.0 / (k - 1)
        gram = cs.points @ cs.points.T
        off = gram[~np.eye(k, dtype=bool)]
        max_pair_dev = float(np.max(np.abs(off - target)))
    return CentroidReport(
        max_norm_deviation=max_norm_dev,
        max_pair_deviation=max_pair_dev,
        pair_target=target,
        mode=cs.mode,
    )


def subspace_projector(cs: CentroidSet, rank_tol: float = 1e-8) -> SubspaceProjector:
    """Orthonormal basis and projector for the (k-1)-dim centroid span.

    The k simplex centroids sum to zero, so their span has rank exactly
    k-1; a RankError is raised if the numerical rank differs.
    """
    k, n = cs.num_classes, cs.dim
    _, svals, vt = np.linalg.svd(cs.points, full_matrices=False)
    cutoff = rank_tol * svals[0]
    rank = int(np.sum(svals > cutoff))
    if rank != k - 1:
        raise RankError(f"centroid span has numerical rank {rank}, expected k-1={k - 1}")
    basis = vt[: k - 1]
    projector = basis.T @ basis
    return SubspaceProjector(basis=basis, projector=projector)


def save_centroids(cs: CentroidSet, path) -> None:
    """Write the binary centroid file (header + row-major little-endian f64)."""
    header = struct.pack(
        "<4sIIIQ", MAGIC, FORMAT_VERSION, cs.num_classes, cs.dim, cs.seed & 0xFFFFFFFFFFFFFFFF
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(cs.points.astype("<f8").tobytes(order="C"))


def load_centroids(path) -> CentroidSet:
    """Read a binary centroid file written by :func:`save_centroids`.

    The mode is reconstructed from the header: k <= n+1 is a simplex set,
    anything else must be a 2-D circle set.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header_size = struct.calcsize("<4sIIIQ")
    if len(raw) < header_size:
        raise ValueError(f"truncated centroid file: {len(raw)} bytes, header needs {header_size}")
    magic, version, k, n, seed = struct.unpack_from("<4sIIIQ", raw, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported centroid file version {version}")
    expected = header_size + k * n * 8
    if len(raw) != expected:
        raise ValueError(
            f"truncated centroid file: payload ends at offset {len(raw)}, expected {expected}"
        )
    points = np.frombuffer(raw, dtype="<f8", count=k * n, offset=header_size).reshape(k, n)
    mode = "simplex" if k <= n + 1 else "circle"
    return CentroidSet(points=points.copy(), seed=int(seed), mode=mode)


def export_centroids_text(cs: CentroidSet, path) -> None:
    """Plain-text export: one centroid per line, 17 significant digits."""
    with open(path, "w") as fh:
        for row in cs.points:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
