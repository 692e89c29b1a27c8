"""Moment codebook: projected codewords, nearest-codeword lookup, VQ losses, k-means priors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class CodebookError(ValueError):
    pass


@dataclass
class Codebook:
    """K x d codewords plus a d -> d linear projector shared by all of them."""

    entries: Tensor
    projector_weight: Tensor
    projector_bias: Tensor

    @classmethod
    def from_entries(cls, entries, requires_grad=True) -> "Codebook":
        e = np.asarray(entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 1:
            raise CodebookError(f"entries must be K x d with K >= 1, got {e.shape}")
        d = e.shape[1]
        return cls(Tensor(e.copy(), requires_grad, name="codebook.entries"),
                   Tensor(np.eye(d), requires_grad, name="codebook.projector_weight"),
                   Tensor(np.zeros(d), requires_grad, name="codebook.projector_bias"))

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    def project(self) -> Tensor:
        return project(self)


@dataclass
class Assignment:
    indices: np.ndarray
    quantized: Tensor
    distances: Optional[np.ndarray] = field(default=None, repr=False)


def project(codebook: Codebook) -> Tensor:
    """C' = C W + b."""
    return ad.linear(codebook.entries, codebook.projector_weight, codebook.projector_bias)


def nearest_indices(z: np.ndarray, codewords: np.ndarray, chunk: int = 4096):
    """Exact squared-L2 argmin over codewords along the last axis of ``z``.

    Distances are summed from explicit differences (not the expanded
    ||z||^2 - 2 z.c + ||c||^2 form) so exact ties stay exact; ties resolve to
    the lowest index.
    """
    z = np.asarray(z, dtype=np.float64)
    C = np.asarray(codewords, dtype=np.float64)
    if z.shape[-1] != C.shape[1]:
        raise CodebookError(f"dimension mismatch: features have d={z.shape[-1]}, "
                            f"codebook has d={C.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    idx = np.empty(flat.shape[0], dtype=np.intp)
    best = np.empty(flat.shape[0])
    step = max(1, chunk // max(C.shape[0], 1))
    for s in range(0, flat.shape[0], step):
        diff = flat[s:s + step, None, :] - C[None, :, :]
        dist = np.einsum("tkd,tkd->tk", diff, diff)
        idx[s:s + step] = np.argmin(dist, axis=1)
        best[s:s + step] = dist[np.arange(dist.shape[0]), idx[s:s + step]]
    return idx.reshape(z.shape[:-1]), best.reshape(z.shape[:-1])


def lookup(z, projected: Tensor) -> Assignment:
    """Assign each feature row to its nearest projected codeword.

    The selection carries no gradient; ``quantized`` is a differentiable
    gather of the selected rows of ``projected``.
    """
    zv = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if projected.shape[0] < 1:
        raise CodebookError("empty codebook")
    idx, dist = nearest_indices(zv, projected.values)
    return Assignment(idx, ad.gather(projected, idx, name="quantized"), dist)


def _mean_sq(a: Tensor, b: Tensor) -> Tensor:
    n = int(np.prod(np.broadcast_shapes(a.shape, b.shape)))
    return ad.scale(ad.sum(ad.squared_distance(a, b)), 1.0 / n)


def codebook_loss(z_t, assignment: Assignment) -> Tensor:
    """mean((quantized - sg(z_t))^2); moves only the codebook."""
    return _mean_sq(assignment.quantized, ad.stop_gradient(z_t))


def commitment_loss(z_t, assignment: Assignment) -> Tensor:
    """mean((sg(quantized) - z_t)^2); moves only whatever produced ``z_t``."""
    return _mean_sq(ad.stop_gradient(assignment.quantized), z_t)


# ---------------------------------------------------------------- k-means prior


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    costs: List[float]
    iterations: int


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(X, K, rng):
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = ((X - X[first]) ** 2).sum(1)
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than clusters
            i = int(rng.integers(n))
        else:
            i = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            i = min(i, n - 1)
        centers[k] = X[i]
        closest = np.minimum(closest, ((X - X[i]) ** 2).sum(1))
    return centers


def kmeans(features, K: int, max_iters: int = 50, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    Empty clusters are re-seeded to the point currently farthest from its
    own center. ``costs[i]`` is the assignment cost after iteration i and is
    non-increasing.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise CodebookError(f"features must be N x d, got {X.shape}")
    if K < 1 or X.shape[0] < K:
        raise CodebookError(f"need N >= K >= 1, got N={X.shape[0]}, K={K}")
    if max_iters < 1:
        raise CodebookError("max_iters must be at least 1")
    rng = np.random.default_rng(seed)
    C = _plusplus(X, K, rng)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    costs: List[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        point_cost = ((X - C[labels]) ** 2).sum(1)
        for k in np.flatnonzero(~nonempty):
            far = int(np.argmax(point_cost))
            C[k] = X[far]
            labels[far] = k
            point_cost[far] = 0.0
        D = _sq_dists(X, C)
        new = np.argmin(D, axis=1)
        # keep the current label when it is already optimal (guards rounding)
        keep = D[np.arange(len(X)), labels] <= D[np.arange(len(X)), new]
        new = np.where(keep, labels, new)
        costs.append(float(((X - C[new]) ** 2).sum()))
        changed = np.any(new != labels)
        labels = new
        if not changed:
            break
    return KMeansResult(C, labels, costs, it)


def kmeans_init(features, K: int, max_iters: int = 50, seed: int = 0) -> np.ndarray:
    return kmeans(features, K, max_iters, seed).centers


def selection_init(features, K: int, seed: int = 0) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] < K:
        raise CodebookError(f"cannot select {K} rows from {X.shape[0]} features")
    rng = np.random.default_rng(seed)
    return X[np.sort(rng.choice(X.shape[0], size=K, replace=False))].copy()


def random_init(K: int, d: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(scale=1.0 / np.sqrt(d), size=(K, d))


# ---------------------------------------------------------------- utilization


def index_histogram(indices, K: int) -> np.ndarray:
    return np.bincount(np.asarray(indices, dtype=np.intp).reshape(-1), minlength=K)


def utilization(index_histogram) -> float:
    counts = np.asarray(index_histogram)
    if counts.size == 0:
        return 0.0
    if np.any(counts < 0):
        raise CodebookError("histogram counts must be non-negative")
    return float(np.count_nonzero(counts)) / counts.size
