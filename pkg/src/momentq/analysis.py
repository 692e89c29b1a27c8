"""Codebook diagnostics: 2-D latent maps, fg/bg separation and codebook evolution."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

LABELS = ("foreground", "background", "codeword")


class AnalysisError(ValueError):
    pass


def project_2d(points, method: str = "pca") -> np.ndarray:
    """Coordinates on the top two principal components of ``points`` (M x d).

    Each eigenvector's largest-magnitude component is made positive so the
    output does not depend on the eigensolver's sign choice.
    """
    if method != "pca":
        raise AnalysisError(f"unknown projection method {method!r}")
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise AnalysisError("project_2d needs at least 2 points in a 2-D array")
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise AnalysisError("rank-deficient input: all points are identical")
    cov = Xc.T @ Xc / X.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals, kind="stable")[::-1][:2]]
    if top.shape[1] < 2:
        top = np.concatenate([top, np.zeros((top.shape[0], 1))], axis=1)
    for j in range(top.shape[1]):
        k = int(np.argmax(np.abs(top[:, j])))
        if top[k, j] < 0:
            top[:, j] = -top[:, j]
    return Xc @ top


def explained_variance(points, n: int = 2) -> float:
    X = np.asarray(points, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    vals = np.sort(np.linalg.eigvalsh(Xc.T @ Xc))[::-1]
    return float(vals[:n].sum() / vals.sum())


def _pairwise(X, Y, chunk: int = 64) -> np.ndarray:
    # direct differences, chunked over rows to bound memory
    out = np.empty((len(X), len(Y)))
    for i in range(0, len(X), chunk):
        out[i:i + chunk] = np.sqrt(((X[i:i + chunk, None, :] - Y[None, :, :]) ** 2).sum(-1))
    return out


def silhouette(fg, bg) -> float:
    """Mean silhouette coefficient of the two-cluster partition fg / bg (Euclidean)."""
    X = np.concatenate([fg, bg], axis=0)
    lab = np.r_[np.zeros(len(fg), dtype=int), np.ones(len(bg), dtype=int)]
    D = _pairwise(X, X)
    s = np.zeros(len(X))
    for i in range(len(X)):
        same = lab == lab[i]
        a = D[i, same].sum() / (same.sum() - 1)
        b = D[i, ~same].mean()
        m = max(a, b)
        s[i] = (b - a) / m if m > 0 else 0.0
    return float(s.mean())


def linear_probe_accuracy(fg, bg) -> float:
    """Training accuracy of a least-squares classifier with targets +1 (fg) / -1 (bg)."""
    X = np.concatenate([fg, bg], axis=0)
    X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    y = np.r_[np.ones(len(fg)), -np.ones(len(bg))]
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(np.mean(np.where(X @ w > 0, 1.0, -1.0) == y))


def separation_stats(fg, bg) -> Dict[str, float]:
    fg = np.asarray(fg, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)
    if fg.ndim != 2 or bg.ndim != 2 or len(fg) < 2 or len(bg) < 2:
        raise AnalysisError("separation_stats needs at least 2 points per class")
    if not np.any(fg - fg[0]) and not np.any(bg - bg[0]) and np.array_equal(fg[0], bg[0]):
        raise AnalysisError("degenerate classes: every point is identical")
    return {"silhouette": silhouette(fg, bg),
            "centroid_gap": float(np.linalg.norm(fg.mean(0) - bg.mean(0))),
            "linear_probe_accuracy": linear_probe_accuracy(fg, bg)}


def split_by_labels(features: Sequence[np.ndarray], labels: Sequence[np.ndarray]):
    """Stack per-video (T x d) features into fg / bg rows using saliency labels."""
    F = np.concatenate([np.asarray(f) for f in features], axis=0)
    L = np.concatenate([np.ravel(l) for l in labels]) > 0
    return F[L], F[~L]


# ---------------------------------------------------------------- embedding map


@dataclass
class EmbeddingMap:
    coords: np.ndarray
    labels: List[str]

    def __post_init__(self):
        if len(self.coords) != len(self.labels):
            raise AnalysisError("coordinate count differs from label count")
        bad = set(self.labels) - set(LABELS)
        if bad:
            raise AnalysisError(f"unknown labels {sorted(bad)}")

    def rows(self):
        for i, (lab, (x, y)) in enumerate(zip(self.labels, self.coords)):
            yield {"point_id": i, "label": lab, "x": float(x), "y": float(y)}


def embedding_map(fg, bg, codewords=None) -> EmbeddingMap:
    parts = [np.asarray(fg), np.asarray(bg)]
    labels = ["foreground"] * len(fg) + ["background"] * len(bg)
    if codewords is not None and len(codewords):
        parts.append(np.asarray(codewords))
        labels += ["codeword"] * len(codewords)
    return EmbeddingMap(project_2d(np.concatenate(parts, axis=0)), labels)


# ---------------------------------------------------------------- evolution


def dispersion(codewords) -> float:
    """Mean pairwise L2 distance between codewords; 0 for fewer than two."""
    C = np.asarray(codewords, dtype=np.float64)
    n = len(C)
    if n < 2:
        return 0.0
    D = _pairwise(C, C)
    return float(D[np.triu_indices(n, 1)].mean())


def evolution_report(snapshots) -> List[Dict[str, float]]:
    """Per-snapshot effective codeword count and dispersion of the effective projected codewords."""
    out = []
    for s in snapshots:
        ids = np.asarray(s.effective_ids, dtype=np.intp)
        out.append({"epoch": int(s.epoch), "effective_count": int(len(ids)),
                    "dispersion": dispersion(np.asarray(s.projected)[ids])})
    return out


def _write(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns})


def write_embedding_csv(path, emap: EmbeddingMap) -> None:
    _write(path, ["point_id", "label", "x", "y"], emap.rows())


def write_evolution_csv(path, rows) -> None:
    _write(path, ["epoch", "effective_count", "dispersion"], rows)
