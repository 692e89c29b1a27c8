import csv
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentq.analysis import (AnalysisError, EmbeddingMap, dispersion, embedding_map,
                              evolution_report, explained_variance, linear_probe_accuracy,
                              project_2d, separation_stats, silhouette, split_by_labels,
                              write_embedding_csv, write_evolution_csv)


def pdist(X):
    n = len(X)
    return np.array([np.linalg.norm(X[i] - X[j]) for i in range(n) for j in range(i + 1, n)])


def orthonormal(d, k, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q[:, :k]


# ---------------------------------------------------------------- projection


def test_plane_distances_preserved():
    r = np.random.default_rng(0)
    flat = r.normal(size=(30, 2)) * [3.0, 1.0]
    X = flat @ orthonormal(10, 2, 1).T + r.normal(size=10)
    np.testing.assert_allclose(pdist(project_2d(X)), pdist(X), rtol=0, atol=1e-8)


def test_isotropic_explained_variance():
    d, n = 20, 20000
    X = np.random.default_rng(2).normal(size=(n, d))
    # top-2 of d sample eigenvalues sits a little above 2/d; allow the spread
    ev = explained_variance(X)
    assert abs(ev - 2 / d) < 0.02


def test_duplicates_share_coordinates():
    X = np.random.default_rng(3).normal(size=(8, 5))
    Y = project_2d(np.vstack([X, X]))
    np.testing.assert_array_equal(Y[:8], Y[8:])


def test_identical_points_rejected():
    with pytest.raises(AnalysisError, match="rank-deficient"):
        project_2d(np.ones((4, 3)))
    with pytest.raises(AnalysisError):
        project_2d(np.ones((1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-100, 100))
def test_translation_invariant_rotation_equivariant(seed, shift):
    r = np.random.default_rng(seed)
    X = r.normal(size=(12, 6)) * np.array([5, 3, 1, 0.5, 0.2, 0.1])
    Y = project_2d(X)
    np.testing.assert_allclose(project_2d(X + shift), Y, rtol=0, atol=1e-8)
    R = orthonormal(6, 6, seed % 1000)
    Z = project_2d(X @ R.T)
    # same coordinates up to a per-axis sign
    for j in range(2):
        assert min(np.abs(Z[:, j] - Y[:, j]).max(), np.abs(Z[:, j] + Y[:, j]).max()) < 1e-7


# ---------------------------------------------------------------- separation


def direct_silhouette(fg, bg):
    X = np.vstack([fg, bg])
    lab = [0] * len(fg) + [1] * len(bg)
    vals = []
    for i, x in enumerate(X):
        same = [np.linalg.norm(x - y) for j, y in enumerate(X) if lab[j] == lab[i] and j != i]
        other = [np.linalg.norm(x - y) for j, y in enumerate(X) if lab[j] != lab[i]]
        a, b = np.mean(same), np.mean(other)
        vals.append((b - a) / max(a, b))
    return float(np.mean(vals))


def test_same_distribution_is_chance():
    r = np.random.default_rng(4)
    fg, bg = r.normal(size=(400, 3)), r.normal(size=(400, 3))
    s = separation_stats(fg, bg)
    assert abs(s["silhouette"]) < 0.02
    assert abs(s["linear_probe_accuracy"] - 0.5) < 0.06


def test_point_masses_separate():
    r = np.random.default_rng(5)
    fg = np.zeros((10, 4)) + 1e-6 * r.normal(size=(10, 4))
    bg = np.full((10, 4), 100.0) + 1e-6 * r.normal(size=(10, 4))
    s = separation_stats(fg, bg)
    assert s["silhouette"] > 1 - 1e-6
    assert s["linear_probe_accuracy"] == 1.0
    assert s["centroid_gap"] == pytest.approx(200.0, rel=1e-6)


@pytest.mark.parametrize("sep", [0.0, 1.0, 3.0])
def test_blobs_match_direct_formula(sep):
    r = np.random.default_rng(6)
    fg = r.normal(size=(25, 3))
    bg = r.normal(size=(30, 3)) + [sep, 0, 0]
    assert silhouette(fg, bg) == pytest.approx(direct_silhouette(fg, bg), abs=1e-12)


def test_chunking_does_not_change_silhouette():
    r = np.random.default_rng(7)
    fg, bg = r.normal(size=(150, 4)), r.normal(size=(90, 4)) + 1
    assert silhouette(fg, bg) == pytest.approx(direct_silhouette(fg, bg), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_bounds(seed):
    r = np.random.default_rng(seed)
    fg = r.normal(size=(int(r.integers(2, 12)), 3))
    bg = r.normal(size=(int(r.integers(2, 12)), 3)) * r.uniform(0.1, 3)
    s = separation_stats(fg, bg)
    assert -1.0 <= s["silhouette"] <= 1.0
    assert 0.0 <= s["linear_probe_accuracy"] <= 1.0


def test_degenerate_classes_rejected():
    with pytest.raises(AnalysisError):
        separation_stats(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(AnalysisError, match="degenerate"):
        separation_stats(np.zeros((3, 3)), np.zeros((4, 3)))


def test_probe_closed_form():
    r = np.random.default_rng(8)
    fg, bg = r.normal(size=(20, 2)) + 0.5, r.normal(size=(20, 2)) - 0.5
    X = np.c_[np.vstack([fg, bg]), np.ones(40)]
    y = np.r_[np.ones(20), -np.ones(20)]
    w = np.linalg.solve(X.T @ X, X.T @ y)
    assert linear_probe_accuracy(fg, bg) == np.mean(np.sign(X @ w) == y)


def test_split_by_labels():
    feats = [np.arange(6.0).reshape(3, 2), np.arange(6.0, 10.0).reshape(2, 2)]
    fg, bg = split_by_labels(feats, [np.array([1, 0, 1]), np.array([0, 2])])
    np.testing.assert_array_equal(fg, [[0, 1], [4, 5], [8, 9]])
    np.testing.assert_array_equal(bg, [[2, 3], [6, 7]])


# ---------------------------------------------------------------- embedding map


def test_embedding_map_labels_and_csv(tmp_path):
    r = np.random.default_rng(9)
    em = embedding_map(r.normal(size=(3, 4)), r.normal(size=(2, 4)), r.normal(size=(2, 4)))
    assert em.labels == ["foreground"] * 3 + ["background"] * 2 + ["codeword"] * 2
    assert em.coords.shape == (7, 2)
    write_embedding_csv(tmp_path / "e.csv", em)
    rows = list(csv.DictReader(open(tmp_path / "e.csv", encoding="utf-8")))
    assert list(rows[0]) == ["point_id", "label", "x", "y"]
    assert [float(x["x"]) for x in rows] == em.coords[:, 0].tolist()
    with pytest.raises(AnalysisError):
        EmbeddingMap(np.zeros((2, 2)), ["foreground", "noise"])


# ---------------------------------------------------------------- evolution


def snap(epoch, projected, ids):
    return SimpleNamespace(epoch=epoch, projected=np.asarray(projected, dtype=float),
                           effective_ids=np.asarray(ids))


def test_evolution_hand_computed(tmp_path):
    a = snap(0, [[0, 0], [3, 4], [6, 8], [100, 100]], [0, 1, 2])
    b = snap(1, [[0, 0], [1, 0], [0, 1], [7, 7]], [0, 1, 2])
    rep = evolution_report([a, b])
    assert rep[0] == {"epoch": 0, "effective_count": 3, "dispersion": pytest.approx(20 / 3)}
    assert rep[1]["dispersion"] == pytest.approx((1 + 1 + np.sqrt(2)) / 3, abs=1e-15)
    write_evolution_csv(tmp_path / "ev.csv", rep)
    lines = (tmp_path / "ev.csv").read_text().splitlines()
    assert lines[0] == "epoch,effective_count,dispersion"
    assert float(lines[2].split(",")[2]) == rep[1]["dispersion"]


def test_evolution_constant_and_single():
    s = snap(0, [[0, 0], [1, 1]], [0, 1])
    rep = evolution_report([s, s, s])
    assert len({r["dispersion"] for r in rep}) == 1
    assert evolution_report([snap(0, [[2, 2], [5, 5]], [1])])[0]["dispersion"] == 0.0
    assert dispersion(np.zeros((0, 3))) == 0.0


def test_silhouette_matches_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    r = np.random.default_rng(10)
    fg, bg = r.normal(size=(40, 5)), r.normal(size=(35, 5)) + 0.8
    ref = metrics.silhouette_score(np.vstack([fg, bg]), np.r_[np.zeros(40), np.ones(35)])
    assert silhouette(fg, bg) == pytest.approx(ref, abs=1e-12)
