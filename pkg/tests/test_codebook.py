import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentq import autodiff as ad
from momentq.autodiff import Tensor
from momentq.codebook import (Codebook, CodebookError, codebook_loss, commitment_loss,
                              index_histogram, kmeans, kmeans_init, lookup, project,
                              selection_init, utilization)


def brute_force(z, C):
    out = []
    for row in z:
        best, best_d = 0, np.inf
        for i, c in enumerate(C):
            d = sum((a - b) ** 2 for a, b in zip(row, c))
            if d < best_d:
                best, best_d = i, d
        out.append(best)
    return np.array(out)


def test_project_identity_and_bias_only():
    e = np.random.default_rng(0).normal(size=(4, 3))
    cb = Codebook.from_entries(e)
    np.testing.assert_array_equal(project(cb).values, e)
    cb.projector_weight.values = np.zeros((3, 3))
    cb.projector_bias.values = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(project(cb).values, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_project_matches_hand_multiply():
    r = np.random.default_rng(1)
    e, W, b = r.normal(size=(4, 3)), r.normal(size=(3, 3)), r.normal(size=3)
    cb = Codebook.from_entries(e)
    cb.projector_weight.values, cb.projector_bias.values = W, b
    ref = np.array([[sum(e[i, k] * W[k, j] for k in range(3)) + b[j] for j in range(3)]
                    for i in range(4)])
    np.testing.assert_allclose(project(cb).values, ref, rtol=0, atol=1e-14)


def test_lookup_exact_codeword_and_tie():
    C = np.random.default_rng(2).normal(size=(10, 4))
    a = lookup(C[5:6], Tensor(C))
    assert a.indices[0] == 5 and a.distances[0] == 0.0
    # equidistant to codewords 2 and 7
    C2 = np.zeros((10, 2)) + 50
    C2[2], C2[7] = [1.0, 0.0], [-1.0, 0.0]
    assert lookup(np.zeros((1, 2)), Tensor(C2)).indices[0] == 2


def test_lookup_quantized_rows_equal_codewords():
    r = np.random.default_rng(3)
    C = r.normal(size=(32, 8))
    a = lookup(r.normal(size=(16, 8)), Tensor(C))
    np.testing.assert_array_equal(a.quantized.values, C[a.indices])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_lookup_matches_brute_force(T, K, d, seed):
    r = np.random.default_rng(seed)
    C = r.integers(-2, 3, size=(K, d)).astype(float)  # small ints force ties
    z = r.integers(-2, 3, size=(T, d)).astype(float)
    np.testing.assert_array_equal(lookup(z, Tensor(C)).indices, brute_force(z, C))


def test_lookup_dimension_mismatch():
    with pytest.raises((CodebookError, ValueError)):
        lookup(np.zeros((2, 3)), Tensor(np.zeros((4, 5))))


def test_losses_arithmetic_and_equal_forward():
    a = lookup(np.array([[1.0]]), Tensor(np.array([[3.0]])))
    assert float(codebook_loss(Tensor(np.array([[1.0]])), a).values) == 4.0
    r = np.random.default_rng(4)
    C = Tensor(r.normal(size=(6, 5)))
    z = Tensor(r.normal(size=(7, 5)))
    a = lookup(z, C)
    assert codebook_loss(z, a).values == commitment_loss(z, a).values
    z0 = Tensor(C.values[[1, 3]])
    assert float(codebook_loss(z0, lookup(z0, C)).values) == 0.0


def _partition_point(seed):
    r = np.random.default_rng(seed)
    return {"x": r.normal(size=(5, 4)), "w": r.normal(size=(4, 4)),
            "entries": r.normal(size=(6, 4)), "pw": np.eye(4) + 0.1 * r.normal(size=(4, 4)),
            "pb": 0.1 * r.normal(size=4)}


def _losses(which):
    def f(x, w, entries, pw, pb):
        z = ad.layer_norm(ad.matmul(x, w))
        cb = Codebook(entries, pw, pb)
        a = lookup(z, project(cb))
        return codebook_loss(z, a) if which == "cb" else commitment_loss(z, a)
    return f


@pytest.mark.parametrize("seed", range(3))
def test_gradient_partition_by_finite_differences(seed):
    p = _partition_point(seed)
    g_cb = ad.numerical_gradient(_losses("cb"), p, wrt=["x", "w"])
    g_cmt = ad.numerical_gradient(_losses("cmt"), p, wrt=["entries", "pw", "pb"])
    assert max(np.abs(g).max() for g in g_cb.values()) < 1e-6
    assert max(np.abs(g).max() for g in g_cmt.values()) < 1e-6
    # the other halves are live
    assert ad.grad_check(_losses("cb"), p, wrt=["entries", "pw", "pb"]) < 1e-4
    assert ad.grad_check(_losses("cmt"), p, wrt=["w"]) < 1e-4


def _step_setup():
    # one feature per codeword, so each codeword has a single target
    r = np.random.default_rng(5)
    entries = r.normal(size=(12, 4))
    z = Tensor(entries + 0.3 * r.normal(size=(12, 4)))
    cb = Codebook.from_entries(entries)
    a = lookup(z, project(cb))
    assert len(set(a.indices.tolist())) == 12
    return z, cb, a


def test_small_step_on_entries_moves_each_codeword_closer():
    z, cb, a = _step_setup()
    before = ((a.quantized.values - z.values) ** 2).sum(-1)
    ad.backward(codebook_loss(z, a))
    cb.entries.values = cb.entries.values - 1e-2 * cb.entries.grad
    after = ((project(cb).values[a.indices] - z.values) ** 2).sum(-1)
    assert np.all(after < before)


def test_small_joint_step_lowers_codebook_loss():
    z, cb, a = _step_setup()
    loss = codebook_loss(z, a)
    ad.backward(loss)
    for t in (cb.entries, cb.projector_weight, cb.projector_bias):
        t.values = t.values - 1e-2 * t.grad
    after = ((project(cb).values[a.indices] - z.values) ** 2).mean()
    assert after < float(loss.values)


def test_kmeans_n_equals_k():
    X = np.random.default_rng(6).normal(size=(5, 3))
    res = kmeans(X, 5, seed=1)
    assert res.costs[-1] == 0.0
    assert sorted(map(tuple, res.centers)) == sorted(map(tuple, X))


def test_kmeans_rejects_too_few_points():
    with pytest.raises(CodebookError):
        kmeans_init(np.zeros((3, 2)), 4)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_kmeans_cost_non_increasing_and_deterministic(seed):
    X = np.random.default_rng(seed).normal(size=(60, 3))
    res = kmeans(X, 6, max_iters=20, seed=seed)
    assert np.all(np.diff(res.costs) <= 0)
    np.testing.assert_array_equal(res.centers, kmeans(X, 6, max_iters=20, seed=seed).centers)


def test_kmeans_two_blobs():
    r = np.random.default_rng(7)
    sigma = 1.0
    means = np.array([[0.0, 0.0], [10.0, 0.0]])
    X = np.concatenate([m + sigma * r.normal(size=(200, 2)) for m in means])
    c = kmeans_init(X, 2, seed=0)
    sample = [X[:200].mean(0), X[200:].mean(0)]
    for m in sample:
        assert np.min(np.linalg.norm(c - m, axis=1)) < 0.5 * sigma


def test_selection_init_rows_from_data():
    X = np.arange(40.0).reshape(20, 2)
    C = selection_init(X, 5, seed=3)
    assert len({tuple(r) for r in C}) == 5
    assert all(any(np.array_equal(c, x) for x in X) for c in C)


def test_utilization_examples():
    assert utilization(np.zeros(8)) == 0.0
    counts = np.zeros(1024)
    counts[:90] = 3
    assert utilization(counts) == 90 / 1024
    stream = np.random.default_rng(8).integers(0, 50, size=30)
    assert utilization(index_histogram(stream, 64)) == len(set(stream.tolist())) / 64
