"""Product quantization: layout, k-means/EM codebooks, updates, schedule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdq.ipq import (
    Codebook,
    QuantSchedule,
    advance_schedule,
    codeword_grad_update,
    em_fit,
    fit_codebook,
    kmeans_fit,
    reconstruct,
    reconstruction_error,
    split_subvectors,
    uniform_schedule,
)
from helpers import make_rng


def oracle_error(w, codewords, m):
    """Independent brute-force objective: pad columns, search nearest codeword,
    accumulate sequential float64 dot products (same convention as the library)."""
    rows, cols = w.shape
    dim = math.ceil(rows / m)
    cw = codewords.astype(np.float64)
    total = 0.0
    for c in range(cols):
        col = np.zeros(m * dim, dtype=np.float64)
        col[:rows] = w[:, c]
        for j in range(m):
            v = col[j * dim:(j + 1) * dim]
            best = min(float(np.dot(v - word, v - word)) for word in cw)
            total += best
    return total


class TestSplit:
    def test_five_rows_m2_pads_one_zero(self):
        w = np.arange(5, dtype=np.float32).reshape(5, 1)
        sub, pad = split_subvectors(w, m=2)
        assert pad == 1
        assert sub.shape == (2, 3)
        np.testing.assert_array_equal(sub[0], [0.0, 1.0, 2.0])
        np.testing.assert_array_equal(sub[1], [3.0, 4.0, 0.0])

    def test_m1_gives_whole_columns(self):
        rng = make_rng(0)
        w = rng.standard_normal((6, 3)).astype(np.float32)
        sub, pad = split_subvectors(w, m=1)
        assert pad == 0
        np.testing.assert_array_equal(sub, w.T)

    def test_m_equal_rows_gives_scalars(self):
        w = np.arange(8, dtype=np.float32).reshape(4, 2)
        sub, pad = split_subvectors(w, m=4)
        assert pad == 0
        assert sub.shape == (8, 1)
        # column-major order: column 0's pieces first
        np.testing.assert_array_equal(sub.ravel(), [0, 2, 4, 6, 1, 3, 5, 7])

    def test_m_out_of_range_rejected(self):
        w = np.zeros((4, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="m must be"):
            split_subvectors(w, m=5)
        with pytest.raises(ValueError, match="m must be"):
            split_subvectors(w, m=0)


class TestKMeans:
    def test_objective_non_increasing(self):
        for seed in range(10):
            rng = make_rng(seed)
            x = rng.standard_normal((60, 4))
            _, _, history = kmeans_fit(x, k=5, iters=30, rng=make_rng(seed + 100))
            assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_k1_codeword_is_the_mean(self):
        rng = make_rng(1)
        x = rng.standard_normal((20, 3))
        codewords, assign, _ = kmeans_fit(x, k=1, iters=5, rng=make_rng(2))
        np.testing.assert_allclose(codewords[0], x.mean(axis=0), rtol=1e-6)
        assert (assign == 0).all()

    def test_exact_when_distinct_leq_k(self):
        base = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [5.0, 5.0]])
        x = np.repeat(base, 6, axis=0)
        codewords, assign, history = kmeans_fit(x, k=4, iters=10, rng=make_rng(3))
        assert history[-1] == 0.0
        np.testing.assert_allclose(codewords[assign], x, atol=1e-7)

    def test_deterministic_for_fixed_rng_seed(self):
        rng = make_rng(4)
        x = rng.standard_normal((40, 4))
        a = kmeans_fit(x, k=6, iters=15, rng=make_rng(9))
        b = kmeans_fit(x, k=6, iters=15, rng=make_rng(9))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert a[2] == b[2]

    def test_k_larger_than_points_rejected(self):
        with pytest.raises(ValueError, match="k must be"):
            kmeans_fit(np.zeros((3, 2)), k=4)


class TestEM:
    def test_loglik_non_decreasing(self):
        for seed in range(5):
            rng = make_rng(seed)
            x = rng.standard_normal((50, 3))
            _, _, history = em_fit(x, k=4, iters=20, rng=make_rng(seed + 50))
            assert all(b >= a - 1e-7 * max(1.0, abs(a)) for a, b in zip(history, history[1:]))

    def test_k1_codeword_is_the_mean(self):
        rng = make_rng(6)
        x = rng.standard_normal((25, 2))
        codewords, assign, _ = em_fit(x, k=1, iters=5, rng=make_rng(7))
        np.testing.assert_allclose(codewords[0], x.mean(axis=0), rtol=1e-5)
        assert (assign == 0).all()

    def test_separated_clusters_match_kmeans_partition(self):
        rng = make_rng(8)
        a = rng.standard_normal((30, 2)) * 0.05
        b = rng.standard_normal((30, 2)) * 0.05 + np.array([50.0, 50.0])
        x = np.concatenate([a, b])
        _, em_assign, _ = em_fit(x, k=2, iters=20, rng=make_rng(10))
        _, km_assign, _ = kmeans_fit(x, k=2, iters=20, rng=make_rng(11))
        # same partition up to label permutation
        assert (em_assign[:30] == em_assign[0]).all()
        assert (em_assign[30:] == em_assign[30]).all()
        assert em_assign[0] != em_assign[30]
        same = (em_assign == km_assign).all()
        flipped = (em_assign == 1 - km_assign).all()
        assert same or flipped


class TestReconstruction:
    @pytest.mark.parametrize("seed,rows,cols,k,m", [
        (0, 8, 6, 4, 2), (1, 5, 4, 3, 2), (2, 12, 3, 8, 4), (3, 7, 7, 2, 3),
    ])
    def test_error_equals_brute_force_exactly(self, seed, rows, cols, k, m):
        rng = make_rng(seed)
        w = rng.standard_normal((rows, cols)).astype(np.float32)
        cb = fit_codebook(w, k=k, m=m, iters=10, rng=make_rng(seed + 1))
        assert reconstruction_error(cb, w) == oracle_error(w, cb.codewords, m)

    def test_error_matches_frobenius_norm_when_unpadded(self):
        rng = make_rng(20)
        w = rng.standard_normal((8, 5)).astype(np.float32)
        cb = fit_codebook(w, k=3, m=2, iters=10, rng=make_rng(21))
        frob = float(np.sum((w.astype(np.float64) - reconstruct(cb).astype(np.float64)) ** 2))
        assert reconstruction_error(cb, w) == pytest.approx(frob, rel=1e-12)

    def test_exact_reconstruction_when_distinct_subvectors_leq_k(self):
        block = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        w = np.tile(block, (3, 4))  # 6x8 built from few distinct 2-subvectors
        cb = fit_codebook(w, k=8, m=3, iters=10, rng=make_rng(22))
        np.testing.assert_array_equal(reconstruct(cb), w)
        assert reconstruction_error(cb, w) == 0.0

    def test_refit_on_reconstruction_is_lossless(self):
        rng = make_rng(23)
        w = rng.standard_normal((8, 6)).astype(np.float32)
        cb = fit_codebook(w, k=4, m=2, iters=15, rng=make_rng(24))
        w_hat = reconstruct(cb)
        cb2 = fit_codebook(w_hat, k=4, m=2, iters=15, rng=make_rng(25))
        assert reconstruction_error(cb2, w_hat) <= 1e-10

    def test_reconstruct_strips_padding(self):
        rng = make_rng(26)
        w = rng.standard_normal((5, 4)).astype(np.float32)
        cb = fit_codebook(w, k=8, m=2, iters=10, rng=make_rng(27))
        assert reconstruct(cb).shape == (5, 4)


class TestCodewordUpdate:
    def test_mean_gradient_hand_case(self):
        # 4x1 matrix, m=2 -> two 2-d subvectors, both assigned to codeword 0
        cb = Codebook(codewords=np.array([[1.0, 1.0], [5.0, 5.0]], dtype=np.float32),
                      assignments=np.array([0, 0]), m=2, source_shape=(4, 1), pad=0)
        grads = np.array([[2.0], [4.0], [6.0], [8.0]], dtype=np.float32)
        out = codeword_grad_update(cb, grads, lr=0.5)
        # mean of ([2,4], [6,8]) = [4,6]; codeword 0 <- [1,1] - 0.5*[4,6]
        np.testing.assert_allclose(out.codewords[0], [-1.0, -2.0])
        np.testing.assert_array_equal(out.codewords[1], [5.0, 5.0])  # unassigned

    def test_zero_gradients_leave_codebook_unchanged(self):
        rng = make_rng(30)
        w = rng.standard_normal((6, 4)).astype(np.float32)
        cb = fit_codebook(w, k=3, m=2, iters=5, rng=make_rng(31))
        out = codeword_grad_update(cb, np.zeros_like(w), lr=0.1)
        np.testing.assert_array_equal(out.codewords, cb.codewords)

    def test_gradient_shape_must_match(self):
        cb = Codebook(codewords=np.zeros((2, 2), dtype=np.float32),
                      assignments=np.zeros(2, dtype=np.int64), m=2,
                      source_shape=(4, 1), pad=0)
        with pytest.raises(ValueError, match="shape"):
            codeword_grad_update(cb, np.zeros((3, 1)), lr=0.1)

    def test_assignments_unchanged_by_update(self):
        rng = make_rng(32)
        w = rng.standard_normal((8, 4)).astype(np.float32)
        cb = fit_codebook(w, k=4, m=2, iters=5, rng=make_rng(33))
        out = codeword_grad_update(cb, rng.standard_normal(w.shape), lr=0.01)
        np.testing.assert_array_equal(out.assignments, cb.assignments)


class TestSchedule:
    def test_uniform_walks_all_the_way_down(self):
        sched = uniform_schedule(total_layers=4, total_epochs=10)
        fs = [advance_schedule(sched, e).finetuned for e in range(10)]
        assert fs == [4, 4, 3, 3, 2, 2, 1, 1, 0, 0]

    def test_epoch_zero_keeps_everything_finetuned(self):
        sched = uniform_schedule(total_layers=2, total_epochs=8)
        assert advance_schedule(sched, 0).finetuned == 2

    def test_monotone_non_increasing(self):
        sched = uniform_schedule(total_layers=3, total_epochs=7)
        fs = [advance_schedule(sched, e).finetuned for e in range(12)]
        assert all(b <= a for a, b in zip(fs, fs[1:]))
        assert fs[-1] == 0

    def test_quantized_layers_range(self):
        sched = QuantSchedule(total_layers=4, finetuned=1, boundaries=(1, 2, 3, 4))
        assert list(sched.quantized_layers()) == [0, 1, 2]

    def test_invalid_finetuned_rejected(self):
        with pytest.raises(ValueError, match="finetuned"):
            QuantSchedule(total_layers=2, finetuned=3, boundaries=(1, 2))

    def test_unsorted_boundaries_rejected(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            QuantSchedule(total_layers=2, finetuned=2, boundaries=(3, 1))


@settings(max_examples=25)
@given(st.integers(min_value=0, max_value=2 ** 31),
       st.integers(min_value=1, max_value=4),
       st.integers(min_value=1, max_value=6))
def test_fit_reconstruct_objective_agreement(seed, m, k):
    rng = make_rng(seed)
    rows = int(rng.integers(m, 10))
    cols = int(rng.integers(1, 6))
    w = rng.standard_normal((rows, cols)).astype(np.float32)
    k = min(k, cols * m)
    cb = fit_codebook(w, k=k, m=m, iters=8, rng=make_rng(seed + 1))
    assert reconstruction_error(cb, w) == oracle_error(w, cb.codewords, m)
    assert reconstruct(cb).shape == w.shape
