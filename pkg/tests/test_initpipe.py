import itertools

import numpy as np
import pytest

from conftest import crandn, random_pd
from distmnmf.hermlin import BlockLayout, is_jointly_diagonalizable
from distmnmf.initpipe import (
    FactorialBlowup,
    align_frequency_permutations,
    align_subarray_permutations,
    cluster_masks,
    derive_rng,
    image_covariance,
    init_distributed,
    init_full,
    init_single,
    init_spatial,
    _regularize,
    init_spectrogram,
    is_divergence,
    is_nmf,
    soft_mask_images,
)


def two_direction_mixture(rng, I=16, J=60, M=4):
    """Each time-frequency point is dominated by one of two steering vectors."""
    a = np.exp(1j * rng.uniform(0, 2 * np.pi, (I, 2, M)))
    label = rng.integers(0, 2, (I, J))
    s = crandn(rng, I, J)
    X = s[..., None] * a[np.arange(I)[:, None], label]
    return X + 1e-3 * crandn(rng, I, J, M), label


def smooth_masks(rng, I, J, N):
    base = rng.uniform(0, 1, (J, N)) ** 4
    m = np.tile(base, (I, 1, 1)) + 0.05 * rng.uniform(0, 1, (I, J, N))
    return m / m.sum(-1, keepdims=True)


class TestClusterMasks:
    def test_masks_sum_to_one(self, rng):
        X = crandn(rng, 8, 30, 3)
        m = cluster_masks(X, 3, derive_rng(0, 0))
        assert m.shape == (8, 30, 3)
        assert np.all(m >= 0)
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-12)

    def test_separates_two_directions(self, rng):
        X, label = two_direction_mixture(rng)
        m = cluster_masks(X, 2, derive_rng(0, 0), align=False)
        hard = m.argmax(-1)
        agree = np.mean([max(np.mean(hard[i] == label[i]), np.mean(hard[i] != label[i])) for i in range(16)])
        assert agree > 0.95

    def test_silent_points_uniform(self, rng):
        X = crandn(rng, 4, 20, 2)
        X[:, 5] = 0
        m = cluster_masks(X, 2, derive_rng(0, 0))
        np.testing.assert_array_equal(m[:, 5], 0.5)

    def test_single_source(self, rng):
        np.testing.assert_array_equal(cluster_masks(crandn(rng, 3, 5, 2), 1, derive_rng(0)), 1.0)

    def test_deterministic(self, rng):
        X = crandn(rng, 6, 25, 3)
        a = cluster_masks(X, 2, derive_rng(5, 0))
        b = cluster_masks(X, 2, derive_rng(5, 0))
        np.testing.assert_array_equal(a, b)

    def test_too_few_frames(self, rng):
        with pytest.raises(ValueError):
            cluster_masks(crandn(rng, 3, 2, 2), 3, derive_rng(0))


class TestAlignment:
    @pytest.mark.parametrize("n_src", [2, 3, 4])
    def test_planted_frequency_permutations(self, rng, n_src):
        masks = smooth_masks(rng, 20, 80, n_src)
        planted = np.array([rng.permutation(n_src) for _ in range(20)])
        planted[0] = np.arange(n_src)
        scrambled = np.stack([masks[i][:, planted[i]] for i in range(20)])
        aligned, perms = align_frequency_permutations(scrambled)
        np.testing.assert_allclose(aligned, masks)
        for i in range(20):
            np.testing.assert_array_equal(scrambled[i][:, perms[i]], aligned[i])

    def test_already_aligned_unchanged(self, rng):
        masks = smooth_masks(rng, 10, 50, 3)
        aligned, perms = align_frequency_permutations(masks)
        np.testing.assert_array_equal(perms, np.tile(np.arange(3), (10, 1)))

    def test_subarray_permutation_matches_exhaustive(self, rng):
        ref = smooth_masks(rng, 6, 40, 4)
        others = [ref[..., list(p)] + 0.01 * rng.uniform(0, 1, ref.shape)
                  for p in [(1, 0, 3, 2), (3, 1, 2, 0)]]
        perms = align_subarray_permutations([ref] + others)
        assert perms == [(0, 1, 2, 3), (1, 0, 3, 2), (3, 1, 2, 0)]

    def test_subarray_refuses_many_sources(self, rng):
        with pytest.raises(FactorialBlowup):
            align_subarray_permutations([rng.uniform(0, 1, (2, 20, 9))] * 2)


class TestSpectrogramInit:
    def test_scalar_case(self, rng):
        # one channel: h = |c|^2 / (mean_j |c|^2)
        c = crandn(rng, 3, 10, 1, 1)
        h, R = init_spectrogram(c)
        power = np.abs(c[..., 0, 0]) ** 2
        np.testing.assert_allclose(h[..., 0], power / power.mean(1, keepdims=True), rtol=1e-5)

    def test_mean_is_one(self, rng):
        C = crandn(rng, 4, 50, 2, 3)
        h, _ = init_spectrogram(C)
        # mean_j c^H R^-1 c = tr(R^-1 R) = M
        np.testing.assert_allclose(h.mean(1), 1.0, rtol=1e-4)

    def test_images_and_covariance(self, rng):
        X = crandn(rng, 2, 6, 3)
        m = rng.uniform(0, 1, (2, 6, 2))
        C = soft_mask_images(X, m)
        np.testing.assert_allclose(C[:, :, 1], m[..., 1:] * X)
        R = image_covariance(C)
        want = sum(np.outer(C[1, j, 0], C[1, j, 0].conj()) for j in range(6)) / 6
        np.testing.assert_allclose(R[1, 0], want)


class TestIsNmf:
    def test_monotone(self, rng):
        h = rng.uniform(0.1, 2.0, (20, 30))
        _, _, trace = is_nmf(h, 3, derive_rng(1), max_iter=200, tol=0, return_trace=True)
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[1:]))

    def test_rank_one_recovered(self, rng):
        h = np.outer(rng.uniform(0.5, 2, 15), rng.uniform(0.5, 2, 25))
        W, H = is_nmf(h, 1, derive_rng(2), max_iter=2000, tol=0)
        assert is_divergence(h, W @ H) < 1e-6

    def test_divergence_zero_at_equality(self, rng):
        h = rng.uniform(0.1, 1, (4, 5))
        assert is_divergence(h, h) == 0.0

    def test_scalar_fixed_point(self):
        # one entry, one basis: the square-root MM step converges geometrically to w h = x
        W, H = is_nmf(np.array([[4.0]]), 1, derive_rng(3), max_iter=50, tol=0)
        assert (W @ H)[0, 0] == pytest.approx(4.0, rel=1e-9)


class TestInitSpatial:
    def test_gevd_normalization(self, rng):
        R = np.stack([random_pd(rng, 3, (5,)) for _ in range(3)], axis=1)  # (5, 3, 3, 3)
        (W,), Lam = init_spatial(R)
        A, B = _regularize(R[:, 1]), _regularize(R[:, 2])
        for i in range(5):
            np.testing.assert_allclose(W[i].conj().T @ B[i] @ W[i], np.eye(3), atol=1e-9)
            D = W[i].conj().T @ A[i] @ W[i]
            np.testing.assert_allclose(D - np.diag(np.diag(D)), 0, atol=1e-9)
        # the loading is 1e-6 of the mean eigenvalue
        np.testing.assert_allclose(Lam[:, 2], 1.0, atol=1e-5)

    def test_per_block_gevd_normalization(self, rng):
        layout = BlockLayout((2, 3))
        R = np.stack([random_pd(rng, 5, (3,)) for _ in range(2)], axis=1)
        W, _ = init_spatial(R, layout)
        for Wl, sl in zip(W, layout.slices):
            B = _regularize(R[:, 1][:, sl, sl])
            for i in range(3):
                np.testing.assert_allclose(Wl[i].conj().T @ B[i] @ Wl[i], np.eye(Wl.shape[-1]), atol=1e-9)

    def test_block_diagonal_input_matches_restriction(self, rng):
        layout = BlockLayout((2, 3))
        R = np.stack([random_pd(rng, 5, (3,)) for _ in range(3)], axis=1)
        R[..., :2, 2:] = 0
        R[..., 2:, :2] = 0
        W, Lam = init_spatial(R, layout)
        for l, sl in enumerate(layout.slices):
            (Wr,), Lr = init_spatial(np.ascontiguousarray(R[..., sl, sl]))
            np.testing.assert_array_equal(W[l], Wr)
            np.testing.assert_array_equal(Lam[..., sl], Lr)

    def test_block_layout(self, rng):
        R = np.stack([random_pd(rng, 4, (2,)) for _ in range(2)], axis=1)
        W, Lam = init_spatial(R, BlockLayout((1, 3)))
        assert [w.shape for w in W] == [(2, 1, 1), (2, 3, 3)]
        assert Lam.shape == (2, 2, 4)

    def test_single_source_whitens(self, rng):
        R = random_pd(rng, 3, (2,))[:, None]
        (W,), Lam = init_spatial(R)
        for i in range(2):
            np.testing.assert_allclose(W[i].conj().T @ R[i, 0] @ W[i], np.eye(3), atol=1e-5)

    def test_resulting_scms_jointly_diagonalizable(self, rng):
        R = np.stack([random_pd(rng, 3, (1,)) for _ in range(3)], axis=1)
        (W,), Lam = init_spatial(R)
        Winv = np.linalg.inv(W[0])
        fam = [Winv.conj().T @ np.diag(Lam[0, n]) @ Winv for n in range(3)]
        assert is_jointly_diagonalizable(fam)


class TestEntryPoints:
    def test_full_shapes_and_determinism(self, rng):
        X, _ = two_direction_mixture(rng, I=12, J=40, M=4)
        a = init_full(X, 2, 3, seed=7)
        b = init_full(X, 2, 3, seed=7)
        assert a.T0.shape == (12, 3, 2) and a.V0.shape == (3, 40, 2)
        assert a.Lam0.shape == (12, 2, 4) and a.W0[0].shape == (12, 4, 4)
        np.testing.assert_array_equal(a.T0, b.T0)
        np.testing.assert_array_equal(a.W0[0], b.W0[0])

    def test_single_uses_one_block(self, rng):
        X = crandn(rng, 6, 30, 5)
        b = init_single(X, BlockLayout((2, 3)), 2, 2, seed=1, block=1)
        assert b.W0[0].shape == (6, 3, 3) and b.Lam0.shape == (6, 2, 3)

    def test_distributed_modes(self, rng):
        X = crandn(rng, 6, 30, 5)
        layout = BlockLayout((2, 3))
        shared = init_distributed(X, layout, 2, 2, seed=1)
        assert shared.layout == layout
        assert [w.shape for w in shared.W0] == [(6, 2, 2), (6, 3, 3)]
        assert shared.Lam0.shape == (6, 2, 5)
        bundles = init_distributed(X, layout, 2, 2, seed=1, shared=False)
        assert len(bundles) == 2 and bundles[1].Lam0.shape == (6, 2, 3)

    def test_seed_changes_result(self, rng):
        X = crandn(rng, 6, 30, 3)
        a = init_full(X, 2, 2, seed=1)
        b = init_full(X, 2, 2, seed=2)
        assert not np.array_equal(a.T0, b.T0)

    def test_derive_rng_streams_independent(self):
        assert derive_rng(1, 0).random() != derive_rng(1, 1).random()
        assert derive_rng(1, 0).random() == derive_rng(1, 0).random()
