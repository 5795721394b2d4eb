import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn, generic_family, jd_family, random_pd, random_unitary
from distmnmf.hermlin import (
    BlockLayout,
    NotPositiveDefinite,
    blkdiag,
    commutator_norm,
    ddiag,
    gevd_joint_diag,
    herm_solve,
    hermitian,
    is_jointly_diagonalizable,
    pinv_solve,
    whiten_family,
)


class TestBlockLayout:
    def test_offsets_and_slices(self):
        layout = BlockLayout((4, 4, 4))
        assert layout.offsets == (0, 4, 8)
        assert layout.n_channels == 12
        assert layout.slices[2] == slice(8, 12)

    def test_rejects_empty_or_nonpositive(self):
        with pytest.raises(ValueError):
            BlockLayout(())
        with pytest.raises(ValueError):
            BlockLayout((2, 0))

    def test_split_gives_contiguous_copies(self, rng):
        a = rng.standard_normal((3, 5, 6))
        parts = BlockLayout((2, 4)).split(a)
        assert all(p.flags["C_CONTIGUOUS"] for p in parts)
        np.testing.assert_array_equal(np.concatenate(parts, axis=-1), a)
        parts[0][...] = 0
        assert np.any(a[..., :2] != 0)

    def test_split_length_mismatch(self):
        with pytest.raises(ValueError):
            BlockLayout((2, 2)).split(np.zeros((3, 5)))


class TestHermSolve:
    def test_identity(self):
        b = np.array([1, 2j, -1])
        np.testing.assert_allclose(herm_solve(np.eye(3), b), b)

    def test_diagonal(self):
        np.testing.assert_allclose(herm_solve(np.diag([2.0, 4.0]), np.array([2.0, 4.0])), [1, 1])

    def test_residual(self, rng):
        for _ in range(20):
            A = random_pd(rng, 4)
            b = crandn(rng, 4)
            x = herm_solve(A, b)
            assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_residual_at_condition_1e6(self, rng):
        U = random_unitary(rng, 5)
        A = U @ np.diag(np.logspace(0, 6, 5)) @ U.conj().T
        b = crandn(rng, 5)
        assert np.linalg.norm(A @ herm_solve(A, b) - b) <= 1e-10 * np.linalg.norm(b)

    def test_indefinite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            herm_solve(np.diag([1.0, -1.0]), np.ones(2))


class TestPinvSolve:
    def test_identity(self):
        np.testing.assert_allclose(pinv_solve(np.eye(2), np.array([1.0, 1.0])), [1, 1])

    def test_rank_deficient_projection(self):
        x = pinv_solve(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([3.0, 5.0]))
        np.testing.assert_allclose(x, [3, 0])

    def test_matches_svd_oracle(self, rng):
        A = crandn(rng, 3, 2) @ crandn(rng, 2, 3)
        b = crandn(rng, 3)
        U, s, Vh = np.linalg.svd(A)
        s_inv = np.where(s > 1e-10 * s[0], 1.0 / s, 0.0)
        oracle = Vh.conj().T @ (s_inv * (U.conj().T @ b))
        np.testing.assert_allclose(pinv_solve(A, b), oracle, atol=1e-9)

    def test_agrees_with_herm_solve_on_pd(self, rng):
        A, b = random_pd(rng, 4), crandn(rng, 4)
        np.testing.assert_allclose(pinv_solve(A, b), herm_solve(A, b), atol=1e-9)


class TestGevd:
    def test_diagonal_pair(self):
        W, d = gevd_joint_diag(np.diag([2.0, 3.0]), np.eye(2))
        np.testing.assert_allclose(d, [3, 2])
        np.testing.assert_allclose(np.abs(W), [[0, 1], [1, 0]], atol=1e-12)

    def test_equal_pair_gives_unit_eigenvalues(self, rng):
        B = random_pd(rng, 3)
        W, d = gevd_joint_diag(B, B)
        np.testing.assert_allclose(d, 1.0, atol=1e-10)
        np.testing.assert_allclose(hermitian(W) @ B @ W, np.eye(3), atol=1e-10)

    def test_diagonalization_residuals(self, rng):
        for _ in range(10):
            A = random_pd(rng, 4, cond_boost=0.0)
            B = random_pd(rng, 4)
            W, d = gevd_joint_diag(A, B)
            np.testing.assert_allclose(hermitian(W) @ B @ W, np.eye(4), atol=1e-10)
            D = hermitian(W) @ A @ W
            off = D - np.diag(np.diagonal(D))
            assert np.linalg.norm(off) <= 1e-9 * np.linalg.norm(A)
            np.testing.assert_allclose(np.diagonal(D).real, d, atol=1e-9)
            assert np.all(np.diff(d) <= 0)

    def test_batched(self, rng):
        A = random_pd(rng, 3, batch=(5,))
        B = random_pd(rng, 3, batch=(5,))
        W, d = gevd_joint_diag(A, B)
        for i in range(5):
            Wi, di = gevd_joint_diag(A[i], B[i])
            np.testing.assert_allclose(d[i], di, atol=1e-12)

    def test_singular_b_raises(self):
        with pytest.raises(NotPositiveDefinite):
            gevd_joint_diag(np.eye(2), np.diag([1.0, 0.0]))


class TestDiagonalOps:
    def test_ddiag(self):
        np.testing.assert_array_equal(ddiag(np.eye(3)), [1, 1, 1])
        np.testing.assert_array_equal(ddiag(np.array([[2, 5j], [-5j, 3]])), [2, 3])
        np.testing.assert_array_equal(ddiag(np.array([[-0.1, 0], [0, 4]])), [0, 4])

    def test_blkdiag_small(self):
        np.testing.assert_array_equal(blkdiag([np.array([[1.0]])]), [[1.0]])
        np.testing.assert_array_equal(blkdiag([np.eye(2), np.array([[2.0]])]), np.diag([1, 1, 2]))

    def test_blkdiag_round_trip(self, rng):
        blocks = [crandn(rng, 4, 4) for _ in range(3)]
        A = blkdiag(blocks)
        layout = BlockLayout((4, 4, 4))
        for b, e in zip(blocks, layout.extract_blocks(A)):
            np.testing.assert_array_equal(b, e)
        mask = blkdiag([np.ones((4, 4))] * 3) == 0
        assert np.all(A[mask] == 0)

    def test_blkdiag_batched(self, rng):
        blocks = [crandn(rng, 6, 2, 2), crandn(rng, 6, 3, 3)]
        A = blkdiag(blocks)
        assert A.shape == (6, 5, 5)
        np.testing.assert_array_equal(A[:, 2:, 2:], blocks[1])


class TestWhitening:
    def test_identity(self):
        np.testing.assert_allclose(whiten_family([np.eye(3)])[0], np.eye(3), atol=1e-12)

    def test_diagonal_family(self):
        R1, R2 = whiten_family([np.diag([1.0, 3.0]), np.diag([3.0, 1.0])])
        np.testing.assert_allclose(R1, np.diag([0.25, 0.75]), atol=1e-12)
        np.testing.assert_allclose(R2, np.diag([0.75, 0.25]), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 5), n=st.integers(1, 4))
    def test_sum_to_identity_and_psd(self, seed, m, n):
        rng = np.random.default_rng(seed)
        Rt = whiten_family(generic_family(rng, m, n))
        np.testing.assert_allclose(sum(Rt), np.eye(m), atol=1e-10)
        for r in Rt:
            assert np.linalg.eigvalsh(r).min() >= -1e-10

    def test_singular_sum_raises(self):
        with pytest.raises(NotPositiveDefinite):
            whiten_family([np.diag([1.0, 0.0]), np.diag([2.0, 0.0])])


class TestCommutator:
    def test_self_and_diagonal(self, rng):
        A = crandn(rng, 3, 3)
        assert commutator_norm(A, A) == 0.0
        assert commutator_norm(np.diag([1.0, 2.0]), np.diag([3.0, 4.0])) == 0.0

    def test_nilpotent_pair(self):
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        B = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert commutator_norm(A, B) == pytest.approx(np.sqrt(2.0), rel=1e-15)


class TestJointDiagonalizability:
    def test_commuting_diagonal_family(self):
        assert is_jointly_diagonalizable([np.diag([1.0, 2.0]), np.diag([3.0, 4.0])])

    def test_any_pair_with_pd_sum_is_diagonalizable(self, rng):
        # two members are always congruence-diagonalizable by the GEVD
        U, V = random_unitary(rng, 2), random_unitary(rng, 2)
        R2 = U @ np.diag([1.0, 2.0]) @ U.conj().T + V @ np.diag([2.0, 1.0]) @ V.conj().T
        assert is_jointly_diagonalizable([np.eye(2), R2])

    def test_generic_triple_is_not(self, rng):
        U, V = random_unitary(rng, 2), random_unitary(rng, 2)
        R2 = U @ np.diag([1.0, 2.0]) @ U.conj().T
        R3 = V @ np.diag([2.0, 1.0]) @ V.conj().T
        assert not is_jointly_diagonalizable([np.eye(2), R2, R3])

    def test_planted_congruence(self, rng):
        for m in (1, 2, 4):
            assert is_jointly_diagonalizable(jd_family(rng, m, 4))

    def test_block_family_both_directions(self, rng):
        good = [jd_family(rng, 3, 3) for _ in range(3)]
        assembled = [blkdiag([blk[n] for blk in good]) for n in range(3)]
        assert is_jointly_diagonalizable(assembled)
        good[1] = generic_family(rng, 3, 3)
        assembled = [blkdiag([blk[n] for blk in good]) for n in range(3)]
        assert not is_jointly_diagonalizable(assembled)

    def test_singular_sum_propagates(self):
        with pytest.raises(NotPositiveDefinite):
            is_jointly_diagonalizable([np.zeros((2, 2)), np.diag([1.0, 0.0])])
