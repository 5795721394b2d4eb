"""Complex Hermitian linear-algebra kernels shared by the estimators.

Most functions accept stacked matrices with shape ``(..., M, M)`` so that a
whole set of frequency bins can be processed in one call.
"""

from dataclasses import dataclass
from itertools import combinations
from typing import List, Sequence, Tuple

import numpy as np
import scipy.linalg


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix expected to be positive definite is not."""


def hermitian(A: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.swapaxes(A, -2, -1).conj()


@dataclass(frozen=True)
class BlockLayout:
    """Partition of ``M`` microphones into contiguous subarrays.

    Args:
        sizes: Number of microphones in each subarray, ``M^(1), ..., M^(L)``.
    """

    sizes: Tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) == 0 or any(s < 1 for s in sizes):
            raise ValueError(f"subarray sizes must be positive, got {self.sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def single(cls, n_channels: int) -> "BlockLayout":
        return cls((n_channels,))

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    @property
    def n_channels(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> Tuple[int, ...]:
        return tuple(int(o) for o in np.cumsum((0,) + self.sizes[:-1]))

    @property
    def slices(self) -> List[slice]:
        return [slice(o, o + s) for o, s in zip(self.offsets, self.sizes)]

    def split(self, a: np.ndarray, axis: int = -1) -> List[np.ndarray]:
        """Cut ``a`` along ``axis`` into contiguous per-block copies."""
        if a.shape[axis] != self.n_channels:
            raise ValueError(
                f"axis of length {a.shape[axis]} does not match layout {self.sizes}"
            )
        index = [slice(None)] * a.ndim
        out = []
        for sl in self.slices:
            index[axis] = sl
            out.append(np.ascontiguousarray(a[tuple(index)]))
        return out

    def extract_blocks(self, A: np.ndarray) -> List[np.ndarray]:
        """Diagonal blocks of ``A`` with shape ``(..., M, M)``."""
        return [np.ascontiguousarray(A[..., sl, sl]) for sl in self.slices]


def herm_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for Hermitian positive-definite ``A`` via Cholesky."""
    try:
        factor = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from err
    return scipy.linalg.cho_solve(factor, b)


def pinv_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution ``A^+ b``; never fails."""
    return np.linalg.pinv(A) @ b


def gevd_joint_diag(A: np.ndarray, B: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r"""Generalized eigendecomposition ``A w = d B w`` of a Hermitian pair.

    Args:
        A: Hermitian PSD matrices, shape ``(..., M, M)``.
        B: Hermitian PD matrices, shape ``(..., M, M)``.

    Returns:
        ``(W, d)`` where the columns of ``W`` are generalized eigenvectors
        normalized so that ``W^H B W = I`` and ``W^H A W = diag(d)``. The
        eigenvalues are sorted in descending order, ties keep the order
        returned by the symmetric solver.
    """
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from err
    L_inv = np.linalg.inv(L)
    C = L_inv @ A @ hermitian(L_inv)
    C = 0.5 * (C + hermitian(C))
    d, U = np.linalg.eigh(C)
    order = np.argsort(-d, axis=-1, kind="stable")
    d = np.take_along_axis(d, order, axis=-1)
    U = np.take_along_axis(U, order[..., None, :], axis=-1)
    return hermitian(L_inv) @ U, d


def ddiag(A: np.ndarray) -> np.ndarray:
    """Real diagonal of ``A`` clamped at zero, shape ``(..., M)``."""
    return np.maximum(np.real(np.diagonal(A, axis1=-2, axis2=-1)), 0.0)


def blkdiag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Assemble square blocks ``(..., M_l, M_l)`` into a block-diagonal matrix."""
    if len(blocks) == 0:
        raise ValueError("blkdiag needs at least one block")
    blocks = [np.asarray(b) for b in blocks]
    batch = np.broadcast_shapes(*(b.shape[:-2] for b in blocks))
    size = sum(b.shape[-1] for b in blocks)
    dtype = np.result_type(*blocks)
    out = np.zeros(batch + (size, size), dtype=dtype)
    offset = 0
    for b in blocks:
        m = b.shape[-1]
        out[..., offset : offset + m, offset : offset + m] = b
        offset += m
    return out


def _inv_sqrtm_psd(S: np.ndarray) -> np.ndarray:
    d, U = np.linalg.eigh(S)
    scale = np.trace(S).real
    if not np.all(np.isfinite(d)) or d.min() <= np.finfo(float).eps * S.shape[-1] * max(
        d.max(), 0.0
    ):
        raise NotPositiveDefinite("sum of the family is singular")
    d = np.maximum(d, 1e-12 * scale)
    return (U / np.sqrt(d)) @ hermitian(U)


def whiten_family(R: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Return ``S^{-1/2} R_n S^{-1/2}`` with ``S = sum_n R_n``."""
    R = [np.asarray(r) for r in R]
    S = sum(R)
    S = 0.5 * (S + hermitian(S))
    P = _inv_sqrtm_psd(S)
    out = []
    for r in R:
        w = P @ r @ P
        out.append(0.5 * (w + hermitian(w)))
    return out


def commutator_norm(A: np.ndarray, B: np.ndarray) -> float:
    """Frobenius norm of ``AB - BA``."""
    return float(np.linalg.norm(A @ B - B @ A))


def is_jointly_diagonalizable(R: Sequence[np.ndarray], tol: float = 1e-8) -> bool:
    """Decide joint diagonalizability by congruence of a PSD family.

    The family is whitened by its sum and declared jointly diagonalizable when
    every pair of whitened members commutes up to ``tol`` times the largest
    whitened norm.
    """
    Rt = whiten_family(R)
    scale = max(np.linalg.norm(r) for r in Rt)
    worst = max(
        (commutator_norm(a, b) for a, b in combinations(Rt, 2)), default=0.0
    )
    return worst <= tol * scale
