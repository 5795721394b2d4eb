"""Initialization: clustering masks, permutation alignment, IS-NMF, GEVD.

Steps, for each estimator variant:

1. soft time-frequency masks from per-bin clustering, aligned across
   frequency (and across subarrays for the distributed model);
2. source images by soft masking;
3. initial spectrograms ``h = c^H R^{-1} c / M`` from the masked images;
4. IS-NMF of each source spectrogram gives ``T0`` and ``V0``;
5. demixing matrices from the GEVD of the last two sources' SCMs;
6. ``Lambda0 = ddiag(W^H R W)`` for every source.
"""

import itertools
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize

from .fastmnmf import FLOOR, InitBundle
from .hermlin import BlockLayout, ddiag, gevd_joint_diag, hermitian

KMEANS_ITERS = 50
TAU = 1.0
NEIGHBORS = 3
ALIGN_ROUNDS = 10
REG = 1e-6

# spawn keys of the seed tree
_CLUSTER, _NMF = 0, 1
_FULL_ARRAY_KEY = 1000


class FactorialBlowup(ValueError):
    pass


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for sub-task ``key`` of the run seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _features(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-norm observation vectors with the first channel's phase removed."""
    norm = np.linalg.norm(X, axis=-1)
    silent = norm <= 1e-12 * max(norm.max(), 1e-300)
    ref = X[..., :1]
    phase = np.where(np.abs(ref) > 0, ref / np.maximum(np.abs(ref), 1e-300), 1.0)
    u = X * phase.conj() / np.where(silent, 1.0, norm)[..., None]
    u[silent] = 0.0
    return np.concatenate([u.real, u.imag], axis=-1), silent


def _sq_dist(F: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (F**2).sum(-1)[:, :, None] - 2 * F @ np.swapaxes(C, 1, 2) + (C**2).sum(-1)[:, None, :]
    return np.maximum(d, 0.0)


def _kmeans(F: np.ndarray, n_clusters: int, rng: np.random.Generator, n_iter: int) -> np.ndarray:
    """Batched Lloyd k-means over frequency bins with k-means++ seeding."""
    n_bins, n_frames, _ = F.shape
    rows = np.arange(n_bins)
    C = np.empty((n_bins, n_clusters, F.shape[-1]))
    C[:, 0] = F[rows, rng.integers(n_frames, size=n_bins)]
    for c in range(1, n_clusters):
        d2 = _sq_dist(F, C[:, :c]).min(axis=-1)
        cdf = np.cumsum(d2, axis=1)
        total = cdf[:, -1]
        u = rng.random(n_bins) * total
        idx = np.array([np.searchsorted(cdf[i], u[i], side="right") for i in rows])
        idx = np.where(total > 0, np.minimum(idx, n_frames - 1), rng.integers(n_frames, size=n_bins))
        C[:, c] = F[rows, idx]
    for _ in range(n_iter):
        labels = _sq_dist(F, C).argmin(axis=-1)
        onehot = labels[..., None] == np.arange(n_clusters)
        counts = onehot.sum(axis=1)
        sums = np.swapaxes(onehot, 1, 2).astype(float) @ F
        C = np.where(counts[..., None] > 0, sums / np.maximum(counts, 1)[..., None], C)
    return C


def _degenerate_bins(F: np.ndarray, n_clusters: int) -> np.ndarray:
    out = np.zeros(F.shape[0], dtype=bool)
    for i in range(F.shape[0]):
        distinct = np.unique(np.round(F[i], 9), axis=0)
        out[i] = len(distinct) < n_clusters
    return out


def _pearson_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Correlation between columns of ``A`` and columns of ``B``; 0 for constant columns."""
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    denom = np.outer(na, nb)
    out = A.T @ B
    return np.divide(out, denom, out=np.zeros_like(out), where=denom > 1e-12)


def _best_assignment(score: np.ndarray) -> np.ndarray:
    """Permutation ``p`` maximizing ``sum_n score[p[n], n]``; identity unless strictly better."""
    rows, cols = scipy.optimize.linear_sum_assignment(score, maximize=True)
    perm = np.empty(score.shape[0], dtype=int)
    perm[cols] = rows
    n = score.shape[0]
    if score[perm, np.arange(n)].sum() <= np.trace(score) + 1e-12:
        return np.arange(n)
    return perm


def align_frequency_permutations(
    masks: np.ndarray, neighbors: int = NEIGHBORS, max_rounds: int = ALIGN_ROUNDS
) -> Tuple[np.ndarray, np.ndarray]:
    """Resolve per-bin label permutations of soft masks ``(I, J, N)``.

    A greedy sweep first chains each bin to its already-aligned lower
    neighbours. Then rounds of (global pass against one centroid sequence
    per source, local pass against the bins within ``neighbors``) repeat
    until no bin changes or ``max_rounds`` is reached.

    Returns:
        ``(aligned, perms)`` where ``aligned[i] = masks[i][:, perms[i]]``.
    """
    n_bins, _, n_src = masks.shape
    perms = np.tile(np.arange(n_src), (n_bins, 1))
    if n_src == 1:
        return masks.copy(), perms
    aligned = masks.copy()

    def apply(i, p):
        perms[i] = perms[i][p]
        aligned[i] = aligned[i][:, p]

    for i in range(1, n_bins):
        score = sum(
            _pearson_matrix(aligned[i], aligned[k]) for k in range(max(0, i - neighbors), i)
        )
        apply(i, _best_assignment(score))

    for _ in range(max_rounds):
        changed = False
        centroid = aligned.mean(axis=0)
        for i in range(n_bins):
            p = _best_assignment(_pearson_matrix(aligned[i], centroid))
            if np.any(p != np.arange(n_src)):
                apply(i, p)
                changed = True
        for i in range(n_bins):
            near = [k for k in range(i - neighbors, i + neighbors + 1) if k != i and 0 <= k < n_bins]
            p = _best_assignment(sum(_pearson_matrix(aligned[i], aligned[k]) for k in near))
            if np.any(p != np.arange(n_src)):
                apply(i, p)
                changed = True
        if not changed:
            break
    return aligned, perms


def cluster_masks(
    X: np.ndarray,
    n_sources: int,
    rng: np.random.Generator,
    tau: float = TAU,
    n_iter: int = KMEANS_ITERS,
    align: bool = True,
) -> np.ndarray:
    """Soft masks ``(I, J, N)`` from frequency bin-wise clustering.

    Observation vectors are unit-normalized (phase referenced to the first
    channel) and clustered with k-means; the soft assignment is a softmax of
    negative squared distances to the centroids with temperature ``tau``.
    Bins with fewer than ``N`` distinct vectors, and silent points, get a
    uniform mask.
    """
    n_bins, n_frames, _ = X.shape
    if n_frames < n_sources:
        raise ValueError("need at least as many frames as sources")
    if n_sources == 1:
        return np.ones((n_bins, n_frames, 1))
    F, silent = _features(X)
    C = _kmeans(F, n_sources, rng, n_iter)
    logits = -_sq_dist(F, C) / tau
    logits -= logits.max(axis=-1, keepdims=True)
    masks = np.exp(logits)
    masks /= masks.sum(axis=-1, keepdims=True)
    masks[silent] = 1.0 / n_sources
    masks[_degenerate_bins(F, n_sources)] = 1.0 / n_sources
    if align:
        masks, _ = align_frequency_permutations(masks)
    return masks


def align_subarray_permutations(masks: Sequence[np.ndarray]) -> List[Tuple[int, ...]]:
    """Label permutation per subarray that best matches subarray 0's masks.

    For each subarray ``l`` the permutation ``p`` maximizing
    ``sum_n corr(masks[0][..., n], masks[l][..., p[n]])`` is found by
    exhaustive search; correlations are Pearson over all time-frequency
    points.
    """
    n_src = masks[0].shape[-1]
    if n_src > 8:
        raise FactorialBlowup(f"exhaustive search over {n_src}! permutations refused")
    ref = masks[0].reshape(-1, n_src)
    out = [tuple(range(n_src))]
    for m in masks[1:]:
        corr = _pearson_matrix(ref, m.reshape(-1, n_src))
        best, best_val = None, -np.inf
        for perm in itertools.permutations(range(n_src)):
            val = corr[np.arange(n_src), perm].sum()
            if val > best_val:
                best, best_val = perm, val
        out.append(tuple(int(p) for p in best))
    return out


def soft_mask_images(X: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``c_ijn = mask_ijn x_ij`` with shape ``(I, J, N, M)``."""
    return mask[..., None] * X[:, :, None, :]


def _regularize(R: np.ndarray) -> np.ndarray:
    M = R.shape[-1]
    tr = np.trace(R, axis1=-2, axis2=-1).real
    load = np.where(tr > 0, REG * tr / M, 1.0)
    return R + load[..., None, None] * np.eye(M)


def image_covariance(C: np.ndarray) -> np.ndarray:
    """``R_in = sum_j c_ijn c_ijn^H / J`` with shape ``(I, N, M, M)``."""
    return np.einsum("ijna,ijnb->inab", C, C.conj()) / C.shape[1]


def init_spectrogram(C: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Initial spectrograms ``h_ijn = c^H R_in^{-1} c / M`` and the SCMs ``R_in``."""
    M = C.shape[-1]
    R = image_covariance(C)
    R_inv = np.linalg.inv(_regularize(R))
    h = np.einsum("ijna,inab,ijnb->ijn", C.conj(), R_inv, C).real / M
    return np.maximum(h, 0.0), R


def is_divergence(h: np.ndarray, approx: np.ndarray) -> float:
    ratio = h / approx
    return float(np.sum(ratio - np.log(ratio) - 1.0))


def is_nmf(
    h: np.ndarray,
    n_bases: int,
    rng: np.random.Generator,
    max_iter: int = 1000,
    tol: float = 1e-4,
    return_trace: bool = False,
):
    """Itakura-Saito NMF ``h ~ W @ H`` by multiplicative updates.

    Random positive start scaled by ``sqrt(mean(h) / K)``; updates use the
    exponent 1/2, which makes each step a majorization-minimization step.
    Stops after ``max_iter`` iterations or when, checked every 10
    iterations, the divergence decrease relative to the initial divergence
    falls below ``tol``.
    """
    h = np.maximum(np.asarray(h, dtype=float), FLOOR)
    n_rows, n_cols = h.shape
    avg = np.sqrt(h.mean() / n_bases)
    W = np.abs(avg * rng.standard_normal((n_rows, n_bases)))
    H = np.abs(avg * rng.standard_normal((n_bases, n_cols)))
    eps = np.finfo(float).eps
    W = np.maximum(W, eps)
    H = np.maximum(H, eps)
    trace = [is_divergence(h, W @ H)]
    previous = trace[0]
    for it in range(1, max_iter + 1):
        WH = W @ H
        W *= np.sqrt(((h / WH**2) @ H.T) / ((1.0 / WH) @ H.T))
        W = np.maximum(W, eps)
        WH = W @ H
        H *= np.sqrt((W.T @ (h / WH**2)) / (W.T @ (1.0 / WH)))
        H = np.maximum(H, eps)
        if return_trace:
            trace.append(is_divergence(h, W @ H))
        if tol > 0 and it % 10 == 0:
            err = is_divergence(h, W @ H)
            if (previous - err) / trace[0] < tol:
                break
            previous = err
    if return_trace:
        return W, H, trace
    return W, H


def init_spatial(
    R: np.ndarray, layout: Optional[BlockLayout] = None
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Demixing matrices and diagonalized SCMs from initial SCMs ``(I, N, M, M)``.

    Within each block of ``layout`` the block SCMs of the last two sources are
    jointly diagonalized by a GEVD; ``Lambda0_in = ddiag(W^H R_in W)`` for all
    sources. With a single source its SCM is whitened instead.
    """
    M = R.shape[-1]
    layout = layout or BlockLayout.single(M)
    W0, lam_parts = [], []
    for sl in layout.slices:
        Rl = R[..., sl, sl]
        if R.shape[1] >= 2:
            A, B = _regularize(Rl[:, -2]), _regularize(Rl[:, -1])
        else:
            A = B = _regularize(Rl[:, 0])
        W, _ = gevd_joint_diag(A, B)
        W0.append(np.ascontiguousarray(W))
        lam_parts.append(ddiag(hermitian(W)[:, None] @ Rl @ W[:, None]))
    return W0, np.maximum(np.concatenate(lam_parts, axis=-1), FLOOR)


def _nmf_factors(h0: np.ndarray, n_bases: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    n_bins, n_frames, n_src = h0.shape
    T = np.empty((n_bins, n_bases, n_src))
    V = np.empty((n_bases, n_frames, n_src))
    for n in range(n_src):
        W, H = is_nmf(h0[:, :, n], n_bases, derive_rng(seed, _NMF, n))
        T[:, :, n] = W
        V[:, :, n] = H
    return np.maximum(T, FLOOR), np.maximum(V, FLOOR)


def _bundle(X, masks, layout, n_bases, seed) -> InitBundle:
    C = soft_mask_images(X, masks)
    h0, R = init_spectrogram(C)
    W0, Lam0 = init_spatial(R, layout)
    T0, V0 = _nmf_factors(h0, n_bases, seed)
    return InitBundle(T0, V0, W0, Lam0, layout, h0=h0, Rinit=R, masks=masks)


def subarray_masks(
    X: np.ndarray, layout: BlockLayout, n_sources: int, seed: int
) -> List[np.ndarray]:
    """Per-subarray clustering masks, relabelled to agree with subarray 0."""
    masks = [
        cluster_masks(x, n_sources, derive_rng(seed, _CLUSTER, l))
        for l, x in enumerate(layout.split(X))
    ]
    perms = align_subarray_permutations(masks)
    return [m[..., list(p)] for m, p in zip(masks, perms)]


def init_full(X: np.ndarray, n_sources: int, n_bases: int, seed: int) -> InitBundle:
    """Initialization for full-array FastMNMF (masks from all channels)."""
    masks = cluster_masks(X, n_sources, derive_rng(seed, _CLUSTER, _FULL_ARRAY_KEY))
    return _bundle(X, masks, BlockLayout.single(X.shape[-1]), n_bases, seed)


def init_single(
    X: np.ndarray, layout: BlockLayout, n_sources: int, n_bases: int, seed: int, block: int = 0
) -> InitBundle:
    """Initialization for FastMNMF on subarray ``block`` only."""
    x = layout.split(X)[block]
    masks = cluster_masks(x, n_sources, derive_rng(seed, _CLUSTER, block))
    return _bundle(x, masks, BlockLayout.single(x.shape[-1]), n_bases, seed)


def init_distributed(
    X: np.ndarray,
    layout: BlockLayout,
    n_sources: int,
    n_bases: int,
    seed: int,
    shared: bool = True,
):
    """Initialization for distributed FastMNMF.

    Masks are estimated per subarray and aligned across subarrays. In shared
    mode the spectrograms come from the concatenated images and the full
    image covariance, and each ``W^(l)`` from the diagonal blocks. With
    ``shared=False`` a list of per-subarray bundles is returned, each built
    from its own subarray alone.
    """
    masks = subarray_masks(X, layout, n_sources, seed)
    if not shared:
        return [
            _bundle(x, m, BlockLayout.single(x.shape[-1]), n_bases, seed)
            for x, m in zip(layout.split(X), masks)
        ]
    per_channel = np.concatenate(
        [np.repeat(m[..., None], size, axis=-1) for m, size in zip(masks, layout.sizes)],
        axis=-1,
    )  # (I, J, N, M)
    C = per_channel * X[:, :, None, :]
    h0, R = init_spectrogram(C)
    W0, Lam0 = init_spatial(R, layout)
    T0, V0 = _nmf_factors(h0, n_bases, seed)
    return InitBundle(T0, V0, W0, Lam0, layout, h0=h0, Rinit=R, masks=np.stack(masks, axis=-1))
