"""FastMNMF with jointly diagonalizable spatial covariance matrices.

Array conventions (0-based indices throughout):

* observations ``X``: ``(I, J, M)`` complex
* NMF bases ``T``: ``(I, K, N)``, activations ``V``: ``(K, J, N)``
* demixing matrices ``W``: ``(I, M, M)``, column ``m`` is ``w_im``
* diagonalized SCMs ``Lam``: ``(I, N, M)``, ``Lam[i, n, m] = [Lambda_in]_mm``

The estimator engine below works on a list of channel blocks so that the
distributed variant (block-diagonal ``W``) reuses exactly the same kernels;
the full-array estimator is the single-block case.
"""

import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .hermlin import BlockLayout, blkdiag, hermitian, pinv_solve

FLOOR = 1e-6
_LOG_CLAMP = 1e-300


# degenerate-bin guards: null-space solutions and pseudo-inverse columns
# that make W_i numerically singular are rejected
_NULL_RATIO = 1e-12
_MAX_COND = 1e12


class SingularDemixer(np.linalg.LinAlgError):
    pass


@dataclass
class NmfModel:
    T: np.ndarray
    V: np.ndarray

    @property
    def n_bases(self) -> int:
        return self.T.shape[1]

    @property
    def n_sources(self) -> int:
        return self.T.shape[2]

    def spectrogram(self) -> np.ndarray:
        return spectrogram(self.T, self.V)

    def copy(self) -> "NmfModel":
        return NmfModel(self.T.copy(), self.V.copy())


@dataclass
class SpatialModel:
    W: np.ndarray
    Lam: np.ndarray

    def copy(self) -> "SpatialModel":
        return SpatialModel(self.W.copy(), self.Lam.copy())


@dataclass
class InitBundle:
    """Starting point for an estimator.

    ``W0`` always holds one demixing array per block of ``layout``; the full
    array estimator uses a single block.
    """

    T0: np.ndarray
    V0: np.ndarray
    W0: List[np.ndarray]
    Lam0: np.ndarray
    layout: BlockLayout
    h0: Optional[np.ndarray] = None
    Rinit: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    @property
    def full_W0(self) -> np.ndarray:
        return self.W0[0] if len(self.W0) == 1 else blkdiag(self.W0)


@dataclass
class FitReport:
    cost_trace: List[float] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    stage_times: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.totals = defaultdict(float)

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0


_NULL_TIMER = StageTimer()


def spectrogram(T: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``h_ijn = sum_k t_ikn v_kjn`` with shape ``(I, J, N)``."""
    return np.matmul(T.transpose(2, 0, 1), V.transpose(2, 0, 1)).transpose(1, 2, 0)


def decorrelate(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``y_ij = W_i^H x_ij`` for all bins and frames."""
    if X.shape[0] != W.shape[0] or X.shape[2] != W.shape[1] or W.shape[1] != W.shape[2]:
        raise ValueError(f"shape mismatch: X {X.shape}, W {W.shape}")
    return X @ W.conj()


def compute_eta(
    T: np.ndarray, V: np.ndarray, Lam: np.ndarray, floor: float = FLOOR, raw: bool = False
) -> np.ndarray:
    """Modelled power ``eta_ijm = sum_n h_ijn [Lambda_in]_mm``, floored.

    The spectrogram is formed first, then contracted with ``Lam`` (cost
    ``O(IJN(K + M))``). With ``raw=True`` no floor is applied.
    """
    eta = spectrogram(T, V) @ Lam
    if raw:
        return eta
    return np.maximum(eta, floor)


def _logdet2(Wb: Sequence[np.ndarray]) -> np.ndarray:
    # sum over blocks of ln|det W_i^(l)|^2, per frequency
    total = 0.0
    for W in Wb:
        _, logabs = np.linalg.slogdet(W)
        if np.any(np.isneginf(logabs)):
            raise SingularDemixer("demixing matrix has zero determinant")
        total = total + 2.0 * logabs
    return total


def _block_powy(Xb: Sequence[np.ndarray], Wb: Sequence[np.ndarray]) -> np.ndarray:
    parts = [np.abs(decorrelate(x, w)) ** 2 for x, w in zip(Xb, Wb)]
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)


def _cost_blocks(Xb, Wb, T, V, Lam, floor=FLOOR) -> float:
    n_frames = Xb[0].shape[1]
    logdet = _logdet2(Wb)
    powy = _block_powy(Xb, Wb)
    eta_raw = compute_eta(T, V, Lam, raw=True)
    fit = powy / np.maximum(eta_raw, floor) + np.log(np.maximum(eta_raw, _LOG_CLAMP))
    return float(fit.sum() - n_frames * np.sum(logdet))


def cost_full(X: np.ndarray, model: NmfModel, spatial: SpatialModel, floor: float = FLOOR) -> float:
    """Negative log-likelihood of the FastMNMF model up to a constant.

    ``eta`` is floored in the division and clamped only at 1e-300 in the
    logarithm.
    """
    return _cost_blocks([X], [spatial.W], model.T, model.V, spatial.Lam, floor)


def _solve_unit(A: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Solve ``A_i w_i = e_m`` for every bin, falling back to the pseudo-inverse.

    Returns ``(w, fallback)`` where ``fallback`` flags the pseudo-inverse bins.
    """
    n_bins, size, _ = A.shape
    e = np.zeros(size, dtype=A.dtype)
    e[m] = 1.0
    try:
        w = np.linalg.solve(A, np.broadcast_to(e[:, None], (n_bins, size, 1)))[..., 0]
        bad = ~np.all(np.isfinite(w), axis=-1)
    except np.linalg.LinAlgError:
        w = np.empty((n_bins, size), dtype=A.dtype)
        bad = np.zeros(n_bins, dtype=bool)
        for i in range(n_bins):
            try:
                w[i] = np.linalg.solve(A[i], e)
                bad[i] = not np.all(np.isfinite(w[i]))
            except np.linalg.LinAlgError:
                bad[i] = True
    for i in np.flatnonzero(bad):
        w[i] = pinv_solve(A[i], e)
    return w, bad


def weighted_covariance(X: np.ndarray, eta_m: np.ndarray) -> np.ndarray:
    """``Q_i = (1/J) sum_j x_ij x_ij^H / eta_ij`` for every bin."""
    return _covariance(_Layouts(X), eta_m)


class _Layouts:
    """Observation layouts reused by every demixing update: ``(I, M, J)`` and ``conj(X)``."""

    def __init__(self, X: np.ndarray):
        self.Xt = np.ascontiguousarray(X.transpose(0, 2, 1))
        self.Xc = np.ascontiguousarray(X.conj())
        self.n_frames = X.shape[1]


def _covariance(lay: _Layouts, eta_m: np.ndarray) -> np.ndarray:
    return (lay.Xt * (1.0 / (lay.n_frames * eta_m))[:, None, :]) @ lay.Xc


def ip_update_w(
    X: np.ndarray, eta: np.ndarray, W: np.ndarray, m: int, floor: float = FLOOR
) -> np.ndarray:
    """Iterative-projection update of demixing column ``m``.

    Args:
        X: Observations ``(I, J, M)``.
        eta: Current modelled powers ``(I, J, M)`` (floored).
        W: Demixing matrices ``(I, M, M)``; not modified.
        m: Column index to update.

    Returns:
        A copy of ``W`` with column ``m`` replaced by the normalized solution
        of ``(W_i^H Q_im) w = e_m``. Where ``Q`` is singular (silent or
        duplicated channels, fewer frames than channels) the subproblem is
        unbounded: null-space solutions are rejected and pseudo-inverse
        columns are kept only if they lower the bin's objective, so a
        rejected bin keeps its previous column and its cost.
    """
    W = W.copy()
    _ip_column(_Layouts(X), eta, W, m, floor)
    return W


def _ip_column(lay: _Layouts, eta: np.ndarray, W: np.ndarray, m: int, floor: float):
    # in-place version of ip_update_w on cached layouts
    Q = _covariance(lay, eta[:, :, m])
    w, fallback = _solve_unit(hermitian(W) @ Q, m)
    scale = np.real(np.einsum("ia,iab,ib->i", w.conj(), Q, w))
    # Rayleigh quotient relative to tr(Q): ~0 only for null-space solutions
    size = np.sum(np.abs(w) ** 2, axis=-1) * np.trace(Q, axis1=-2, axis2=-1).real
    null = scale <= _NULL_RATIO * size
    w = w / np.sqrt(np.maximum(scale, floor))[:, None]
    old = W[:, :, m].copy()
    W[:, :, m] = w
    for i in np.flatnonzero(null | fallback):
        if null[i] or not _improves(W[i], old[i], Q[i], m):
            W[i, :, m] = old[i]


def _improves(W_new: np.ndarray, w_old: np.ndarray, Q: np.ndarray, m: int) -> bool:
    # with singular Q the subproblem has no minimizer; accept a pseudo-inverse
    # column only if it lowers w^H Q w - ln|det W|^2 and keeps W well conditioned
    if np.linalg.cond(W_new) > _MAX_COND:
        return False
    W_old = W_new.copy()
    W_old[:, m] = w_old
    w_new = W_new[:, m]

    def objective(W, w):
        return np.real(w.conj() @ Q @ w) - 2.0 * np.linalg.slogdet(W)[1]

    return objective(W_new, w_new) <= objective(W_old, w_old)


def _t_step(T, V, Lam, powy, eta, floor):
    lam_t = np.swapaxes(Lam, -1, -2)  # (I, M, N)
    a = ((powy / eta**2) @ lam_t).transpose(2, 0, 1)  # (N, I, J)
    b = ((1.0 / eta) @ lam_t).transpose(2, 0, 1)
    v = V.transpose(2, 1, 0)  # (N, J, K)
    num = (a @ v).transpose(1, 2, 0)
    den = np.maximum((b @ v).transpose(1, 2, 0), floor)
    return np.maximum(T * np.sqrt(num / den), floor)


def _v_step(T, V, Lam, powy, eta, floor):
    lam_t = np.swapaxes(Lam, -1, -2)
    a = ((powy / eta**2) @ lam_t).transpose(2, 0, 1)  # (N, I, J)
    b = ((1.0 / eta) @ lam_t).transpose(2, 0, 1)
    t = T.transpose(2, 1, 0)  # (N, K, I)
    num = (t @ a).transpose(1, 2, 0)  # (K, J, N)
    den = np.maximum((t @ b).transpose(1, 2, 0), floor)
    return np.maximum(V * np.sqrt(num / den), floor)


def _lam_step(T, V, Lam, powy, eta, floor):
    h_t = np.swapaxes(spectrogram(T, V), -1, -2)  # (I, N, J)
    num = h_t @ (powy / eta**2)
    den = np.maximum(h_t @ (1.0 / eta), floor)
    return np.maximum(Lam * np.sqrt(num / den), floor)


def mm_update_t(T, V, Lam, powy, eta, floor: float = FLOOR) -> Tuple[np.ndarray, np.ndarray]:
    """MM update of the bases; returns ``(T, eta)`` with ``eta`` refreshed."""
    T = _t_step(T, V, Lam, powy, eta, floor)
    return T, compute_eta(T, V, Lam, floor)


def mm_update_v(T, V, Lam, powy, eta, floor: float = FLOOR) -> Tuple[np.ndarray, np.ndarray]:
    """MM update of the activations; returns ``(V, eta)``."""
    V = _v_step(T, V, Lam, powy, eta, floor)
    return V, compute_eta(T, V, Lam, floor)


def mm_update_lambda(T, V, Lam, powy, eta, floor: float = FLOOR) -> Tuple[np.ndarray, np.ndarray]:
    """MM update of the diagonalized SCMs; returns ``(Lam, eta)``."""
    Lam = _lam_step(T, V, Lam, powy, eta, floor)
    return Lam, compute_eta(T, V, Lam, floor)


class _BlockState:
    """Parameters of one shared NMF model over a set of channel blocks."""

    def __init__(self, Xb, Wb, T, V, Lam, floor):
        self.Xb = list(Xb)
        self.Wb = [np.array(w, dtype=complex) for w in Wb]
        self.T = np.array(T, dtype=float)
        self.V = np.array(V, dtype=float)
        self.Lam = np.array(Lam, dtype=float)
        self.floor = floor
        self.slices = BlockLayout(tuple(x.shape[-1] for x in self.Xb)).slices
        self.layouts = [_Layouts(x) for x in self.Xb]
        self.eta = compute_eta(self.T, self.V, self.Lam, floor)
        self.powy = None

    def update_w(self, timer: StageTimer):
        with timer("ip"):
            for l, (lay, sl) in enumerate(zip(self.layouts, self.slices)):
                eta_l = self.eta[:, :, sl]
                W = self.Wb[l]
                for mu in range(W.shape[-1]):
                    _ip_column(lay, eta_l, W, mu, self.floor)
            _logdet2(self.Wb)

    def update_nmf(self, timer: StageTimer):
        f = self.floor
        with timer("decorrelate"):
            self.powy = _block_powy(self.Xb, self.Wb)
        with timer("mm"):
            self.T = _t_step(self.T, self.V, self.Lam, self.powy, self.eta, f)
        with timer("eta"):
            self.eta = compute_eta(self.T, self.V, self.Lam, f)
        with timer("mm"):
            self.V = _v_step(self.T, self.V, self.Lam, self.powy, self.eta, f)
        with timer("eta"):
            self.eta = compute_eta(self.T, self.V, self.Lam, f)
        with timer("mm"):
            self.Lam = _lam_step(self.T, self.V, self.Lam, self.powy, self.eta, f)
        with timer("eta"):
            self.eta = compute_eta(self.T, self.V, self.Lam, f)

    def cost(self) -> float:
        return _cost_blocks(self.Xb, self.Wb, self.T, self.V, self.Lam, self.floor)


Callback = Callable[[int, object, object], None]


def run_states(
    states: Sequence[_BlockState],
    iters: int,
    snapshot: Callable[[], Tuple[object, object]],
    callback: Optional[Callback] = None,
    record_cost: bool = True,
) -> FitReport:
    """Alternate demixing and NMF updates on every state for ``iters`` sweeps.

    Only the update work is timed; cost evaluation and ``callback`` run
    outside the clock.
    """
    timer = StageTimer()
    report = FitReport()
    if record_cost:
        report.cost_trace.append(sum(s.cost() for s in states))
    for it in range(iters):
        t0 = time.perf_counter()
        for s in states:
            s.update_w(timer)
        for s in states:
            s.update_nmf(timer)
        report.wall_times.append(time.perf_counter() - t0)
        report.iterations = it + 1
        if record_cost:
            report.cost_trace.append(sum(s.cost() for s in states))
        if callback is not None:
            callback(it + 1, *snapshot())
    report.stage_times = dict(timer.totals)
    return report


def fit_full(
    X: np.ndarray,
    init: InitBundle,
    iters: int,
    floor: float = FLOOR,
    callback: Optional[Callback] = None,
    record_cost: bool = True,
) -> Tuple[NmfModel, SpatialModel, FitReport]:
    """Full-array FastMNMF.

    Each sweep updates every demixing column in ascending order, then the
    bases, activations and diagonal SCMs, refreshing ``eta`` after each of
    the last three.
    """
    if X.shape[-1] != init.layout.n_channels:
        raise ValueError("init does not match the channel count of X")
    state = _BlockState(
        [np.ascontiguousarray(X)], [init.full_W0], init.T0, init.V0, init.Lam0, floor
    )

    def snapshot():
        return NmfModel(state.T, state.V), SpatialModel(state.Wb[0], state.Lam)

    report = run_states([state], iters, snapshot, callback, record_cost)
    nmf, spatial = snapshot()
    return nmf.copy(), spatial.copy(), report
