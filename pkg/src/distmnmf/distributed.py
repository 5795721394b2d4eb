"""Distributed FastMNMF with block-diagonal spatial covariance matrices.

Every subarray owns its demixing matrices ``W_i^(l)`` and its slice of the
diagonalized SCMs; inter-subarray covariance is never stored. In the default
shared mode one NMF spectrogram model serves all subarrays. With
``shared=False`` each subarray keeps its own NMF model (the ablation), which is
the same as running single-subarray FastMNMF on each subarray side by side.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .fastmnmf import (
    FLOOR,
    Callback,
    FitReport,
    InitBundle,
    NmfModel,
    SpatialModel,
    _BlockState,
    _cost_blocks,
    _lam_step,
    _t_step,
    _v_step,
    compute_eta,
    fit_full,
    ip_update_w,
    run_states,
)
from .hermlin import BlockLayout, blkdiag


@dataclass
class BlockSpatialModel:
    layout: BlockLayout
    W: List[np.ndarray]
    Lam: np.ndarray

    def assembled(self) -> SpatialModel:
        """Equivalent full-array spatial model with ``W_i = blkdiag(W_i^(l))``."""
        return SpatialModel(blkdiag(self.W), self.Lam.copy())

    def block(self, l: int) -> SpatialModel:
        sl = self.layout.slices[l]
        return SpatialModel(self.W[l], self.Lam[:, :, sl])

    def copy(self) -> "BlockSpatialModel":
        return BlockSpatialModel(self.layout, [w.copy() for w in self.W], self.Lam.copy())


Models = Union[NmfModel, List[NmfModel]]


def map_index(layout: BlockLayout, l: int, mu: int) -> int:
    """Global channel index of channel ``mu`` within subarray ``l`` (0-based)."""
    if not 0 <= l < layout.n_blocks or not 0 <= mu < layout.sizes[l]:
        raise IndexError(f"(l={l}, mu={mu}) outside layout {layout.sizes}")
    return mu + layout.offsets[l]


def _models_per_block(models: Models, layout: BlockLayout) -> List[NmfModel]:
    if isinstance(models, NmfModel):
        return [models]
    if len(models) != layout.n_blocks:
        raise ValueError("independent mode needs one NMF model per subarray")
    return list(models)


def cost_dist(
    X: np.ndarray,
    models: Models,
    spatial: BlockSpatialModel,
    floor: float = FLOOR,
) -> float:
    """Negative log-likelihood of the block-diagonal model.

    ``models`` is a single :class:`NmfModel` for the shared model or a list
    with one model per subarray for the independent ablation.
    """
    layout = spatial.layout
    Xb = layout.split(X)
    if isinstance(models, NmfModel):
        return _cost_blocks(Xb, spatial.W, models.T, models.V, spatial.Lam, floor)
    total = 0.0
    for l, model in enumerate(_models_per_block(models, layout)):
        sl = layout.slices[l]
        total += _cost_blocks(
            [Xb[l]], [spatial.W[l]], model.T, model.V, spatial.Lam[:, :, sl], floor
        )
    return total


def ip_update_block(
    X_l: np.ndarray, eta_l: np.ndarray, W_l: np.ndarray, mu: int, floor: float = FLOOR
) -> np.ndarray:
    """Iterative projection of column ``mu`` inside one subarray.

    Identical to :func:`~distmnmf.fastmnmf.ip_update_w` on the subarray's
    channels; ``Q`` is built from ``X_l`` alone.
    """
    return ip_update_w(X_l, eta_l, W_l, mu, floor)


def mm_update_shared(
    models: Models,
    Lam: np.ndarray,
    powy: np.ndarray,
    eta: Union[np.ndarray, List[np.ndarray]],
    layout: BlockLayout,
    floor: float = FLOOR,
) -> Tuple[Models, np.ndarray, Union[np.ndarray, List[np.ndarray]]]:
    """Spectral MM updates (bases, activations, diagonal SCMs) for either mode.

    Shared mode (``models`` is one model): the updates run once over the
    concatenated channel axis so every subarray contributes to ``t`` and
    ``v``. Independent mode (``models`` is a list): each subarray updates its
    own model from its own channels; ``eta`` is then a per-subarray list.

    Returns:
        ``(models, Lam, eta)`` with ``eta`` refreshed after the last update.
    """
    if isinstance(models, NmfModel):
        T, V = models.T, models.V
        T = _t_step(T, V, Lam, powy, eta, floor)
        eta = compute_eta(T, V, Lam, floor)
        V = _v_step(T, V, Lam, powy, eta, floor)
        eta = compute_eta(T, V, Lam, floor)
        Lam = _lam_step(T, V, Lam, powy, eta, floor)
        eta = compute_eta(T, V, Lam, floor)
        return NmfModel(T, V), Lam, eta
    out_models, out_eta, out_lam = [], [], []
    for l, model in enumerate(_models_per_block(models, layout)):
        sl = layout.slices[l]
        m, lam_l, e = mm_update_shared(
            model, np.ascontiguousarray(Lam[:, :, sl]),
            np.ascontiguousarray(powy[:, :, sl]), eta[l], layout, floor,
        )
        out_models.append(m)
        out_lam.append(lam_l)
        out_eta.append(e)
    return out_models, np.concatenate(out_lam, axis=-1), out_eta


def fit_distributed(
    X: np.ndarray,
    layout: BlockLayout,
    init: Union[InitBundle, Sequence[InitBundle]],
    iters: int,
    shared: bool = True,
    floor: float = FLOOR,
    callback: Optional[Callback] = None,
    record_cost: bool = True,
) -> Tuple[Models, BlockSpatialModel, FitReport]:
    """Distributed FastMNMF.

    Args:
        X: Observations ``(I, J, M)`` with subarray channels contiguous.
        layout: Subarray partition of the channels.
        init: For the shared model, one bundle whose ``W0`` holds a block per
            subarray. For ``shared=False``, one single-block bundle per
            subarray.
        iters: Number of sweeps.
        shared: Share the NMF spectrogram model across subarrays.

    Returns:
        ``(models, spatial, report)``; ``models`` is an :class:`NmfModel` in
        shared mode and a list of per-subarray models otherwise.
    """
    if X.shape[-1] != layout.n_channels:
        raise ValueError(f"X has {X.shape[-1]} channels, layout needs {layout.n_channels}")
    Xb = layout.split(X)
    if shared:
        if not isinstance(init, InitBundle) or init.layout != layout:
            raise ValueError("shared mode needs one InitBundle with the same layout")
        states = [_BlockState(Xb, init.W0, init.T0, init.V0, init.Lam0, floor)]
    else:
        inits = list(init) if not isinstance(init, InitBundle) else None
        if inits is None or len(inits) != layout.n_blocks:
            raise ValueError("independent mode needs one InitBundle per subarray")
        states = [
            _BlockState([x], [b.full_W0], b.T0, b.V0, b.Lam0, floor)
            for x, b in zip(Xb, inits)
        ]

    def snapshot():
        if shared:
            s = states[0]
            return NmfModel(s.T, s.V), BlockSpatialModel(layout, s.Wb, s.Lam)
        return (
            [NmfModel(s.T, s.V) for s in states],
            BlockSpatialModel(
                layout, [s.Wb[0] for s in states],
                np.concatenate([s.Lam for s in states], axis=-1),
            ),
        )

    report = run_states(states, iters, snapshot, callback, record_cost)
    models, spatial = snapshot()
    if shared:
        models = models.copy()
    else:
        models = [m.copy() for m in models]
    return models, spatial.copy(), report


def fit_single(
    X_sub: np.ndarray,
    init: InitBundle,
    iters: int,
    floor: float = FLOOR,
    callback: Optional[Callback] = None,
    record_cost: bool = True,
) -> Tuple[NmfModel, SpatialModel, FitReport]:
    """FastMNMF restricted to one subarray's channels ``X_sub``."""
    return fit_full(
        np.ascontiguousarray(X_sub), init, iters, floor=floor,
        callback=callback, record_cost=record_cost,
    )
