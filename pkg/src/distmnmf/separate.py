"""Multichannel Wiener filtering in the jointly diagonalized domain."""

from dataclasses import dataclass
from typing import List, Union

import numpy as np

from .distributed import BlockSpatialModel
from .fastmnmf import FLOOR, NmfModel, SpatialModel, SingularDemixer, decorrelate
from .stft import StftConfig, stft_inverse


@dataclass
class SourceImages:
    """Estimated source images ``(I, J, N, M)`` at every microphone."""

    values: np.ndarray
    reference_mic: int = 0

    @property
    def n_sources(self) -> int:
        return self.values.shape[2]

    def at_reference(self) -> np.ndarray:
        return self.values[..., self.reference_mic]


def wiener_gains(model: NmfModel, Lam: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    """Per-source gains ``h_ijn [Lambda_in]_mm / eta_ijm``, shape ``(I, J, N, M)``."""
    h = model.spectrogram()
    parts = h[..., None] * Lam[:, None, :, :]
    eta = np.maximum(parts.sum(axis=2), floor)
    return parts / eta[:, :, None, :]


def wiener_full(
    X: np.ndarray,
    model: NmfModel,
    spatial: SpatialModel,
    floor: float = FLOOR,
    reference_mic: int = 0,
) -> SourceImages:
    """``c_ijn = W_i^{-H} diag(g_ijn) W_i^H x_ij`` for every source."""
    try:
        W_inv = np.linalg.inv(spatial.W)
    except np.linalg.LinAlgError as err:
        raise SingularDemixer(str(err)) from err
    y = decorrelate(X, spatial.W)
    z = wiener_gains(model, spatial.Lam, floor) * y[:, :, None, :]
    return SourceImages(z @ W_inv.conj()[:, None], reference_mic)


def wiener_block(
    X: np.ndarray,
    models: Union[NmfModel, List[NmfModel]],
    spatial: BlockSpatialModel,
    floor: float = FLOOR,
    reference_mic: int = 0,
) -> SourceImages:
    """Wiener filtering inside each subarray; outputs concatenated over channels."""
    layout = spatial.layout
    parts = []
    for l, x in enumerate(layout.split(X)):
        model = models if isinstance(models, NmfModel) else models[l]
        parts.append(wiener_full(x, model, spatial.block(l), floor).values)
    return SourceImages(np.concatenate(parts, axis=-1), reference_mic)


def reconstruct(images: SourceImages, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Time-domain images with shape ``(N, out_len, M)``."""
    return np.stack(
        [stft_inverse(images.values[:, :, n, :], cfg, out_len) for n in range(images.n_sources)]
    )
