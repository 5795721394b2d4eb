"""Hann-window STFT with weighted overlap-add inverse, plus WAV helpers."""

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import scipy.io.wavfile
import scipy.signal


_NORM_FLOOR = 1e-2


class SignalTooShort(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int
    window_len: int
    hop_len: int

    def __post_init__(self):
        if not self.window_len >= self.hop_len >= 1:
            raise ValueError("need window_len >= hop_len >= 1")

    @classmethod
    def from_ms(cls, sample_rate: int, window_ms: float = 256.0, hop_ms: float = 64.0):
        """Build a config from durations; the defaults are 256 ms / 64 ms."""
        return cls(
            sample_rate=int(sample_rate),
            window_len=int(round(sample_rate * window_ms / 1000.0)),
            hop_len=int(round(sample_rate * hop_ms / 1000.0)),
        )

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return scipy.signal.get_window("hann", self.window_len, fftbins=True)

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop_len + 1

    def interior(self, n_frames: int) -> slice:
        """Samples covered by the full complement of overlapping frames."""
        return slice(self.window_len - self.hop_len, n_frames * self.hop_len)


def _as_2d(signal: np.ndarray) -> Tuple[np.ndarray, bool]:
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        return signal[:, None], True
    return signal, False


def stft_forward(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """One-sided STFT.

    Args:
        signal: Waveform with shape ``(n_samples,)`` or ``(n_samples, M)``.
        cfg: Framing parameters.

    Returns:
        Complex array of shape ``(I, J, M)``; frame ``j`` covers samples
        ``[j * hop, j * hop + window_len)``.
    """
    x, _ = _as_2d(signal)
    if x.shape[0] < cfg.window_len:
        raise SignalTooShort(
            f"signal has {x.shape[0]} samples, window needs {cfg.window_len}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    n_frames = cfg.n_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len, axis=0)
    frames = frames[:: cfg.hop_len][:n_frames]  # (J, M, window_len)
    spec = np.fft.rfft(frames * cfg.window, axis=-1)  # (J, M, I)
    return np.ascontiguousarray(spec.transpose(2, 0, 1))


def stft_inverse(X: np.ndarray, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_forward`.

    Returns a real array of shape ``(out_len, M)`` (or ``(out_len,)`` when ``X``
    is two-dimensional). Reconstruction is exact on the interior, where the
    summed squared window is at least 1% of its peak; edge samples with less
    coverage are tapered, and samples not reached by any frame are zero.
    """
    X = np.asarray(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[..., None]
    if X.ndim != 3 or X.shape[0] != cfg.n_bins:
        raise ShapeMismatch(
            f"expected ({cfg.n_bins}, J, M) spectrogram, got {X.shape}"
        )
    n_bins, n_frames, n_ch = X.shape
    win = cfg.window
    frames = np.fft.irfft(X.transpose(1, 2, 0), n=cfg.window_len, axis=-1) * win
    total = max(out_len, (n_frames - 1) * cfg.hop_len + cfg.window_len)
    out = np.zeros((total, n_ch))
    norm = np.zeros(total)
    for j in range(n_frames):
        start = j * cfg.hop_len
        out[start : start + cfg.window_len] += frames[j].T
        norm[start : start + cfg.window_len] += win**2
    # Edge samples covered only by window tails would be divided by tiny
    # weights; flooring the normalizer tapers them instead of amplifying
    # whatever an inconsistent (e.g. masked) spectrogram puts there.
    peak = norm.max() if n_frames else 0.0
    covered = norm > 0
    out[covered] /= np.maximum(norm[covered], _NORM_FLOOR * peak)[:, None]
    out = out[:out_len]
    return out[:, 0] if squeeze else out


PathLike = Union[str, Path]


def read_wav(path: PathLike) -> Tuple[int, np.ndarray]:
    """Read a WAV file as float64 ``(n_samples, n_channels)``.

    16-bit PCM is scaled to [-1, 1); float files are returned unchanged.
    """
    rate, data = scipy.io.wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(float) / 2147483648.0
    else:
        data = data.astype(float)
    if data.ndim == 1:
        data = data[:, None]
    return int(rate), data


def write_wav(path: PathLike, rate: int, data: np.ndarray, subtype: str = "float32"):
    """Write ``(n_samples, n_channels)`` audio as float32 or 16-bit PCM."""
    data = np.asarray(data)
    if subtype == "float32":
        payload = data.astype(np.float32)
    elif subtype == "pcm16":
        payload = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    scipy.io.wavfile.write(path, int(rate), payload)
