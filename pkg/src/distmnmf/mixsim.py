"""Synthetic mixtures: model sampling, anechoic delay RIRs, power-normalized mixing."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.signal

from .distributed import BlockSpatialModel
from .fastmnmf import NmfModel
from .hermlin import BlockLayout, NotPositiveDefinite, blkdiag, hermitian

SPEED_OF_SOUND = 343.0
RIR_TAPS = 64


class CoincidentPositions(ValueError):
    pass


class SilentSource(ValueError):
    pass


class InvalidScenario(ValueError):
    pass


@dataclass
class Scenario:
    """Room geometry in metres; microphones grouped by subarray."""

    room: Tuple[float, float, float]
    subarrays: List[List[Tuple[float, float, float]]]
    sources: List[Tuple[float, float, float]]
    sample_rate: int = 16000
    speed_of_sound: float = SPEED_OF_SOUND
    reference_mic: int = 0
    noise_floor_db: Optional[float] = None

    def __post_init__(self):
        if not self.sources or not self.subarrays or not all(self.subarrays):
            raise InvalidScenario("need at least one source and one microphone")
        room = np.asarray(self.room, dtype=float)
        if room.shape != (3,) or np.any(room <= 0):
            raise InvalidScenario(f"bad room bounds {self.room}")
        pts = np.vstack([self.mic_positions, np.asarray(self.sources, dtype=float)])
        if pts.shape[1] != 3 or np.any(pts < 0) or np.any(pts > room):
            raise InvalidScenario("all positions must lie inside the room")
        if not 0 <= self.reference_mic < len(self.mic_positions):
            raise InvalidScenario("reference_mic out of range")
        if self.sample_rate <= 0 or self.speed_of_sound <= 0:
            raise InvalidScenario("sample_rate and speed_of_sound must be positive")

    @property
    def layout(self) -> BlockLayout:
        return BlockLayout(tuple(len(s) for s in self.subarrays))

    @property
    def mic_positions(self) -> np.ndarray:
        return np.asarray([p for sub in self.subarrays for p in sub], dtype=float)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            return cls(
                room=tuple(d["room"]),
                subarrays=[[tuple(p) for p in sub] for sub in d["subarrays"]],
                sources=[tuple(p) for p in d["sources"]],
                sample_rate=int(d.get("sample_rate", 16000)),
                speed_of_sound=float(d.get("speed_of_sound", SPEED_OF_SOUND)),
                reference_mic=int(d.get("reference_mic", 0)),
                noise_floor_db=(
                    None if d.get("noise_floor_db") is None else float(d["noise_floor_db"])
                ),
            )
        except (KeyError, TypeError, ValueError) as err:
            if isinstance(err, InvalidScenario):
                raise
            raise InvalidScenario(f"malformed scenario: {err}") from err

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as err:
            raise InvalidScenario(f"invalid JSON: {err}") from err


def tetrahedron(center, edge: float = 0.042, rotation_deg: float = 0.0) -> np.ndarray:
    """Vertices of a regular tetrahedron with a floor-parallel base.

    ``center`` is the centroid. With no rotation one base edge is parallel to
    the x-axis; positive ``rotation_deg`` rotates clockwise seen from above.
    Base vertices come first, the apex last.
    """
    center = np.asarray(center, dtype=float)
    r = edge / math.sqrt(3.0)
    height = edge * math.sqrt(2.0 / 3.0)
    angles = np.deg2rad(np.array([90.0, 210.0, 330.0]) - rotation_deg)
    base = np.stack(
        [r * np.cos(angles), r * np.sin(angles), np.full(3, -height / 4.0)], axis=1
    )
    apex = np.array([[0.0, 0.0, 3.0 * height / 4.0]])
    return center + np.vstack([base, apex])


def reference_scenario(
    n_sources: int = 3, sample_rate: int = 16000, noise_floor_db: Optional[float] = None
) -> Scenario:
    """Three tetrahedral subarrays in a 6 x 4 x 2.5 m room, 3 or 5 sources."""
    z = 1.5
    centers = [(2.0, 2.0, z), (3.0, 2.0, z), (4.0, 2.0, z)]
    rotations = [0.0, 45.0, 90.0]
    subarrays = [
        [tuple(p) for p in tetrahedron(c, 0.042, rot)] for c, rot in zip(centers, rotations)
    ]
    sources = [(1.0, 1.0, z), (3.0, 3.5, z), (5.0, 1.0, z), (1.5, 3.0, z), (4.5, 3.0, z)]
    if n_sources not in (3, 5):
        raise InvalidScenario("the reference geometry defines 3 or 5 sources")
    return Scenario(
        room=(6.0, 4.0, 2.5),
        subarrays=subarrays,
        sources=sources[:n_sources],
        sample_rate=sample_rate,
        noise_floor_db=noise_floor_db,
    )


def fractional_delay(delay: float, gain: float = 1.0, taps: int = RIR_TAPS) -> Tuple[int, np.ndarray]:
    """Blackman-windowed sinc centred at ``delay`` samples.

    Returns ``(start, h)`` where ``h[k]`` is the response at sample
    ``start + k``.
    """
    start = int(math.floor(delay)) - taps // 2 + 1
    x = np.arange(start, start + taps) - delay
    w = 0.42 + 0.5 * np.cos(2 * np.pi * x / taps) + 0.08 * np.cos(4 * np.pi * x / taps)
    return start, gain * np.sinc(x) * w


def delay_rirs(scenario: Scenario, taps: int = RIR_TAPS) -> np.ndarray:
    """Anechoic impulse responses ``(N, M, length)`` with 1/r attenuation."""
    mics = scenario.mic_positions
    srcs = np.asarray(scenario.sources, dtype=float)
    dist = np.linalg.norm(srcs[:, None, :] - mics[None, :, :], axis=-1)
    if np.any(dist < 0.01):
        raise CoincidentPositions("a source lies within 1 cm of a microphone")
    delays = dist / scenario.speed_of_sound * scenario.sample_rate
    length = int(math.floor(delays.max())) + taps // 2 + 1
    rirs = np.zeros(dist.shape + (length,))
    for n in range(dist.shape[0]):
        for m in range(dist.shape[1]):
            start, h = fractional_delay(delays[n, m], 1.0 / dist[n, m], taps)
            keep = start + np.arange(taps) >= 0
            idx = start + np.arange(taps)[keep]
            rirs[n, m, idx] = h[keep]
    return rirs


@dataclass
class GroundTruth:
    dry: np.ndarray  # (N, n_samples)
    images: np.ndarray  # (N, n_samples, M)
    mixture: np.ndarray  # (n_samples, M)
    reference_mic: int = 0


def convolve_mix(dry: np.ndarray, rirs: np.ndarray, reference_mic: int = 0) -> GroundTruth:
    """Convolve dry sources with their RIRs and mix at equal reference power.

    Each image is scaled so that its mean power at ``reference_mic`` is 1 and
    trimmed to the dry-signal length.
    """
    dry = np.atleast_2d(np.asarray(dry, dtype=float))
    n_src, n_samples = dry.shape
    if rirs.shape[0] != n_src:
        raise ValueError("one RIR set per source required")
    images = np.empty((n_src, n_samples, rirs.shape[1]))
    for n in range(n_src):
        if not np.any(dry[n]):
            raise SilentSource(f"source {n} is silent")
        img = scipy.signal.fftconvolve(dry[n][:, None], rirs[n].T, axes=0)[:n_samples]
        power = np.mean(img[:, reference_mic] ** 2)
        if power <= 0:
            raise SilentSource(f"source {n} does not reach the reference microphone")
        images[n] = img / np.sqrt(power)
    return GroundTruth(dry, images, images.sum(axis=0), reference_mic)


def sensor_floor(mixture: np.ndarray, level_db: float, seed: int) -> np.ndarray:
    """Mixture plus independent white noise ``level_db`` below unit image power.

    Delay-only responses give observation covariances of rank ``N`` per
    bin, which leaves the full-array likelihood unbounded when ``N < M``.
    A faint uncorrelated floor (60 dB down in the tests) restores full rank
    without changing the images used as references. Returns a new array.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    noise = rng.standard_normal(np.shape(mixture)) * 10.0 ** (-level_db / 20.0)
    return np.asarray(mixture, dtype=float) + noise


def _envelope(n_samples: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    # random on/off segments of 0.1-0.5 s, smoothed with a 20 ms ramp
    env = np.zeros(n_samples)
    pos = 0
    while pos < n_samples:
        seg = int(rng.uniform(0.1, 0.5) * fs)
        if rng.random() < 0.6:
            env[pos : pos + seg] = rng.uniform(0.3, 1.0)
        pos += seg
    ramp = max(1, int(0.02 * fs))
    env = np.convolve(env, np.ones(ramp) / ramp, mode="same")
    return env + 1e-3


def dry_sources(
    n_sources: int, n_samples: int, sample_rate: int, seed: int
) -> np.ndarray:
    """Nonstationary test signals ``(N, n_samples)``.

    Even-indexed sources are enveloped colored noise, odd-indexed ones are
    enveloped harmonic tones with vibrato.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_samples) / sample_rate
    out = np.empty((n_sources, n_samples))
    for n in range(n_sources):
        if n % 2 == 0:
            white = rng.standard_normal(n_samples)
            pole = rng.uniform(0.5, 0.95)
            sig = scipy.signal.lfilter([1.0], [1.0, -pole], white)
        else:
            f0 = rng.uniform(100.0, 300.0)
            vib = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
            phase = 2 * np.pi * np.cumsum(f0 * vib) / sample_rate
            n_harm = int(min(20, (sample_rate / 2 - 1) // (f0 * 1.05)))
            sig = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, n_harm + 1))
        sig = sig * _envelope(n_samples, sample_rate, rng)
        out[n] = sig / np.sqrt(np.mean(sig**2))
    return out


def _factor(R: np.ndarray) -> np.ndarray:
    # Cholesky factor where possible, eigen square root for PSD-singular SCMs
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        d, U = np.linalg.eigh(0.5 * (R + hermitian(R)))
        if d.min() < -1e-10 * max(d.max(), 1e-300):
            raise NotPositiveDefinite("SCM is not positive semidefinite")
        return U * np.sqrt(np.maximum(d, 0.0))[..., None, :]


def sample_model(h: np.ndarray, R: np.ndarray, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``c_ijn ~ CN(0, h_ijn R_in)`` and their sum.

    Args:
        h: Source spectrograms ``(I, J, N)``.
        R: Spatial covariance matrices ``(I, N, M, M)``.

    Returns:
        ``(X, images)`` with shapes ``(I, J, M)`` and ``(I, J, N, M)``.
    """
    n_bins, n_frames, n_src = h.shape
    M = R.shape[-1]
    cov = np.einsum("ijn,inab->ijab", h, R)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite("mixture covariance is not positive definite") from err
    L = np.empty(R.shape, dtype=complex)
    for i in range(n_bins):
        for n in range(n_src):
            L[i, n] = _factor(R[i, n])
    rng = np.random.default_rng(seed)
    z = (rng.standard_normal((n_bins, n_frames, n_src, M))
         + 1j * rng.standard_normal((n_bins, n_frames, n_src, M))) / np.sqrt(2.0)
    images = np.sqrt(h)[..., None] * np.einsum("inab,ijnb->ijna", L, z)
    return images.sum(axis=2), images


def scm_from_block_model(spatial: BlockSpatialModel) -> np.ndarray:
    """``R_in = W_i^{-H} Lambda_in W_i^{-1}`` for a block model, ``(I, N, M, M)``."""
    blocks = []
    for l in range(spatial.layout.n_blocks):
        sp = spatial.block(l)
        W_inv = np.linalg.inv(sp.W)  # (I, Ml, Ml)
        lam = sp.Lam  # (I, N, Ml)
        blocks.append(
            hermitian(W_inv)[:, None] @ (lam[..., None] * W_inv[:, None])
        )
    return blkdiag(blocks)


def random_block_model(
    n_bins: int,
    n_frames: int,
    n_sources: int,
    n_bases: int,
    layout: BlockLayout,
    seed: int,
    spread: Optional[float] = 0.05,
) -> Tuple[NmfModel, BlockSpatialModel]:
    """A random block-diagonal FastMNMF model with sparse-ish activations.

    With ``spread`` set, source ``n`` is directional: inside every subarray
    its diagonalized SCM has one dominant entry (channel ``n mod M^(l)``)
    and the others are scaled down by ``spread``. ``spread=None`` draws all
    entries from the same distribution (diffuse sources).
    """
    rng = np.random.default_rng(seed)
    T = rng.gamma(1.0, 1.0, size=(n_bins, n_bases, n_sources))
    V = rng.gamma(0.5, 1.0, size=(n_bases, n_frames, n_sources))
    W = [
        rng.standard_normal((n_bins, m, m)) + 1j * rng.standard_normal((n_bins, m, m))
        for m in layout.sizes
    ]
    Lam = rng.gamma(1.0, 1.0, size=(n_bins, n_sources, layout.n_channels)) + 0.05
    if spread is not None:
        weight = np.full(Lam.shape[1:], spread)
        for sl, size in zip(layout.slices, layout.sizes):
            for n in range(n_sources):
                weight[n, sl.start + n % size] = 1.0
        Lam = Lam * weight
    return NmfModel(T, V), BlockSpatialModel(layout, W, Lam)
