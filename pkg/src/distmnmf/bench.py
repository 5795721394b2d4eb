"""Runtime benchmarks: method ordering and per-stage complexity scaling.

All timings run the production estimators (no benchmark-only kernels) under a
single BLAS thread. Stage names map onto the scoped timers inside the
estimator engine: ``ip`` is the demixing update, ``mm`` the multiplicative
updates, ``eta`` the model-power refreshes and ``decorrelate`` the ``|W^H x|^2``
computation.
"""

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .distributed import fit_distributed, fit_single
from .fastmnmf import InitBundle, fit_full
from .hermlin import BlockLayout

STAGES = ("ip", "mm", "eta", "decorrelate")
METHODS = ("single", "distributed", "full")


class InsufficientGrid(ValueError):
    pass


@dataclass(frozen=True)
class BenchDims:
    n_bins: int = 257
    n_frames: int = 150
    partition: Tuple[int, ...] = (4, 4, 4)
    n_sources: int = 3
    n_bases: int = 16
    iters: int = 200

    def __post_init__(self):
        for name in ("n_bins", "n_frames", "n_sources", "n_bases"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")
        BlockLayout(tuple(self.partition))

    @property
    def layout(self) -> BlockLayout:
        return BlockLayout(tuple(self.partition))


LONG_DIMS = BenchDims(n_bins=2049, n_frames=157)


@dataclass
class BenchResult:
    method: str
    dims: Dict[str, object]
    iterations: int
    totals: List[float] = field(default_factory=list)
    stages: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def repeats(self) -> int:
        return len(self.totals)

    @property
    def mean(self) -> float:
        return float(np.mean(self.totals))

    @property
    def se(self) -> float:
        if self.repeats < 2:
            return 0.0
        return float(np.std(self.totals, ddof=1) / np.sqrt(self.repeats))

    @property
    def min(self) -> float:
        return float(np.min(self.totals))

    @property
    def max(self) -> float:
        return float(np.max(self.totals))

    def stage_mean(self, name: str) -> float:
        return float(np.mean(self.stages.get(name, [0.0])))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dims": self.dims,
            "iterations": self.iterations,
            "repeats": self.repeats,
            "totals": list(self.totals),
            "mean": self.mean,
            "se": self.se,
            "min": self.min,
            "max": self.max,
            "stage_means": {s: self.stage_mean(s) for s in STAGES},
        }


def random_problem(
    n_bins: int, n_frames: int, layout: BlockLayout, n_sources: int, n_bases: int, seed: int
) -> Tuple[np.ndarray, InitBundle]:
    """Matched synthetic observations and a fixed random starting point.

    Runtime does not depend on the data values, so the benchmark uses white
    complex Gaussian observations and a random positive NMF start with
    identity demixers. The same bundle serves every method.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    M = layout.n_channels
    X = (rng.standard_normal((n_bins, n_frames, M))
         + 1j * rng.standard_normal((n_bins, n_frames, M))) / np.sqrt(2)
    T0 = rng.uniform(0.5, 1.5, (n_bins, n_bases, n_sources))
    V0 = rng.uniform(0.5, 1.5, (n_bases, n_frames, n_sources))
    Lam0 = rng.uniform(0.5, 1.5, (n_bins, n_sources, M))
    W0 = [np.tile(np.eye(m, dtype=complex), (n_bins, 1, 1)) for m in layout.sizes]
    return X, InitBundle(T0, V0, W0, Lam0, layout)


def _restrict(init: InitBundle, l: int) -> InitBundle:
    sl = init.layout.slices[l]
    return InitBundle(
        init.T0, init.V0, [init.W0[l]], init.Lam0[:, :, sl],
        BlockLayout.single(init.layout.sizes[l]),
    )


def _full_bundle(init: InitBundle) -> InitBundle:
    return InitBundle(
        init.T0, init.V0, [init.full_W0], init.Lam0,
        BlockLayout.single(init.layout.n_channels),
    )


def run_method(method: str, X: np.ndarray, init: InitBundle, iters: int):
    """Fit with one method; returns its :class:`FitReport`."""
    layout = init.layout
    if method == "full":
        return fit_full(X, _full_bundle(init), iters, record_cost=False)[2]
    if method == "single":
        x = layout.split(X)[0]
        return fit_single(x, _restrict(init, 0), iters, record_cost=False)[2]
    if method == "distributed":
        return fit_distributed(X, layout, init, iters, record_cost=False)[2]
    raise ValueError(f"unknown method {method!r}")


def _time_method(method, X, init, iters) -> Tuple[float, Dict[str, float]]:
    t0 = time.perf_counter()
    report = run_method(method, X, init, iters)
    return time.perf_counter() - t0, report.stage_times


def bench_methods(
    dims: BenchDims = BenchDims(),
    repeats: int = 3,
    seed: int = 0,
    methods: Sequence[str] = METHODS,
    threads: Optional[int] = 1,
) -> List[BenchResult]:
    """Total fit time per method on matched data.

    Every method gets one warm-up iteration that is not timed. Repeats are
    interleaved across methods so slow drift in machine load hits all of
    them alike.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    X, init = random_problem(
        dims.n_bins, dims.n_frames, dims.layout, dims.n_sources, dims.n_bases, seed
    )
    dim_record = {
        "I": dims.n_bins, "J": dims.n_frames, "M": dims.layout.n_channels,
        "N": dims.n_sources, "K": dims.n_bases, "layout": list(dims.partition),
    }
    results = {m: BenchResult(m, dict(dim_record), dims.iters) for m in methods}
    with threadpool_limits(limits=threads):
        for m in methods:
            run_method(m, X, init, 1)
        for _ in range(repeats):
            for m in methods:
                total, stages = _time_method(m, X, init, dims.iters)
                res = results[m]
                res.totals.append(total)
                for s in STAGES:
                    res.stages.setdefault(s, []).append(stages.get(s, 0.0))
    return [results[m] for m in methods]


@dataclass
class ScalingTable:
    kind: str
    xs: List[int]
    stage_seconds: Dict[str, List[float]]
    slope: float
    intercept: float
    residual: float

    def to_dict(self) -> dict:
        return asdict(self)


def fit_loglog(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares line through ``(log x, log y)``; returns slope, intercept, RMS residual."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ np.array([slope, intercept])
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid**2)))


def bench_scaling(
    kind: str,
    grid: Sequence[int],
    n_bins: int = 129,
    n_frames: int = 150,
    n_sources: int = 3,
    n_bases: int = 4,
    block_size: int = 4,
    iters: int = 3,
    repeats: int = 3,
    seed: int = 0,
    threads: Optional[int] = 1,
) -> ScalingTable:
    """Per-iteration stage times along a size grid, with a log-log slope fit.

    ``kind="full"``: ``grid`` lists total channel counts ``M`` for the
    full-array estimator. ``kind="distributed"``: ``grid`` lists subarray
    counts ``L`` at fixed ``block_size``. The slope is fitted to the
    demixing-update (``ip``) stage; the best of ``repeats`` runs is kept per
    grid point.
    """
    grid = sorted(int(g) for g in grid)
    if len(set(grid)) < 4:
        raise InsufficientGrid(f"need at least 4 distinct grid values, got {grid}")
    if kind not in ("full", "distributed"):
        raise ValueError(f"unknown scaling kind {kind!r}")
    stage_seconds: Dict[str, List[float]] = {s: [] for s in STAGES}
    with threadpool_limits(limits=threads):
        for g in grid:
            layout = (BlockLayout.single(g) if kind == "full"
                      else BlockLayout((block_size,) * g))
            X, init = random_problem(n_bins, n_frames, layout, n_sources, n_bases, seed)
            method = "full" if kind == "full" else "distributed"
            run_method(method, X, init, 1)
            best: Dict[str, float] = {}
            for _ in range(repeats):
                _, stages = _time_method(method, X, init, iters)
                for s in STAGES:
                    v = stages.get(s, 0.0) / max(iters, 1)
                    best[s] = min(best.get(s, np.inf), v)
            for s in STAGES:
                stage_seconds[s].append(best[s])
    slope, intercept, residual = fit_loglog(grid, stage_seconds["ip"])
    return ScalingTable(kind, grid, stage_seconds, slope, intercept, residual)


def environment() -> dict:
    """Machine and library metadata for result headers."""
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "blas": [
            {k: info.get(k) for k in ("internal_api", "version", "num_threads")}
            for info in threadpool_info()
        ],
    }


def write_results(path_stem, results: Sequence[BenchResult], extra: Optional[dict] = None):
    """Write ``<stem>.json`` (with environment header) and ``<stem>.csv``."""
    from .evalkit import write_csv

    payload = {"environment": environment(), "results": [r.to_dict() for r in results]}
    if extra:
        payload.update(extra)
    with open(f"{path_stem}.json", "w") as f:
        json.dump(payload, f, indent=2)
    rows = [
        {
            "method": r.method, "repeats": r.repeats, "iterations": r.iterations,
            "mean_seconds": r.mean, "se_seconds": r.se, "min_seconds": r.min,
            "max_seconds": r.max,
            **{f"{s}_seconds": r.stage_mean(s) for s in STAGES},
        }
        for r in results
    ]
    write_csv(f"{path_stem}.csv", rows)
