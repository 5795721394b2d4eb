"""SDR scoring with an allowed FIR distortion filter, and run tracing."""

import csv
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.optimize
import scipy.signal

FILTER_LEN = 512
_LOADING = 1e-10


class DegenerateReference(ValueError):
    pass


class _Projector:
    """Least-squares projection onto FIR-filtered copies of one reference."""

    def __init__(self, reference: np.ndarray, filter_len: int):
        reference = np.asarray(reference, dtype=float)
        if not np.any(reference):
            raise DegenerateReference("reference signal is all zero")
        if len(reference) < 4 * filter_len:
            raise ValueError(
                f"signals need at least {4 * filter_len} samples, got {len(reference)}"
            )
        self.reference = reference
        self.filter_len = filter_len
        self.n_fft = scipy.fft.next_fast_len(2 * len(reference))
        self.spec = scipy.fft.rfft(reference, self.n_fft)
        acf = scipy.fft.irfft(np.abs(self.spec) ** 2, self.n_fft)[:filter_len]
        acf[0] *= 1.0 + _LOADING
        self.acf = acf

    def project(self, estimate: np.ndarray) -> np.ndarray:
        estimate = np.asarray(estimate, dtype=float)
        if estimate.shape != self.reference.shape:
            raise ValueError("reference and estimate lengths differ")
        xcorr = scipy.fft.irfft(
            self.spec.conj() * scipy.fft.rfft(estimate, self.n_fft), self.n_fft
        )[: self.filter_len]
        coef = scipy.linalg.solve_toeplitz(self.acf, xcorr)
        return scipy.signal.fftconvolve(self.reference, coef)[: len(estimate)]

    def sdr(self, estimate: np.ndarray) -> float:
        proj = self.project(estimate)
        err = np.asarray(estimate, dtype=float) - proj
        p = float(np.dot(proj, proj))
        e = float(np.dot(err, err))
        return 10.0 * math.log10(p / max(e, 1e-30 * p)) if p > 0 else -math.inf


def sdr(reference: np.ndarray, estimate: np.ndarray, filter_len: int = FILTER_LEN) -> float:
    """Source-to-distortion ratio in dB.

    The estimate is projected by least squares onto the span of the reference
    convolved with any causal FIR filter of ``filter_len`` taps (Toeplitz
    normal equations, relative diagonal loading 1e-10); everything outside
    that span counts as distortion.
    """
    return _Projector(reference, filter_len).sdr(estimate)


def sdr_matrix(refs: np.ndarray, ests: np.ndarray, filter_len: int = FILTER_LEN) -> np.ndarray:
    """``S[n, p] = sdr(refs[n], ests[p])``."""
    out = np.empty((len(refs), len(ests)))
    for n, ref in enumerate(refs):
        proj = _Projector(ref, filter_len)
        for p, est in enumerate(ests):
            out[n, p] = proj.sdr(est)
    return out


def best_permutation(score: np.ndarray) -> Tuple[int, ...]:
    """Assignment ``perm`` maximizing ``sum_n score[n, perm[n]]``.

    Exhaustive for up to six sources, taking the lexicographically smallest
    permutation among ties; the Hungarian algorithm beyond that.
    """
    n = score.shape[0]
    if n <= 6:
        best, best_val = None, -math.inf
        for perm in itertools.permutations(range(n)):
            val = score[np.arange(n), perm].sum()
            if val > best_val:
                best, best_val = perm, val
        return tuple(int(p) for p in best)
    rows, cols = scipy.optimize.linear_sum_assignment(score, maximize=True)
    return tuple(int(c) for c in cols[np.argsort(rows)])


@dataclass
class SdrReport:
    sdr: np.ndarray
    permutation: Tuple[int, ...]
    mixture_sdr: Optional[np.ndarray] = None

    @property
    def improvement(self) -> Optional[np.ndarray]:
        if self.mixture_sdr is None:
            return None
        return self.sdr - self.mixture_sdr

    @property
    def mean_improvement(self) -> float:
        return float(np.mean(self.improvement))

    def rows(self, method: str, seed: int) -> List[dict]:
        imp = self.improvement
        return [
            {
                "method": method,
                "seed": seed,
                "source": n,
                "sdr_db": float(self.sdr[n]),
                "improvement_db": float(imp[n]) if imp is not None else float("nan"),
                "permutation": " ".join(str(p) for p in self.permutation),
            }
            for n in range(len(self.sdr))
        ]


def sdr_permuted(refs: np.ndarray, ests: np.ndarray, filter_len: int = FILTER_LEN) -> SdrReport:
    """SDR of each reference against its assigned estimate under the max-sum permutation."""
    refs, ests = np.atleast_2d(refs), np.atleast_2d(ests)
    if refs.shape[0] != ests.shape[0]:
        raise ValueError("number of references and estimates differ")
    S = sdr_matrix(refs, ests, filter_len)
    perm = best_permutation(S)
    return SdrReport(S[np.arange(len(perm)), perm], perm)


def sdr_improvement(
    mixture: np.ndarray,
    true_images: np.ndarray,
    est_images: np.ndarray,
    filter_len: int = FILTER_LEN,
) -> SdrReport:
    """SDR of the separated signals minus SDR of the unprocessed mixture.

    All signals are single-channel at the reference microphone; the
    images have shape ``(N, n_samples)``.
    """
    true_images, est_images = np.atleast_2d(true_images), np.atleast_2d(est_images)
    report = sdr_permuted(true_images, est_images, filter_len)
    report.mixture_sdr = np.array([sdr(ref, mixture, filter_len) for ref in true_images])
    return report


class PausableClock:
    def __init__(self):
        self.elapsed = 0.0
        self._start = None

    def start(self):
        self._start = time.perf_counter()

    def pause(self):
        self.elapsed += time.perf_counter() - self._start
        self._start = None

    def read(self) -> float:
        if self._start is None:
            return self.elapsed
        return self.elapsed + time.perf_counter() - self._start


def trace_run(
    estimator: Callable[[Callable], object],
    cost_fn: Optional[Callable[[object, object], float]] = None,
    sdr_fn: Optional[Callable[[object, object], float]] = None,
    eval_every: Optional[int] = None,
) -> Tuple[object, List[dict]]:
    """Run an estimator and trace cost and SDR improvement against work time.

    ``estimator`` receives a callback ``cb(iteration, models, spatial)`` that
    it must call after every sweep. The clock is paused while the callback
    evaluates, so ``cumulative_seconds`` counts estimation work only.
    ``eval_every=None`` disables SDR evaluation.
    """
    clock = PausableClock()
    rows: List[dict] = []

    def callback(iteration, models, spatial):
        clock.pause()
        seconds = clock.elapsed
        cost = cost_fn(models, spatial) if cost_fn is not None else float("nan")
        score = float("nan")
        if sdr_fn is not None and eval_every and iteration % eval_every == 0:
            score = sdr_fn(models, spatial)
        rows.append(
            {
                "iteration": iteration,
                "cumulative_seconds": seconds,
                "cost": cost,
                "mean_sdr_improvement": score,
            }
        )
        clock.start()

    clock.start()
    result = estimator(callback)
    clock.pause()
    return result, rows


def write_csv(path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None):
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


SDR_COLUMNS = ("method", "seed", "source", "sdr_db", "improvement_db", "permutation")
TRACE_COLUMNS = ("iteration", "cumulative_seconds", "cost", "mean_sdr_improvement")


def summarize(values: Iterable[float]) -> Dict[str, float]:
    """Mean, median and standard error of per-trial values."""
    v = np.asarray(list(values), dtype=float)
    se = float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return {
        "n": int(len(v)),
        "mean": float(np.mean(v)),
        "median": float(np.median(v)),
        "se": se,
    }


def write_summary(path, summary: dict):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))
