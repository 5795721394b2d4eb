"""Versioned model containers, JSON debug dumps and cost-trace CSVs.

Format 1 stores a full-array (or single-subarray) model. Format 2 adds the
subarray layout and the spectrogram share mode of the distributed model; in
independent mode each subarray's NMF factors are stored under ``T_<l>`` and
``V_<l>``.
"""

import hashlib
import json
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .distributed import BlockSpatialModel
from .evalkit import write_csv
from .fastmnmf import FitReport, NmfModel, SpatialModel
from .hermlin import BlockLayout

FORMAT_FULL = 1
FORMAT_BLOCK = 2
COST_COLUMNS = ("iteration", "cost", "wall_seconds")


class UnsupportedFormat(ValueError):
    pass


def _config_blob(config: Optional[dict]) -> np.ndarray:
    return np.frombuffer(json.dumps(config or {}, sort_keys=True).encode(), dtype=np.uint8)


def save_model(
    path,
    models: Union[NmfModel, List[NmfModel]],
    spatial: Union[SpatialModel, BlockSpatialModel],
    config: Optional[dict] = None,
) -> None:
    """Write an ``.npz`` container for either model family."""
    arrays = {"config": _config_blob(config)}
    if isinstance(spatial, BlockSpatialModel):
        arrays["format_version"] = np.array(FORMAT_BLOCK)
        arrays["partition"] = np.array(spatial.layout.sizes)
        arrays["Lam"] = spatial.Lam
        for l, w in enumerate(spatial.W):
            arrays[f"W_{l}"] = w
        shared = isinstance(models, NmfModel)
        arrays["shared"] = np.array(shared)
        if shared:
            arrays["T"], arrays["V"] = models.T, models.V
        else:
            for l, m in enumerate(models):
                arrays[f"T_{l}"], arrays[f"V_{l}"] = m.T, m.V
    else:
        if not isinstance(models, NmfModel):
            raise TypeError("a full-array model has exactly one NMF model")
        arrays["format_version"] = np.array(FORMAT_FULL)
        arrays.update(T=models.T, V=models.V, W=spatial.W, Lam=spatial.Lam)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_model(path):
    """Read a container written by :func:`save_model`.

    Returns:
        ``(models, spatial, config)`` with the same types that were saved.
    """
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        config = json.loads(bytes(z["config"]).decode() or "{}")
        if version == FORMAT_FULL:
            return NmfModel(z["T"], z["V"]), SpatialModel(z["W"], z["Lam"]), config
        if version != FORMAT_BLOCK:
            raise UnsupportedFormat(f"model format {version} is not supported")
        layout = BlockLayout(tuple(int(s) for s in z["partition"]))
        spatial = BlockSpatialModel(
            layout, [z[f"W_{l}"] for l in range(layout.n_blocks)], z["Lam"]
        )
        if bool(z["shared"]):
            models = NmfModel(z["T"], z["V"])
        else:
            models = [NmfModel(z[f"T_{l}"], z[f"V_{l}"]) for l in range(layout.n_blocks)]
        return models, spatial, config


def _describe(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    mag = np.abs(a)
    return {
        "shape": list(a.shape),
        "dtype": str(a.dtype),
        "abs_min": float(mag.min()) if a.size else None,
        "abs_max": float(mag.max()) if a.size else None,
        "sha256": hashlib.sha256(a.tobytes()).hexdigest(),
    }


def dump_json(path, models, spatial, config: Optional[dict] = None) -> None:
    """Human-readable summary: shapes, ranges and content hashes of every array."""
    if isinstance(models, NmfModel):
        nmf = {"T": _describe(models.T), "V": _describe(models.V)}
    else:
        nmf = [{"T": _describe(m.T), "V": _describe(m.V)} for m in models]
    if isinstance(spatial, BlockSpatialModel):
        sp = {
            "format_version": FORMAT_BLOCK,
            "partition": list(spatial.layout.sizes),
            "shared": isinstance(models, NmfModel),
            "W": [_describe(w) for w in spatial.W],
            "Lam": _describe(spatial.Lam),
        }
    else:
        sp = {"format_version": FORMAT_FULL, "W": _describe(spatial.W),
              "Lam": _describe(spatial.Lam)}
    doc = {"nmf": nmf, "spatial": sp, "config": config or {}}
    Path(path).write_text(json.dumps(doc, indent=2))


def write_cost_trace(path, report: FitReport) -> None:
    """CSV of the cost after each sweep; row 0 is the starting point."""
    cumulative = np.concatenate([[0.0], np.cumsum(report.wall_times)])
    rows = []
    for it, cost in enumerate(report.cost_trace):
        rows.append({
            "iteration": it,
            "cost": cost,
            "wall_seconds": float(cumulative[min(it, len(cumulative) - 1)]),
        })
    write_csv(path, rows, COST_COLUMNS)
