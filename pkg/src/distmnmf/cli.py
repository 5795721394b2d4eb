"""Command-line entry point: ``simulate``, ``separate``, ``evaluate``, ``benchmark``.

Exit codes: 0 success, 2 configuration error, 3 I/O failure, 4 channel or
partition mismatch, 5 missing ground truth.
"""

import argparse
import json
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SHAPE, EXIT_TRUTH = 0, 2, 3, 4, 5
METHODS = ("full", "single", "distributed")


class ConfigError(ValueError):
    pass


class ChannelMismatch(ValueError):
    pass


class MissingGroundTruth(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    """Separation settings. Every field can come from a JSON file or a flag."""

    method: str = "distributed"
    partition: Optional[List[int]] = None
    channels: Optional[List[int]] = None
    n_sources: int = 3
    k_bases: int = 16
    iters: int = 200
    window_ms: float = 256.0
    hop_ms: float = 64.0
    floor: float = 1e-6
    seed: int = 0
    share_spectrograms: bool = True
    reference_mic: int = 0
    threads: Optional[int] = None

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")
        if (self.method == "distributed") != (self.partition is not None):
            raise ConfigError("partition: required for method=distributed and only then")
        if self.partition is not None and (
            not self.partition or any(int(p) < 1 for p in self.partition)
        ):
            raise ConfigError(f"partition: sizes must be positive, got {self.partition}")
        if self.n_sources < 1:
            raise ConfigError("n_sources: must be at least 1")
        if self.k_bases < 1:
            raise ConfigError("k_bases: must be at least 1")
        if self.iters < 0:
            raise ConfigError("iters: must be nonnegative")
        if not self.floor > 0:
            raise ConfigError("floor: must be positive")
        if not 0 < self.hop_ms <= self.window_ms:
            raise ConfigError("hop_ms: must satisfy 0 < hop_ms <= window_ms")
        if self.reference_mic < 0:
            raise ConfigError("reference_mic: must be nonnegative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown configuration field")
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError(str(err)) from err


def _parse_int_list(text: str) -> List[int]:
    try:
        return [int(p) for p in re.split(r"[,\s]+", text.strip()) if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err


def build_config(args) -> RunConfig:
    base = _load_json(args.config) if args.config else {}
    cfg = RunConfig.from_dict(base)
    for name in (
        "method", "partition", "channels", "n_sources", "k_bases", "iters", "window_ms",
        "hop_ms", "floor", "seed", "reference_mic", "threads",
    ):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.independent:
        cfg.share_spectrograms = False
    if args.method is not None and args.method != "distributed" and args.partition is None:
        cfg.partition = None
    return cfg.validate()


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> dict:
    from .mixsim import InvalidScenario, Scenario, convolve_mix, delay_rirs, dry_sources, sensor_floor
    from .stft import write_wav

    try:
        scenario = Scenario.load(args.scenario)
    except FileNotFoundError as err:
        raise OSError(str(err)) from err
    except InvalidScenario as err:
        raise ConfigError(str(err)) from err
    if args.duration <= 0:
        raise ConfigError("duration: must be positive")
    fs = scenario.sample_rate
    n_samples = int(round(args.duration * fs))
    dry = dry_sources(len(scenario.sources), n_samples, fs, args.seed)
    truth = convolve_mix(dry, delay_rirs(scenario), scenario.reference_mic)
    mixture = truth.mixture
    if scenario.noise_floor_db is not None:
        mixture = sensor_floor(mixture, scenario.noise_floor_db, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_wav(out / "mixture.wav", fs, mixture)
    image_paths = []
    for n, img in enumerate(truth.images):
        name = f"image_src{n}.wav"
        write_wav(out / name, fs, img)
        image_paths.append(name)
    manifest = {
        "mixture": "mixture.wav",
        "images": image_paths,
        "reference_mic": scenario.reference_mic,
        "sample_rate": fs,
        "n_samples": n_samples,
        "seed": args.seed,
        "noise_floor_db": scenario.noise_floor_db,
        "partition": list(scenario.layout.sizes),
        "scenario": json.loads(scenario.to_json()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# ---------------------------------------------------------------- separate


def separate_array(X: np.ndarray, cfg: RunConfig):
    """Initialize, fit and Wiener-filter ``X`` according to ``cfg``.

    Returns:
        ``(images, models, spatial, report)``.
    """
    from .distributed import fit_distributed
    from .fastmnmf import fit_full
    from .hermlin import BlockLayout
    from .initpipe import init_distributed, init_full
    from .separate import wiener_block, wiener_full

    M = X.shape[-1]
    if cfg.method == "distributed":
        layout = BlockLayout(tuple(int(p) for p in cfg.partition))
        if layout.n_channels != M:
            raise ChannelMismatch(f"partition {layout.sizes} needs {layout.n_channels} channels, input has {M}")
        init = init_distributed(
            X, layout, cfg.n_sources, cfg.k_bases, cfg.seed, shared=cfg.share_spectrograms
        )
        models, spatial, report = fit_distributed(
            X, layout, init, cfg.iters, shared=cfg.share_spectrograms, floor=cfg.floor
        )
        images = wiener_block(X, models, spatial, cfg.floor, cfg.reference_mic)
    else:
        # "single" is the same estimator run on one subarray's channels
        init = init_full(X, cfg.n_sources, cfg.k_bases, cfg.seed)
        models, spatial, report = fit_full(X, init, cfg.iters, floor=cfg.floor)
        images = wiener_full(X, models, spatial, cfg.floor, cfg.reference_mic)
    return images, models, spatial, report


def cmd_separate(args) -> dict:
    from .modelio import dump_json, save_model, write_cost_trace
    from .separate import reconstruct
    from .stft import StftConfig, read_wav, stft_forward, write_wav

    cfg = build_config(args)
    try:
        rate, audio = read_wav(args.mixture)
    except (FileNotFoundError, ValueError) as err:
        raise OSError(f"cannot read {args.mixture}: {err}") from err
    if cfg.channels is not None:
        if any(not 0 <= c < audio.shape[1] for c in cfg.channels):
            raise ChannelMismatch(f"channels {cfg.channels} outside a {audio.shape[1]}-channel input")
        audio = audio[:, cfg.channels]
    if cfg.reference_mic >= audio.shape[1]:
        raise ChannelMismatch("reference_mic exceeds the channel count")
    stft_cfg = StftConfig.from_ms(rate, cfg.window_ms, cfg.hop_ms)
    X = stft_forward(audio, stft_cfg)

    with threadpool_limits(limits=cfg.threads):
        images, models, spatial, report = separate_array(X, cfg)
    waves = reconstruct(images, stft_cfg, audio.shape[0])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.mixture).stem
    outputs = []
    for n, wave in enumerate(waves):
        name = f"{stem}_src{n}.wav"
        write_wav(out / name, rate, wave)
        outputs.append(name)
    config = asdict(cfg)
    save_model(out / "model.npz", models, spatial, config)
    dump_json(out / "model.json", models, spatial, config)
    write_cost_trace(out / "cost_trace.csv", report)
    summary = {
        "config": config,
        "outputs": outputs,
        "iterations": report.iterations,
        "final_cost": report.cost_trace[-1] if report.cost_trace else None,
        "fit_seconds": float(sum(report.wall_times)),
        "stage_seconds": report.stage_times,
    }
    (out / "fit_report.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------- evaluate


def _source_index(path: Path) -> int:
    return int(re.search(r"_src(\d+)\.wav$", path.name).group(1))


def cmd_evaluate(args) -> dict:
    from .evalkit import SDR_COLUMNS, sdr_improvement, summarize, write_csv, write_summary
    from .stft import read_wav

    manifest_path = Path(args.manifest)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as err:
        raise MissingGroundTruth(str(err)) from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{manifest_path}: invalid JSON ({err})") from err
    base = manifest_path.parent
    ref = int(manifest.get("reference_mic", 0))
    try:
        images = [read_wav(base / p)[1][:, ref] for p in manifest["images"]]
        mixture = read_wav(base / manifest["mixture"])[1][:, ref]
    except KeyError as err:
        raise MissingGroundTruth(f"manifest lacks {err}") from err
    except FileNotFoundError as err:
        raise MissingGroundTruth(str(err)) from err

    sep_dir = Path(args.separated)
    pattern = f"{args.stem}_src*.wav" if args.stem else "*_src*.wav"
    paths = sorted(sep_dir.glob(pattern), key=_source_index)
    if not paths:
        raise OSError(f"no separated files matching {pattern} in {sep_dir}")
    ests = [read_wav(p)[1][:, ref] for p in paths]
    if len(ests) != len(images):
        raise ChannelMismatch(f"{len(ests)} estimates for {len(images)} true images")

    report = sdr_improvement(mixture, np.stack(images), np.stack(ests), args.filter_len)
    out = Path(args.out or sep_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sdr_report.csv", report.rows(args.method_label, manifest.get("seed", 0)), SDR_COLUMNS)
    summary = {
        "improvement": summarize(report.improvement),
        "sdr_db": [float(v) for v in report.sdr],
        "improvement_db": [float(v) for v in report.improvement],
        "permutation": list(report.permutation),
        "filter_len": args.filter_len,
        "reference_mic": ref,
    }
    write_summary(out / "sdr_summary.json", summary)
    return summary


# ---------------------------------------------------------------- benchmark

_GRID_FIELDS = {
    "n_bins": int, "n_frames": int, "partition": list, "n_sources": int,
    "n_bases": int, "iters": int, "repeats": int, "methods": list, "seed": int,
}


def _load_grid(path: Optional[str]) -> dict:
    if path is None:
        return {}
    grid = _load_json(path)
    if not isinstance(grid, dict):
        raise ConfigError("grid: expected a JSON object")
    for key, value in grid.items():
        if key not in _GRID_FIELDS:
            raise ConfigError(f"{key}: unknown grid field")
        expected = _GRID_FIELDS[key]
        if expected is int and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if expected is list and not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
    if "methods" in grid:
        from .bench import METHODS as bench_methods

        bad = [m for m in grid["methods"] if m not in bench_methods]
        if bad:
            raise ConfigError(f"methods: unknown method {bad[0]!r}")
    return grid


def cmd_benchmark(args) -> dict:
    from .bench import LONG_DIMS, BenchDims, METHODS as BENCH_METHODS, bench_methods, write_results

    grid = _load_grid(args.grid)
    base = LONG_DIMS if args.long else BenchDims()
    try:
        dims = BenchDims(
            n_bins=grid.get("n_bins", base.n_bins),
            n_frames=grid.get("n_frames", base.n_frames),
            partition=tuple(grid.get("partition", base.partition)),
            n_sources=grid.get("n_sources", base.n_sources),
            n_bases=grid.get("n_bases", base.n_bases),
            iters=args.iters if args.iters is not None else grid.get("iters", base.iters),
        )
    except (ValueError, TypeError) as err:
        raise ConfigError(f"grid: {err}") from err
    repeats = args.repeats if args.repeats is not None else grid.get("repeats", 3)
    if repeats < 1:
        raise ConfigError("repeats: must be at least 1")
    methods = grid.get("methods", list(BENCH_METHODS))
    results = bench_methods(
        dims, repeats=repeats, seed=grid.get("seed", args.seed), methods=methods,
        threads=args.threads,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    by_name = {r.method: r for r in results}
    ordering = sorted(by_name, key=lambda m: by_name[m].mean)
    extra = {"ordering": ordering}
    if "distributed" in by_name and "full" in by_name:
        extra["distributed_over_full"] = by_name["distributed"].mean / by_name["full"].mean
    write_results(args.out, results, extra)
    return {"results": [r.to_dict() for r in results], **extra}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distmnmf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a scenario to WAV files and a manifest")
    s.add_argument("scenario", help="scenario JSON file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=4.0, help="seconds")

    s = sub.add_parser("separate", help="separate a multichannel mixture")
    s.add_argument("mixture", help="multichannel WAV file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="RunConfig JSON; flags override its values")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--partition", type=_parse_int_list, help="subarray sizes, e.g. 4,4,4")
    s.add_argument("--channels", type=_parse_int_list, help="input channels to use")
    s.add_argument("--n-sources", dest="n_sources", type=int)
    s.add_argument("--k-bases", dest="k_bases", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--window-ms", dest="window_ms", type=float)
    s.add_argument("--hop-ms", dest="hop_ms", type=float)
    s.add_argument("--floor", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--reference-mic", dest="reference_mic", type=int)
    s.add_argument("--independent", action="store_true",
                   help="per-subarray spectrograms (distributed only)")
    s.add_argument("--threads", type=int)

    s = sub.add_parser("evaluate", help="score separated files against the ground truth")
    s.add_argument("manifest", help="manifest.json written by simulate")
    s.add_argument("separated", help="directory holding <stem>_src<n>.wav files")
    s.add_argument("--stem", help="only use files named <stem>_src<n>.wav")
    s.add_argument("--filter-len", dest="filter_len", type=int, default=512)
    s.add_argument("--out", help="report directory (default: the separated directory)")
    s.add_argument("--method-label", dest="method_label", default="separated")

    s = sub.add_parser("benchmark", help="time the three estimators on matched data")
    s.add_argument("--grid", help="grid JSON overriding the default dimensions")
    s.add_argument("--out", default="bench", help="output path stem (.json and .csv)")
    s.add_argument("--repeats", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--long", action="store_true", help="2049-bin reference dimensions")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ChannelMismatch as err:
        print(f"channel mismatch: {err}", file=sys.stderr)
        return EXIT_SHAPE
    except MissingGroundTruth as err:
        print(f"missing ground truth: {err}", file=sys.stderr)
        return EXIT_TRUTH
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    if args.command == "benchmark":
        for r in result["results"]:
            print(f"{r['method']:>12s}: {r['mean']:.3f} +/- {r['se']:.3f} s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
