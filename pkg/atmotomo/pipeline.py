"""
Experiment pipeline: simulate -> forward -> reconstruct -> evaluate.

Every stage reads and writes the artifact directory below, so the CLI can
run stages one at a time or all at once:

    screens/layer_<l>.atgr          simulated turbulence, one grid per layer
    wavefronts/star_<g>.atgr        simulated wavefront data, one grid per star
    reconstructions/layer_<l>.atgr  reconstructed layers
    report.csv                      per direction: theta_x_arcsec, theta_y_arcsec,
                                    separation_arcsec, residual_rms, strehl
    layer_errors.csv                layer, height_m, weight, relative_error
    manifest.json                   full config, config hash, code version,
                                    seed, Strehl model, per-stage timings

Grid files depend only on (config, seed), so reruns are byte-identical.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ExperimentConfig, SolverKind
from .core import (
    ArtifactError,
    ConfigError,
    DomainMismatchError,
    FileReadError,
    SystemGeometry,
    require_extent,
)
from .forward import LayerStack, WavefrontSet, apply_forward
from .frame import gradient_solve, iterative_fd
from .metrics import STREHL_MODEL, QualityReport, evaluate
from .storage import LockedFile, read_csv, read_grid, write_csv, write_grid
from .svtd import (
    CACHE_DIR_ENV,
    FilterKind,
    SvtdCache,
    load_or_build_cache,
    picard_diagnostic,
    reconstruct,
    wellposedness_scan,
)
from .turbulence import ScreenSet, generate_screens
from .version import __version__

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

SCREENS_DIR = "screens"
WAVEFRONTS_DIR = "wavefronts"
RECONSTRUCTIONS_DIR = "reconstructions"
REPORT_FILE = "report.csv"
LAYER_ERRORS_FILE = "layer_errors.csv"
MANIFEST_FILE = "manifest.json"
PLOT_DIRECTIONS_FILE = "plot_directions.csv"
PLOT_LAYERS_FILE = "plot_layers.csv"

REPORT_COLUMNS = ("theta_x_arcsec", "theta_y_arcsec", "separation_arcsec", "residual_rms", "strehl")
LAYER_COLUMNS = ("layer", "height_m", "weight", "relative_error")

#: Spawn key of the measurement-noise stream; layer screens use keys 0..L-1.
NOISE_STREAM = 1000

SWEEP_PARAMETERS = ("alpha", "iterations")


@dataclass(frozen=True, eq=False)
class Reconstruction:
    stack: LayerStack
    solver: SolverKind
    residuals: Tuple[float, ...] = ()
    iterations: int = 0
    cache_key: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "solver": self.solver.value,
            "iterations": self.iterations,
            "residuals": list(self.residuals),
            "cache_key": self.cache_key,
        }


@dataclass(frozen=True, eq=False)
class PipelineResult:
    out_dir: Path
    screens: ScreenSet
    waves: WavefrontSet
    reconstruction: Reconstruction
    report: QualityReport
    manifest: Dict[str, Any]


@dataclass(frozen=True)
class SweepResult:
    parameter: str
    values: Tuple[float, ...]
    table: Path
    runs: Tuple[Path, ...]


def resolve_out_dir(config: ExperimentConfig, out_dir: Optional[PathLike] = None) -> Path:
    return Path(out_dir if out_dir is not None else config.output_dir)


def resolve_pipeline_cache_dir(out_dir: Path, cache_dir: Optional[PathLike] = None) -> Path:
    """Explicit directory, then ``ATMOTOMO_CACHE_DIR``, then ``<out>/cache``."""
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_DIR_ENV)
    return Path(env) if env else out_dir / "cache"


def prepare_geometry(config: ExperimentConfig) -> SystemGeometry:
    """Build the geometry and fail fast on extent violations."""
    geometry = config.build_geometry()
    require_extent(geometry)
    return geometry


# -- artifacts ---------------------------------------------------------------

def write_stack(directory: PathLike, stack: LayerStack) -> List[Path]:
    directory = Path(directory)
    return [write_grid(directory / f"layer_{l}.atgr", f) for l, f in enumerate(stack)]


def read_stack(directory: PathLike, geometry: SystemGeometry, n: int) -> LayerStack:
    directory = Path(directory)
    fields = []
    for l in range(geometry.n_layers):
        path = directory / f"layer_{l}.atgr"
        if not path.exists():
            raise ArtifactError(f"Missing artifact '{path}'")
        fields.append(read_grid(path))
    try:
        stack = LayerStack(geometry, tuple(fields))
    except DomainMismatchError as e:
        raise ArtifactError(f"Artifacts in '{directory}' do not match the configured geometry: {e}") from e
    if stack.n != n:
        raise ArtifactError(f"Artifacts in '{directory}' use n={stack.n}, config has n={n}")
    return stack


def write_waves(directory: PathLike, waves: WavefrontSet) -> List[Path]:
    directory = Path(directory)
    return [write_grid(directory / f"star_{g}.atgr", f) for g, f in enumerate(waves)]


def read_waves(directory: PathLike, geometry: SystemGeometry, n: int) -> WavefrontSet:
    directory = Path(directory)
    arrays = []
    for g in range(geometry.n_stars):
        path = directory / f"star_{g}.atgr"
        if not path.exists():
            raise ArtifactError(f"Missing artifact '{path}'")
        field = read_grid(path)
        if field.grid != geometry.aperture_grid(n):
            raise ArtifactError(f"'{path}' does not lie on the configured aperture grid")
        arrays.append(field.values)
    return WavefrontSet.from_arrays(geometry, arrays)


def write_report(out_dir: PathLike, report: QualityReport, geometry: SystemGeometry) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    rows = [
        (x, y, math.hypot(x, y), rms, strehl)
        for (x, y), rms, strehl in zip(report.directions_arcsec, report.residual_rms, report.strehl)
    ]
    report_path = write_csv(out_dir / REPORT_FILE, REPORT_COLUMNS, rows)
    layer_rows = [
        (l, layer.height, layer.weight, error)
        for l, (layer, error) in enumerate(zip(geometry.layers, report.layer_errors))
    ]
    layers_path = write_csv(out_dir / LAYER_ERRORS_FILE, LAYER_COLUMNS, layer_rows)
    return report_path, layers_path


def update_manifest(out_dir: PathLike, config: ExperimentConfig, stage: str, info: Dict[str, Any],
                    fresh: bool = False) -> Dict[str, Any]:
    """
    Merge one stage record into ``manifest.json`` under its lock.

    ``fresh`` discards any earlier manifest, so stage records of an older run
    in the same directory do not survive a new simulation.
    """
    manifest_file = LockedFile(Path(out_dir) / MANIFEST_FILE)
    with manifest_file:
        manifest = {} if fresh else manifest_file.read() or {}
        manifest.update({
            "config": config.to_dict(),
            "config_hash": config.content_hash(),
            "code_version": __version__,
            "seed": config.seed,
            "strehl_model": STREHL_MODEL,
        })
        manifest.setdefault("stages", {})[stage] = info
        manifest_file.write(manifest)
    return manifest


# -- stages ------------------------------------------------------------------

def simulate_stage(config: ExperimentConfig, geometry: Optional[SystemGeometry] = None) -> ScreenSet:
    geometry = prepare_geometry(config) if geometry is None else geometry
    return generate_screens(config.turbulence_params(), geometry, config.grid.n, config.threads)


def add_noise(waves: WavefrontSet, level: float, seed: int) -> WavefrontSet:
    """Gaussian noise with standard deviation ``level`` times the data rms over the aperture."""
    if level <= 0.0:
        return waves
    data = waves.as_array()
    samples = data[:, waves.mask]
    rms = float(np.sqrt(np.mean(samples ** 2))) if samples.size else 0.0
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(NOISE_STREAM,)))
    noisy = data + level * rms * rng.standard_normal(data.shape)
    logger.info("Added measurement noise (level %.3g, sigma %.4g)", level, level * rms)
    return WavefrontSet.from_arrays(waves.geometry, list(noisy), waves.mask)


def forward_stage(config: ExperimentConfig, truth: LayerStack) -> WavefrontSet:
    waves = apply_forward(truth, truth.geometry, config.threads)
    return add_noise(waves, config.noise_level, config.seed)


def reconstruct_stage(config: ExperimentConfig, waves: WavefrontSet, cache_dir: Optional[PathLike] = None,
                      cache: Optional[SvtdCache] = None) -> Reconstruction:
    """
    Run the configured solver.

    SVTD reuses ``cache`` when given, otherwise the cache file in
    ``cache_dir`` (built on first use).
    """
    solver = config.solver
    geometry = waves.geometry
    if solver.kind is SolverKind.SVTD:
        geometry.require_single_kind("SVTD reconstruction")
        if cache is None:
            cache = load_or_build_cache(geometry, solver.sobolev_order, waves.n, cache_dir)
        stack = reconstruct(waves, cache, solver.filter.spec(), config.threads)
        return Reconstruction(stack, solver.kind, cache_key=cache.key)
    solve = gradient_solve if solver.kind is SolverKind.GRADIENT else iterative_fd
    result = solve(waves, geometry, solver.options(config.threads))
    return Reconstruction(result.stack, solver.kind, result.residuals, result.iterations)


def evaluate_stage(config: ExperimentConfig, recon: LayerStack, truth: LayerStack) -> QualityReport:
    evaluation = config.evaluation
    return evaluate(recon, truth, evaluation.grid(), remove_piston=evaluation.remove_piston, threads=config.threads)


# -- stage commands over an artifact directory -------------------------------

def _timed(func, *args, **kwargs):
    start = time.perf_counter()
    value = func(*args, **kwargs)
    return value, time.perf_counter() - start


def run_simulate(config: ExperimentConfig, out_dir: Optional[PathLike] = None) -> ScreenSet:
    out = resolve_out_dir(config, out_dir)
    screens, seconds = _timed(simulate_stage, config)
    write_stack(out / SCREENS_DIR, screens.stack)
    update_manifest(out, config, "simulate", {"seconds": seconds, "layer_variances": screens.layer_variances()},
                    fresh=True)
    return screens


def run_forward(config: ExperimentConfig, out_dir: Optional[PathLike] = None) -> WavefrontSet:
    out = resolve_out_dir(config, out_dir)
    geometry = prepare_geometry(config)
    truth = read_stack(out / SCREENS_DIR, geometry, config.grid.n)
    waves, seconds = _timed(forward_stage, config, truth)
    write_waves(out / WAVEFRONTS_DIR, waves)
    update_manifest(out, config, "forward", {"seconds": seconds, "noise_level": config.noise_level})
    return waves


def run_reconstruct(config: ExperimentConfig, out_dir: Optional[PathLike] = None,
                    cache_dir: Optional[PathLike] = None) -> Reconstruction:
    out = resolve_out_dir(config, out_dir)
    geometry = prepare_geometry(config)
    waves = read_waves(out / WAVEFRONTS_DIR, geometry, config.grid.n)
    cache_dir = resolve_pipeline_cache_dir(out, cache_dir)
    result, seconds = _timed(reconstruct_stage, config, waves, cache_dir)
    write_stack(out / RECONSTRUCTIONS_DIR, result.stack)
    update_manifest(out, config, "reconstruct", {"seconds": seconds, **result.to_dict()})
    return result


def run_evaluate(config: ExperimentConfig, out_dir: Optional[PathLike] = None) -> QualityReport:
    out = resolve_out_dir(config, out_dir)
    geometry = prepare_geometry(config)
    truth = read_stack(out / SCREENS_DIR, geometry, config.grid.n)
    recon = read_stack(out / RECONSTRUCTIONS_DIR, geometry, config.grid.n)
    report, seconds = _timed(evaluate_stage, config, recon, truth)
    write_report(out, report, geometry)
    update_manifest(out, config, "evaluate", {"seconds": seconds, **report.to_dict()})
    return report


def run_pipeline(config: ExperimentConfig, out_dir: Optional[PathLike] = None, cache_dir: Optional[PathLike] = None,
                 screens: Optional[ScreenSet] = None, cache: Optional[SvtdCache] = None) -> PipelineResult:
    """
    Run all four stages and write the complete artifact directory.

    ``screens`` and ``cache`` let a sweep reuse the simulated turbulence and
    the SVD cache across runs.

    Raises:
        ConfigError / GeometryError: invalid config or geometry; ExtentError
            lists the violating (layer, star) pairs before any work is done.
        NumericalError: non-finite values or a diverging solver.
    """
    out = resolve_out_dir(config, out_dir)
    geometry = prepare_geometry(config)
    logger.info("Running pipeline '%s' (seed %d) into %s", config.name, config.seed, out)
    reused = screens is not None
    if reused:
        seconds = 0.0
    else:
        screens, seconds = _timed(simulate_stage, config, geometry)
    write_stack(out / SCREENS_DIR, screens.stack)
    update_manifest(out, config, "simulate", {"seconds": seconds, "layer_variances": screens.layer_variances(),
                                              "reused": reused}, fresh=True)

    waves, seconds = _timed(forward_stage, config, screens.stack)
    write_waves(out / WAVEFRONTS_DIR, waves)
    update_manifest(out, config, "forward", {"seconds": seconds, "noise_level": config.noise_level})

    cache_dir = resolve_pipeline_cache_dir(out, cache_dir)
    recon, seconds = _timed(reconstruct_stage, config, waves, cache_dir, cache)
    write_stack(out / RECONSTRUCTIONS_DIR, recon.stack)
    update_manifest(out, config, "reconstruct", {"seconds": seconds, **recon.to_dict()})

    report, seconds = _timed(evaluate_stage, config, recon.stack, screens.stack)
    write_report(out, report, geometry)
    manifest = update_manifest(out, config, "evaluate", {"seconds": seconds, **report.to_dict()})
    logger.info("Pipeline '%s' done: layer errors %s, mean Strehl %.4f",
                config.name, np.array2string(report.layer_errors, precision=4), report.mean_strehl)
    return PipelineResult(out, screens, waves, recon, report, manifest)


# -- sweep -------------------------------------------------------------------

def _swept_config(config: ExperimentConfig, parameter: str, value: float) -> ExperimentConfig:
    solver = config.solver
    if parameter == "alpha":
        new_filter = replace(solver.filter, alpha=float(value))
        new_filter.spec()
        return replace(config, solver=replace(solver, filter=new_filter))
    if float(value) != int(value) or value < 0:
        raise ConfigError(f"Iteration counts must be non-negative integers, got {value}")
    return replace(config, solver=replace(solver, iterations=int(value)))


def _check_sweep(config: ExperimentConfig, parameter: str, values: Sequence[float]) -> None:
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"Unknown sweep parameter '{parameter}' (choose from {', '.join(SWEEP_PARAMETERS)})")
    if not values:
        raise ConfigError("Sweep needs at least one value")
    if not all(math.isfinite(v) for v in values):
        raise ConfigError(f"Sweep values must be finite, got {list(values)}")
    solver = config.solver
    if parameter == "alpha" and not (solver.kind is SolverKind.SVTD and solver.filter.kind is FilterKind.TIKHONOV):
        raise ConfigError("An alpha sweep needs the svtd solver with a tikhonov filter")
    if parameter == "iterations" and solver.kind not in (SolverKind.ITERATIVE_FD, SolverKind.GRADIENT):
        raise ConfigError("An iteration sweep needs the iterative_fd or gradient solver")


def sweep(config: ExperimentConfig, parameter: str, values: Sequence[float], out_dir: Optional[PathLike] = None,
          cache_dir: Optional[PathLike] = None) -> SweepResult:
    """
    One pipeline run per value, sharing one set of screens and one SVD cache.

    Runs land in ``<out>/sweep/<parameter>_<i>/``; the quality table
    ``<out>/sweep_<parameter>.csv`` has the columns value,
    error_layer_<l>..., mean_residual_rms, mean_strehl.
    """
    values = [float(v) for v in values]
    _check_sweep(config, parameter, values)
    configs = [_swept_config(config, parameter, v) for v in values]
    out = resolve_out_dir(config, out_dir)
    geometry = prepare_geometry(config)
    screens = simulate_stage(config, geometry)
    cache = None
    if config.solver.kind is SolverKind.SVTD:
        geometry.require_single_kind("SVTD reconstruction")
        cache = load_or_build_cache(geometry, config.solver.sobolev_order, config.grid.n,
                                    resolve_pipeline_cache_dir(out, cache_dir))
    rows, runs = [], []
    for i, (value, run_config) in enumerate(zip(values, configs)):
        run_dir = out / "sweep" / f"{parameter}_{i:03d}"
        result = run_pipeline(run_config, run_dir, cache_dir, screens=screens, cache=cache)
        report = result.report
        rows.append((value, *report.layer_errors.tolist(), report.mean_rms, report.mean_strehl))
        runs.append(run_dir)
        logger.info("Sweep %s = %g: mean rms %.4g", parameter, value, report.mean_rms)
    header = ["value", *(f"error_layer_{l}" for l in range(geometry.n_layers)), "mean_residual_rms", "mean_strehl"]
    table = write_csv(out / f"sweep_{parameter}.csv", header, rows)
    update_manifest(out, config, "sweep", {"parameter": parameter, "values": values,
                                           "runs": [str(r) for r in runs]})
    return SweepResult(parameter, tuple(values), table, tuple(runs))


# -- plot data and diagnostics -----------------------------------------------

def _read_table(path: Path) -> List[Dict[str, str]]:
    if not path.exists():
        raise ArtifactError(f"Missing artifact '{path}'")
    return read_csv(path)


def export_plotdata(artifact_dir: PathLike) -> Tuple[Path, Path]:
    """
    Long-format plot tables from a finished artifact directory.

    ``plot_directions.csv``: theta_x_arcsec, theta_y_arcsec,
    separation_arcsec, residual_rms, strehl (one row per direction).
    ``plot_layers.csv``: height_m, relative_error (one row per layer).

    Raises:
        ArtifactError: when report.csv or layer_errors.csv is missing or malformed.
    """
    artifact_dir = Path(artifact_dir)
    try:
        directions = _read_table(artifact_dir / REPORT_FILE)
        layers = _read_table(artifact_dir / LAYER_ERRORS_FILE)
        direction_rows = []
        for row in directions:
            x, y = float(row["theta_x_arcsec"]), float(row["theta_y_arcsec"])
            direction_rows.append((x, y, math.hypot(x, y), float(row["residual_rms"]), float(row["strehl"])))
        layer_rows = [(float(row["height_m"]), float(row["relative_error"])) for row in layers]
    except (KeyError, ValueError, FileReadError) as e:
        raise ArtifactError(f"Malformed report tables in '{artifact_dir}': {e}") from e
    return (
        write_csv(artifact_dir / PLOT_DIRECTIONS_FILE, REPORT_COLUMNS, direction_rows),
        write_csv(artifact_dir / PLOT_LAYERS_FILE, ("height_m", "relative_error"), layer_rows),
    )


def diagnose(config: ExperimentConfig, cache_dir: Optional[PathLike] = None, bins: int = 20) -> Dict[str, Any]:
    """
    Picard check of the simulated data against the configured H^s cache,
    plus the s = 0 well-posedness scan and rational-shift report.
    """
    geometry = prepare_geometry(config)
    geometry.require_single_kind("diagnose")
    n, s = config.grid.n, config.solver.sobolev_order
    cache_dir = resolve_pipeline_cache_dir(resolve_out_dir(config), cache_dir)
    screens = simulate_stage(config, geometry)
    waves = forward_stage(config, screens.stack)
    picard = picard_diagnostic(waves, load_or_build_cache(geometry, s, n, cache_dir), config.picard.threshold)
    scan_cache = load_or_build_cache(geometry, 0.0, n, cache_dir)
    scan = wellposedness_scan(geometry, n, 0.0, bins, cache=scan_cache)
    return {
        "name": config.name,
        "config_hash": config.content_hash(),
        "code_version": __version__,
        "n": n,
        "sobolev_order": s,
        "picard": picard.to_dict(),
        "wellposedness": scan.to_dict(),
    }
