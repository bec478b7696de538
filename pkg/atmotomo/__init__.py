"""
atmotomo - Atmospheric tomography operators, reconstructors and experiments

The package is layered bottom-up:

1. Geometry (core)
   ================
   - ApertureSpec, GuideStar, LayerSpec, SystemGeometry, GridSpec
   - cone factors, extent validation, footprint masks and overlays

   Example:
       from atmotomo import load_preset
       geometry = load_preset("ngs6").build_geometry()

2. Operators (spectral, forward)
   ==============================
   - analyze/synthesize against the scaled periodic bases, Sobolev weights
   - the tomography operator A, its transpose and formula adjoints, and the
     weighted adjoint

3. Reconstructors (svtd, frame)
   =============================
   - SVTD: per-frequency SVD cache, Tikhonov/truncation/pseudo-inverse
     filters, Picard and well-posedness diagnostics
   - frame decomposition: explicit inverse, iterative FD, gradient method

   Example:
       from atmotomo import load_or_build_cache, reconstruct, FilterSpec
       cache = load_or_build_cache(geometry, s=1.0, n=64, cache_dir="cache")
       layers = reconstruct(waves, cache, FilterSpec.tikhonov(1e-2))

4. Experiments (turbulence, metrics, pipeline)
   ============================================
   - seeded multi-layer screens, layer errors, directional residuals,
     Marechal Strehl proxy, artifact pipeline and parameter sweeps

   Example:
       from atmotomo import load_preset, run_pipeline
       result = run_pipeline(load_preset("ngs6"), "runs/ngs6")
"""

from .core import (
    ARCSEC, DEFAULT_LGS_HEIGHT,
    ApertureSpec, GuideStar, GridSpec, LayerMasks, LayerSpec, StarKind, SystemGeometry,
    beta, build_masks, cone_factor, min_cone_factor, rational_shift_report, require_extent, ring_asterism,
    validate_extent,
    # Exceptions
    AtmoTomoError, ArtifactError, CacheMismatchError, ConfigError, DivergenceError, DomainMismatchError,
    ExtentError, FileOperationError, FileReadError, FileWriteError, FrameError, GeometryError, GridFormatError,
    MixedGeometryError, NumericalError,
)
from .spectral import (
    Domain, Field2D, SobolevWeight, SpectralField,
    analyze, aperture_context, layer_context, sobolev_norm, sobolev_scale, synthesize, zero_extend,
)
from .forward import (
    AdjointVariant, LayerStack, TomographyOperator, WavefrontSet,
    apply_adjoint, apply_forward, apply_periodic_forward, apply_weighted_adjoint,
)
from .svtd import (
    FilterKind, FilterSpec, SvtdCache,
    decompose_all, load_or_build_cache, picard_diagnostic, reconstruct, wellposedness_scan,
)
from .frame import (
    SolverOptions, SolverResult,
    dual_frame_eval, frame_function, frame_inverse_apply, frame_operator_apply, gradient_solve, iterative_fd,
)
from .turbulence import TurbulenceParams, generate_screens, sobolev_regularity_probe
from .metrics import EvaluationGrid, QualityReport, directional_residual, evaluate, layer_error, marechal_strehl
from .formats import register_format, list_supported_formats
from .storage import LockedFile, read_grid, write_grid
from .version import __version__

# Import defaults so that default formats are registered automatically
from . import defaults

from .config import ExperimentConfig, SolverKind, list_presets, load_config, load_preset
from .pipeline import diagnose, export_plotdata, run_pipeline, sweep

__all__ = [
    "ARCSEC", "DEFAULT_LGS_HEIGHT",
    "ApertureSpec", "GuideStar", "GridSpec", "LayerMasks", "LayerSpec", "StarKind", "SystemGeometry",
    "beta", "build_masks", "cone_factor", "min_cone_factor", "rational_shift_report", "require_extent",
    "ring_asterism", "validate_extent",
    "Domain", "Field2D", "SobolevWeight", "SpectralField",
    "analyze", "aperture_context", "layer_context", "sobolev_norm", "sobolev_scale", "synthesize", "zero_extend",
    "AdjointVariant", "LayerStack", "TomographyOperator", "WavefrontSet",
    "apply_adjoint", "apply_forward", "apply_periodic_forward", "apply_weighted_adjoint",
    "FilterKind", "FilterSpec", "SvtdCache",
    "decompose_all", "load_or_build_cache", "picard_diagnostic", "reconstruct", "wellposedness_scan",
    "SolverOptions", "SolverResult",
    "dual_frame_eval", "frame_function", "frame_inverse_apply", "frame_operator_apply", "gradient_solve",
    "iterative_fd",
    "TurbulenceParams", "generate_screens", "sobolev_regularity_probe",
    "EvaluationGrid", "QualityReport", "directional_residual", "evaluate", "layer_error", "marechal_strehl",
    "register_format", "list_supported_formats", "LockedFile", "read_grid", "write_grid",
    "ExperimentConfig", "SolverKind", "list_presets", "load_config", "load_preset",
    "diagnose", "export_plotdata", "run_pipeline", "sweep",
    "__version__",
    # Exceptions
    "AtmoTomoError", "ArtifactError", "CacheMismatchError", "ConfigError", "DivergenceError",
    "DomainMismatchError", "ExtentError", "FileOperationError", "FileReadError", "FileWriteError", "FrameError",
    "GeometryError", "GridFormatError", "MixedGeometryError", "NumericalError",
]
