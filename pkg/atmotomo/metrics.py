"""
Reconstruction quality: per-layer relative errors, residual wavefronts
toward science directions and the Marechal Strehl proxy exp(-rms^2).

Fields are phases in radians; no wavelength conversion is applied.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import (
    ARCSEC,
    ConfigError,
    DomainMismatchError,
    ExtentError,
    LayerMasks,
    NumericalError,
    SystemGeometry,
    build_masks,
)
from .forward import LayerStack, bilinear_matrix, parallel_map
from .spectral import Domain, Field2D

logger = logging.getLogger(__name__)

STREHL_MODEL = "marechal-exp"

_DEFAULT_OFFSETS_ARCSEC = (-60.0, -30.0, 0.0, 30.0, 60.0)


@dataclass(frozen=True)
class EvaluationGrid:
    """Science directions in arcsec; ``default()`` is a 5 x 5 grid over a 2 arcmin field."""
    directions_arcsec: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        directions = tuple((float(x), float(y)) for x, y in self.directions_arcsec)
        if not all(math.isfinite(x) and math.isfinite(y) for x, y in directions):
            raise ConfigError("Evaluation directions must be finite")
        object.__setattr__(self, "directions_arcsec", directions)

    @classmethod
    def default(cls) -> "EvaluationGrid":
        return cls(tuple((x, y) for y in _DEFAULT_OFFSETS_ARCSEC for x in _DEFAULT_OFFSETS_ARCSEC))

    @classmethod
    def square(cls, count: int, field_of_view_arcsec: float) -> "EvaluationGrid":
        offsets = np.linspace(-0.5, 0.5, count) * field_of_view_arcsec if count > 1 else np.zeros(1)
        return cls(tuple((float(x), float(y)) for y in offsets for x in offsets))

    def __len__(self) -> int:
        return len(self.directions_arcsec)

    @property
    def radians(self) -> List[Tuple[float, float]]:
        return [(x * ARCSEC, y * ARCSEC) for x, y in self.directions_arcsec]

    def separations_arcsec(self) -> np.ndarray:
        return np.array([math.hypot(x, y) for x, y in self.directions_arcsec])

    def outermost(self) -> List[int]:
        """Indices of the outer-ring directions on an axis or a diagonal (corners and edge midpoints)."""
        if not self.directions_arcsec:
            return []
        ring = max(max(abs(x), abs(y)) for x, y in self.directions_arcsec)
        if ring == 0.0:
            return []
        tol = 1e-9 * ring
        return [
            i for i, (x, y) in enumerate(self.directions_arcsec)
            if abs(max(abs(x), abs(y)) - ring) <= tol and (abs(x) <= tol or abs(y) <= tol or abs(abs(x) - abs(y)) <= tol)
        ]

    def center(self) -> Optional[int]:
        """Index of the direction closest to the axis."""
        if not self.directions_arcsec:
            return None
        return int(np.argmin(self.separations_arcsec()))


def layer_error(recon: LayerStack, truth: LayerStack, masks: Optional[LayerMasks] = None) -> np.ndarray:
    """
    Relative L2 error per layer over the footprint Omega_l.

    0/0 gives 0; a nonzero error against a zero truth gives inf.
    """
    if recon.geometry != truth.geometry or recon.n != truth.n:
        raise DomainMismatchError("Reconstruction and truth live on different grids")
    masks = build_masks(truth.geometry, truth.n) if masks is None else masks
    errors = []
    for l, (r, t) in enumerate(zip(recon, truth)):
        support = masks.support(l)
        if support.shape != t.grid.shape:
            raise DomainMismatchError(f"Mask for layer {l} does not match the layer grid")
        num = float(np.linalg.norm((r.values - t.values)[support]))
        den = float(np.linalg.norm(t.values[support]))
        if den == 0.0:
            errors.append(0.0 if num == 0.0 else math.inf)
        else:
            errors.append(num / den)
    return np.array(errors)


def marechal_strehl(rms_phase: float) -> float:
    """Strehl proxy exp(-rms^2) for a residual phase rms in radians."""
    if not (math.isfinite(rms_phase) and rms_phase >= 0.0):
        raise NumericalError(f"Residual rms must be finite and >= 0, got {rms_phase}")
    return math.exp(-rms_phase * rms_phase)


@dataclass(frozen=True, eq=False)
class DirectionalResidual:
    direction: Tuple[float, float]
    field: Field2D
    rms: float

    @property
    def strehl(self) -> float:
        return marechal_strehl(self.rms)


def _check_direction(geometry: SystemGeometry, direction: Tuple[float, float]) -> None:
    T = geometry.extension_half_width
    separation = math.hypot(*direction)
    violations, worst = [], math.inf
    for l, layer in enumerate(geometry.layers):
        margin = geometry.scale(l) * T - (geometry.aperture.outer_radius + separation * layer.height)
        worst = min(worst, margin)
        if margin < -1e-12 * max(1.0, T):
            violations.append((l, -1))
    if violations:
        layers = ", ".join(str(l) for l, _ in violations)
        raise ExtentError(
            f"Direction ({direction[0] / ARCSEC:.6g}, {direction[1] / ARCSEC:.6g}) arcsec leaves the "
            f"layer squares of layer(s) {layers} (worst margin {worst:.6g} m)",
            violations=violations, worst_margin=worst,
        )


def directional_residual(recon: LayerStack, truth: LayerStack, direction: Tuple[float, float],
                         geometry: Optional[SystemGeometry] = None, remove_piston: bool = False) -> DirectionalResidual:
    """
    sum_l (truth_l - recon_l)(r + theta h_l) on the aperture, and its rms.

    The projection uses the NGS geometry (c = 1) for every layer. The raw
    residual is returned by default; ``remove_piston=True`` subtracts its
    mean over the aperture from the field and the rms.

    Raises:
        ExtentError: when R + |theta| h_l exceeds c_l T on some layer.
    """
    geometry = truth.geometry if geometry is None else geometry
    if recon.geometry != geometry or truth.geometry != geometry or recon.n != truth.n:
        raise DomainMismatchError("Reconstruction, truth and geometry disagree")
    _check_direction(geometry, direction)
    n = truth.n
    grid = geometry.aperture_grid(n)
    X, Y = grid.coordinates()
    mask = geometry.aperture.contains(X, Y)
    rows = np.flatnonzero(mask.ravel())
    ax, ay = X.ravel()[rows], Y.ravel()[rows]
    residual = np.zeros(n * n)
    for l, (r, t) in enumerate(zip(recon, truth)):
        h = geometry.layers[l].height
        stencil = bilinear_matrix(ax + direction[0] * h, ay + direction[1] * h, rows, t.grid, n * n)
        residual += stencil @ (t.values - r.values).ravel()
    residual = residual.reshape(n, n)
    samples = residual[mask]
    if remove_piston and samples.size:
        samples = samples - samples.mean()
        residual = np.where(mask, residual - residual[mask].mean(), 0.0)
    rms = float(np.sqrt(np.mean(samples ** 2))) if samples.size else 0.0
    return DirectionalResidual(direction, Field2D(grid, residual, Domain.APERTURE), rms)


@dataclass(frozen=True, eq=False)
class QualityReport:
    layer_errors: np.ndarray
    directions_arcsec: Tuple[Tuple[float, float], ...]
    residual_rms: np.ndarray
    strehl: np.ndarray
    center_index: Optional[int] = None
    outermost_indices: Tuple[int, ...] = ()
    strehl_model: str = STREHL_MODEL

    @property
    def mean_rms(self) -> float:
        return float(np.mean(self.residual_rms)) if self.residual_rms.size else float("nan")

    @property
    def mean_strehl(self) -> float:
        return float(np.mean(self.strehl)) if self.strehl.size else float("nan")

    @property
    def center_rms(self) -> float:
        return float(self.residual_rms[self.center_index]) if self.center_index is not None else float("nan")

    @property
    def outermost_mean_rms(self) -> float:
        if not self.outermost_indices:
            return float("nan")
        return float(np.mean(self.residual_rms[list(self.outermost_indices)]))

    def to_dict(self) -> Dict[str, object]:
        return {
            "layer_errors": self.layer_errors.tolist(),
            "mean_residual_rms": self.mean_rms,
            "center_residual_rms": self.center_rms,
            "mean_strehl": self.mean_strehl,
            "strehl_model": self.strehl_model,
        }


def evaluate(recon: LayerStack, truth: LayerStack, grid: Optional[EvaluationGrid] = None,
             masks: Optional[LayerMasks] = None, remove_piston: bool = False, threads: int = 1) -> QualityReport:
    """Layer errors plus per-direction residual rms and Strehl proxy."""
    grid = EvaluationGrid.default() if grid is None else grid
    errors = layer_error(recon, truth, masks)
    results = parallel_map(
        lambda direction: directional_residual(recon, truth, direction, remove_piston=remove_piston),
        grid.radians, threads,
    )
    rms = np.array([r.rms for r in results])
    strehl = np.array([r.strehl for r in results])
    report = QualityReport(errors, grid.directions_arcsec, rms, strehl, grid.center(), tuple(grid.outermost()))
    logger.info("Evaluated %d directions: mean rms %.4g rad, layer errors %s",
                len(grid), report.mean_rms, np.array2string(errors, precision=4))
    return report

