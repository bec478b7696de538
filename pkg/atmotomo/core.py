"""
Tomography geometry: aperture, guide stars, turbulence layers, grids and the
per-layer footprint masks, together with the package exception hierarchy.

Everything here is immutable after construction and safe to share between
threads.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

#: Radians per arcsecond.
ARCSEC = math.pi / 648000.0

#: Default sodium-layer height for laser guide stars (m).
DEFAULT_LGS_HEIGHT = 90000.0


# Custom exceptions for better error handling
class AtmoTomoError(Exception):
    """Base exception for all atmotomo operations."""
    pass


class GeometryError(AtmoTomoError, ValueError):
    """Raised when a geometry, grid or star/layer description is invalid."""
    pass


class ExtentError(GeometryError):
    """Raised when the extension square does not contain every shifted footprint."""
    def __init__(self, message: str, violations: Sequence[Tuple[int, int]] = (), worst_margin: float = float("nan")):
        super().__init__(message)
        self.violations = list(violations)
        self.worst_margin = worst_margin


class MixedGeometryError(GeometryError):
    """Raised when an operation needs a single-kind star set but got NGS and LGS."""
    pass


class DomainMismatchError(AtmoTomoError, ValueError):
    """Raised when a field is used with the wrong plane, layer or grid."""
    pass


class NumericalError(AtmoTomoError):
    """Raised on non-finite data or a numerical breakdown."""
    pass


class DivergenceError(NumericalError):
    """Raised when an iterative solver trips its divergence guard."""
    def __init__(self, message: str, residuals: Sequence[float] = ()):
        super().__init__(message)
        self.residuals = list(residuals)


class FrameError(NumericalError):
    """Raised when an overlay vanishes on the support of a frame function."""
    pass


class CacheMismatchError(AtmoTomoError):
    """Raised when an SVD cache does not belong to the requested problem."""
    pass


class ConfigError(AtmoTomoError, ValueError):
    """Raised when an experiment configuration violates the schema."""
    pass


class FileOperationError(AtmoTomoError):
    """Raised when file I/O operations fail."""
    pass


class FileReadError(FileOperationError):
    """Raised when file reading fails."""
    pass


class FileWriteError(FileOperationError):
    """Raised when file writing fails."""
    pass


class GridFormatError(FileReadError):
    """Raised when a grid or cache file has a bad header or payload."""
    pass


class ArtifactError(FileOperationError):
    """Raised when an artifact directory is missing required outputs."""
    pass


class StarKind(str, Enum):
    NGS = "ngs"
    LGS = "lgs"

    @classmethod
    def list(cls) -> List[str]:
        return [kind.value for kind in cls]


@dataclass(frozen=True)
class ApertureSpec:
    """Annular telescope aperture centred at the origin (lengths in metres)."""
    outer_radius: float
    inner_radius: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.outer_radius) and math.isfinite(self.inner_radius)):
            raise GeometryError("Aperture radii must be finite")
        if not 0.0 <= self.inner_radius < self.outer_radius:
            raise GeometryError(
                f"Aperture needs 0 <= inner_radius < outer_radius, got {self.inner_radius} and {self.outer_radius}"
            )

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Annulus membership; points on either boundary count as inside."""
        r2 = x * x + y * y
        return (r2 <= self.outer_radius ** 2) & (r2 >= self.inner_radius ** 2)


@dataclass(frozen=True)
class GuideStar:
    """Guide star direction (radians) and kind."""
    alpha_x: float
    alpha_y: float
    kind: StarKind = StarKind.NGS

    def __post_init__(self):
        if not (math.isfinite(self.alpha_x) and math.isfinite(self.alpha_y)):
            raise GeometryError(f"Guide star direction must be finite, got ({self.alpha_x}, {self.alpha_y})")
        object.__setattr__(self, "kind", StarKind(self.kind))

    @classmethod
    def from_arcsec(cls, x: float, y: float, kind: Union[StarKind, str] = StarKind.NGS) -> "GuideStar":
        return cls(x * ARCSEC, y * ARCSEC, StarKind(kind))

    @property
    def separation(self) -> float:
        """Off-axis angle |alpha| in radians."""
        return math.hypot(self.alpha_x, self.alpha_y)


@dataclass(frozen=True)
class LayerSpec:
    height: float
    weight: float

    def __post_init__(self):
        if not (math.isfinite(self.height) and self.height >= 0.0):
            raise GeometryError(f"Layer height must be finite and >= 0, got {self.height}")
        if not (math.isfinite(self.weight) and self.weight > 0.0):
            raise GeometryError(f"Layer weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class GridSpec:
    """
    Periodic square grid over [-R, R)^2 with n samples per axis.

    Sample p sits at -R + p*2R/n, the centre of its half-open cell. Arrays
    are indexed [row, col] with rows along y and columns along x.
    """
    n: int
    half_width: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4 or self.n % 2:
            raise GeometryError(f"Grid size must be an even integer >= 4, got {self.n}")
        if not (math.isfinite(self.half_width) and self.half_width > 0.0):
            raise GeometryError(f"Grid half-width must be positive, got {self.half_width}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def cell_area(self) -> float:
        return self.spacing ** 2

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n, self.n)

    def axis(self) -> np.ndarray:
        return -self.half_width + self.spacing * np.arange(self.n)

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """(X, Y) sample coordinates, each of shape (n, n)."""
        x = self.axis()
        return np.meshgrid(x, x)


def cone_factor(layer: LayerSpec, star: GuideStar, lgs_height: float = DEFAULT_LGS_HEIGHT) -> float:
    """
    Footprint scaling c_{l,g} of a layer seen from a guide star.

    Returns 1 for natural guide stars and 1 - h/h_LGS for laser guide stars.

    Raises:
        GeometryError: if the layer is not below the LGS height.
    """
    if layer.height >= lgs_height:
        raise GeometryError(f"Layer height {layer.height} m is not below the LGS height {lgs_height} m")
    if star.kind is StarKind.NGS:
        return 1.0
    return 1.0 - layer.height / lgs_height


@dataclass(frozen=True)
class SystemGeometry:
    """
    Full problem description: aperture, guide stars (NGS first), layers
    (ascending heights, weights summing to one) and the half-width T of the
    periodic extension square.
    """
    aperture: ApertureSpec
    stars: Tuple[GuideStar, ...]
    layers: Tuple[LayerSpec, ...]
    extension_half_width: float
    lgs_height: float = DEFAULT_LGS_HEIGHT

    def __post_init__(self):
        object.__setattr__(self, "stars", tuple(self.stars))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.stars:
            raise GeometryError("At least one guide star is required")
        if not self.layers:
            raise GeometryError("At least one layer is required")
        seen_lgs = False
        for g, star in enumerate(self.stars):
            if star.kind is StarKind.LGS:
                seen_lgs = True
            elif seen_lgs:
                raise GeometryError(f"Star {g} is an NGS listed after an LGS; NGS entries must come first")
        heights = [layer.height for layer in self.layers]
        if any(b <= a for a, b in zip(heights, heights[1:])):
            raise GeometryError(f"Layer heights must be strictly ascending, got {heights}")
        total = math.fsum(layer.weight for layer in self.layers)
        if abs(total - 1.0) > 1e-12:
            raise GeometryError(f"Layer weights must sum to 1, got {total!r}")
        if not (math.isfinite(self.lgs_height) and self.lgs_height > 0.0):
            raise GeometryError(f"LGS height must be positive, got {self.lgs_height}")
        if heights[-1] >= self.lgs_height:
            raise GeometryError(f"Layer height {heights[-1]} m is not below the LGS height {self.lgs_height} m")
        if not (math.isfinite(self.extension_half_width) and self.extension_half_width > 0.0):
            raise GeometryError(f"Extension half-width T must be positive, got {self.extension_half_width}")

    @property
    def n_stars(self) -> int:
        return len(self.stars)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def star_kinds(self) -> Tuple[StarKind, ...]:
        return tuple(star.kind for star in self.stars)

    @property
    def is_single_kind(self) -> bool:
        return len(set(self.star_kinds)) == 1

    @property
    def weights(self) -> np.ndarray:
        return np.array([layer.weight for layer in self.layers])

    @property
    def heights(self) -> np.ndarray:
        return np.array([layer.height for layer in self.layers])

    def cone_factor(self, layer_index: int, star_index: int) -> float:
        return cone_factor(self.layers[layer_index], self.stars[star_index], self.lgs_height)

    def cone_factors(self) -> np.ndarray:
        """Array of c_{l,g} with shape (L, G)."""
        return np.array([[self.cone_factor(l, g) for g in range(self.n_stars)] for l in range(self.n_layers)])

    def scale(self, layer_index: int) -> float:
        """c_l, the smallest cone factor on a layer."""
        return min_cone_factor(layer_index, self)

    def layer_grid(self, layer_index: int, n: int) -> GridSpec:
        return GridSpec(n, self.scale(layer_index) * self.extension_half_width)

    def aperture_grid(self, n: int) -> GridSpec:
        return GridSpec(n, self.extension_half_width)

    def shift(self, layer_index: int, star_index: int) -> Tuple[float, float]:
        """Footprint centre alpha_g * h_l on layer l (metres)."""
        star, h = self.stars[star_index], self.layers[layer_index].height
        return (star.alpha_x * h, star.alpha_y * h)

    def require_single_kind(self, operation: str) -> None:
        if not self.is_single_kind:
            raise MixedGeometryError(f"{operation} needs an NGS-only or LGS-only star set")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "aperture": {"outer_radius": self.aperture.outer_radius, "inner_radius": self.aperture.inner_radius},
            "stars": [{"alpha_x": s.alpha_x, "alpha_y": s.alpha_y, "kind": s.kind.value} for s in self.stars],
            "layers": [{"height": l.height, "weight": l.weight} for l in self.layers],
            "extension_half_width": self.extension_half_width,
            "lgs_height": self.lgs_height,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SystemGeometry":
        return cls(
            aperture=ApertureSpec(**data["aperture"]),
            stars=tuple(GuideStar(s["alpha_x"], s["alpha_y"], StarKind(s["kind"])) for s in data["stars"]),
            layers=tuple(LayerSpec(**l) for l in data["layers"]),
            extension_half_width=data["extension_half_width"],
            lgs_height=data.get("lgs_height", DEFAULT_LGS_HEIGHT),
        )

    def content_hash(self, *extra: Any) -> str:
        """sha256 of a canonical JSON rendering, optionally salted with extra values."""
        payload = json.dumps({"geometry": self.to_dict(), "extra": list(extra)}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def ring_asterism(count: int, diameter_arcsec: float, kind: Union[StarKind, str] = StarKind.NGS,
                  first_angle_deg: float = 90.0) -> Tuple[GuideStar, ...]:
    """
    Equally spaced guide stars on a circle of the given diameter.

    The first star sits at ``first_angle_deg`` (90 = top). Components
    below 1e-15 rad are snapped to zero so that axis-aligned stars are exact.
    """
    if count < 1:
        raise GeometryError(f"Asterism needs at least one star, got {count}")
    radius = 0.5 * diameter_arcsec * ARCSEC
    stars = []
    for i in range(count):
        angle = math.radians(first_angle_deg + 360.0 * i / count)
        ax, ay = radius * math.cos(angle), radius * math.sin(angle)
        ax = 0.0 if abs(ax) < 1e-15 else ax
        ay = 0.0 if abs(ay) < 1e-15 else ay
        stars.append(GuideStar(ax, ay, StarKind(kind)))
    return tuple(stars)


def min_cone_factor(layer_index: int, geometry: SystemGeometry) -> float:
    return min(geometry.cone_factor(layer_index, g) for g in range(geometry.n_stars))


def beta(layer_index: int, geometry: SystemGeometry) -> float:
    """Sobolev frequency weight beta_{l,T} = pi^2 / (c_l T)^2."""
    return math.pi ** 2 / (geometry.scale(layer_index) * geometry.extension_half_width) ** 2


@dataclass(frozen=True)
class ExtentReport:
    ok: bool
    worst_margin: float
    violations: Tuple[Tuple[int, int], ...] = ()


def validate_extent(geometry: SystemGeometry) -> ExtentReport:
    """
    Check that every shifted aperture copy fits in its layer square.

    A pair (l, g) passes when outer_radius + |alpha_g| h_l <= c_l T.
    """
    T = geometry.extension_half_width
    tol = 1e-12 * max(1.0, T)
    worst = math.inf
    violations = []
    for l, layer in enumerate(geometry.layers):
        c = geometry.scale(l)
        for g, star in enumerate(geometry.stars):
            margin = c * T - (geometry.aperture.outer_radius + star.separation * layer.height)
            worst = min(worst, margin)
            if margin < -tol:
                violations.append((l, g))
    return ExtentReport(ok=not violations, worst_margin=worst, violations=tuple(violations))


def require_extent(geometry: SystemGeometry) -> ExtentReport:
    report = validate_extent(geometry)
    if not report.ok:
        pairs = ", ".join(f"(layer {l}, star {g})" for l, g in report.violations)
        raise ExtentError(
            f"Extension half-width T = {geometry.extension_half_width} m is too small "
            f"(worst margin {report.worst_margin:.6g} m); violating pairs: {pairs}",
            violations=report.violations,
            worst_margin=report.worst_margin,
        )
    return report


def aperture_mask(grid: GridSpec, aperture: ApertureSpec) -> np.ndarray:
    X, Y = grid.coordinates()
    return aperture.contains(X, Y)


@dataclass(frozen=True)
class LayerMasks:
    """
    Footprint indicators I_{lg} (per layer, shape (G, n, n), bool), overlays
    O_l = sum_g I_{lg} (per layer, shape (n, n), int) and the aperture mask
    on the aperture grid.
    """
    indicators: Tuple[np.ndarray, ...]
    overlays: Tuple[np.ndarray, ...]
    aperture: np.ndarray
    grids: Tuple[GridSpec, ...]

    def support(self, layer_index: int) -> np.ndarray:
        """Discretized footprint Omega_l (where O_l >= 1)."""
        return self.overlays[layer_index] > 0


def footprint_indicator(geometry: SystemGeometry, layer_index: int, star_index: int, grid: GridSpec) -> np.ndarray:
    """I_{lg} on the given layer grid: (r - alpha_g h_l)/c_{l,g} inside the aperture."""
    X, Y = grid.coordinates()
    sx, sy = geometry.shift(layer_index, star_index)
    c = geometry.cone_factor(layer_index, star_index)
    return geometry.aperture.contains((X - sx) / c, (Y - sy) / c)


def build_masks(geometry: SystemGeometry, grids: Union[int, Sequence[GridSpec]]) -> LayerMasks:
    """
    Build I_{lg} and O_l on every layer grid.

    Args:
        geometry: the tomography geometry.
        grids: one GridSpec per layer, or the common sample count n, in which
            case the layer grids of half-width c_l T are used.
    """
    if isinstance(grids, (int, np.integer)):
        n = int(grids)
        grids = tuple(geometry.layer_grid(l, n) for l in range(geometry.n_layers))
    grids = tuple(grids)
    if len(grids) != geometry.n_layers:
        raise DomainMismatchError(f"Expected {geometry.n_layers} layer grids, got {len(grids)}")
    if len({grid.n for grid in grids}) != 1:
        raise DomainMismatchError("All layer grids must share one sample count")
    indicators, overlays = [], []
    for l, grid in enumerate(grids):
        stack = np.stack([footprint_indicator(geometry, l, g, grid) for g in range(geometry.n_stars)])
        indicators.append(stack)
        overlays.append(stack.sum(axis=0, dtype=np.int64))
    aperture = aperture_mask(geometry.aperture_grid(grids[0].n), geometry.aperture)
    return LayerMasks(tuple(indicators), tuple(overlays), aperture, grids)


@dataclass(frozen=True)
class ShiftRatio:
    layer: int
    star: int
    ratio_x: float
    ratio_y: float
    fraction_x: Fraction
    fraction_y: Fraction
    rational: bool


@dataclass(frozen=True)
class RationalShiftReport:
    entries: Tuple[ShiftRatio, ...] = field(default_factory=tuple)

    @property
    def all_rational(self) -> bool:
        return all(entry.rational for entry in self.entries)


def rational_shift_report(geometry: SystemGeometry, max_denominator: int = 64, tol: float = 1e-9) -> RationalShiftReport:
    """
    Report whether alpha^x h / T and alpha^y h / T are (numerically) rational
    for every layer/star pair, the condition under which the unweighted
    periodic problem has a bounded pseudo-inverse.
    """
    T = geometry.extension_half_width
    entries = []
    for l in range(geometry.n_layers):
        for g in range(geometry.n_stars):
            sx, sy = geometry.shift(l, g)
            rx, ry = sx / T, sy / T
            fx = Fraction(rx).limit_denominator(max_denominator)
            fy = Fraction(ry).limit_denominator(max_denominator)
            rational = bool(abs(rx - float(fx)) <= tol and abs(ry - float(fy)) <= tol)
            entries.append(ShiftRatio(l, g, rx, ry, fx, fy, rational))
    return RationalShiftReport(tuple(entries))
