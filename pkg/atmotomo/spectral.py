"""
Periodic fields and their expansions in the scaled exponential bases.

On a layer square c*[-T, T)^2 with weight gamma the basis is

    w_{jk,l}(x, y) = sqrt(gamma)/c * 1/(2T) * exp(i*pi*(j*x + k*y)/(c*T)),

orthonormal for the inner product (1/gamma) * integral(u * conj(v)). The
aperture square uses c = gamma = 1. ``analyze`` replaces the integrals by
Riemann sums on the sample grid, which turns them into a scaled fft2; the
constants are fixed so that ``synthesize(analyze(f)) == f`` on the grid and a
sampled basis function analyzes to a Kronecker delta.

Coefficient arrays are stored in FFT order over the complete discrete index
set {-n/2, ..., n/2 - 1}^2, indexed [k, j] (rows carry the y frequency).
Algorithm-level code restricts to the in-band set that drops the -n/2
(Nyquist) row and column, see ``in_band_mask``.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np

from .core import DomainMismatchError, GeometryError, GridSpec, SystemGeometry

logger = logging.getLogger(__name__)

#: Imaginary residue (relative to the field's peak) tolerated silently when
#: a synthesized field is returned as real.
IMAGINARY_RESIDUE_TOL = 1e-10


class Domain(str, Enum):
    APERTURE = "aperture"
    LAYER = "layer"

    @classmethod
    def list(cls) -> List[str]:
        return [domain.value for domain in cls]


class ScaleDirection(str, Enum):
    APPLY = "apply"
    REMOVE = "remove"

    @classmethod
    def list(cls) -> List[str]:
        return [direction.value for direction in cls]


@dataclass(frozen=True)
class BasisContext:
    """Scaling of the basis: plane, half-width T, cone scale c and weight gamma."""
    domain: Domain
    half_width: float
    scale: float = 1.0
    weight: float = 1.0
    layer: Optional[int] = None

    @property
    def extent(self) -> float:
        """Half-width c*T of the square the basis lives on."""
        return self.scale * self.half_width

    def grid(self, n: int) -> GridSpec:
        return GridSpec(n, self.extent)


def aperture_context(geometry: SystemGeometry) -> BasisContext:
    return BasisContext(Domain.APERTURE, geometry.extension_half_width)


def layer_context(geometry: SystemGeometry, layer_index: int) -> BasisContext:
    return BasisContext(
        Domain.LAYER,
        geometry.extension_half_width,
        scale=geometry.scale(layer_index),
        weight=geometry.layers[layer_index].weight,
        layer=layer_index,
    )


@dataclass(frozen=True, eq=False)
class Field2D:
    """Samples of a periodic field on a grid, tagged with the plane it lives on."""
    grid: GridSpec
    values: np.ndarray
    domain: Domain
    layer: Optional[int] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.grid.shape:
            raise DomainMismatchError(f"Field values have shape {values.shape}, grid expects {self.grid.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "domain", Domain(self.domain))
        if (self.domain is Domain.LAYER) != (self.layer is not None):
            raise DomainMismatchError("Layer fields carry a layer index and aperture fields do not")

    def with_values(self, values: np.ndarray) -> "Field2D":
        return replace(self, values=values)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.values)


@dataclass(frozen=True)
class SobolevWeight:
    s: float
    beta: float

    def __post_init__(self):
        if not self.s >= 0.0:
            raise GeometryError(f"Sobolev order must be >= 0, got {self.s}")

    def factor(self, j: Union[int, np.ndarray], k: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
        """(1 + beta*|(j,k)|^2)^(-s/2), in (0, 1]."""
        return (1.0 + self.beta * (np.square(j) + np.square(k))) ** (-0.5 * self.s)


def frequency_indices(n: int) -> np.ndarray:
    """Signed integer frequencies in FFT order: 0, 1, ..., n/2-1, -n/2, ..., -1."""
    return np.rint(np.fft.fftfreq(n, d=1.0 / n)).astype(np.int64)


def frequency_grid(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """(J, K) integer frequency arrays in FFT order; J varies along columns."""
    f = frequency_indices(n)
    return np.meshgrid(f, f)


def in_band_mask(n: int) -> np.ndarray:
    """Index set {-n/2+1, ..., n/2-1}^2 of the reconstruction algorithm."""
    J, K = frequency_grid(n)
    nyquist = -(n // 2)
    return (J != nyquist) & (K != nyquist)


def _parity(n: int) -> np.ndarray:
    J, K = frequency_grid(n)
    return np.where((J + K) % 2 == 0, 1.0, -1.0)


def sobolev_factors(n: int, s: float, beta: float) -> np.ndarray:
    """Array of (1 + beta*|(j,k)|^2)^(-s/2) in FFT order."""
    J, K = frequency_grid(n)
    return SobolevWeight(s, beta).factor(J, K)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Expansion coefficients of a field in the basis of ``context``."""
    coefficients: np.ndarray
    context: BasisContext
    sobolev_order: float = 0.0

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=complex)
        if coefficients.ndim != 2 or coefficients.shape[0] != coefficients.shape[1]:
            raise DomainMismatchError(f"Coefficients must be a square array, got shape {coefficients.shape}")
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]

    @property
    def in_band(self) -> np.ndarray:
        return in_band_mask(self.n)

    def coefficient(self, j: int, k: int) -> complex:
        return complex(self.coefficients[k % self.n, j % self.n])

    def with_coefficients(self, coefficients: np.ndarray, sobolev_order: Optional[float] = None) -> "SpectralField":
        order = self.sobolev_order if sobolev_order is None else sobolev_order
        return SpectralField(coefficients, self.context, order)


def _check_field_context(field: Field2D, context: BasisContext) -> None:
    if field.domain is not context.domain:
        raise DomainMismatchError(f"Field lives on the {field.domain.value} plane, context is {context.domain.value}")
    if field.layer != context.layer:
        raise DomainMismatchError(f"Field belongs to layer {field.layer}, context to layer {context.layer}")
    if not math.isclose(field.grid.half_width, context.extent, rel_tol=1e-12):
        raise DomainMismatchError(
            f"Field grid half-width {field.grid.half_width} does not match c*T = {context.extent}"
        )


def analyze(field: Field2D, context: BasisContext) -> SpectralField:
    """
    Coefficients <u, w_{jk}> of a sampled field.

    Raises:
        DomainMismatchError: when the field's plane, layer or grid does not
            match the context.
    """
    _check_field_context(field, context)
    n = field.grid.n
    prefactor = 2.0 * context.extent / (n * n * math.sqrt(context.weight))
    coefficients = prefactor * _parity(n) * np.fft.fft2(field.values)
    return SpectralField(coefficients, context)


def synthesize(spec: SpectralField, real: bool = True) -> Field2D:
    """
    Evaluate sum_{jk} c_{jk} w_{jk} on the grid.

    With ``real=True`` the imaginary part is dropped; a warning is logged
    when it exceeds the residue tolerance.
    """
    n, context = spec.n, spec.context
    prefactor = math.sqrt(context.weight) * n * n / (2.0 * context.extent)
    values = prefactor * np.fft.ifft2(_parity(n) * spec.coefficients)
    if real:
        residue = float(np.max(np.abs(values.imag))) if values.size else 0.0
        peak = float(np.max(np.abs(values.real))) if values.size else 0.0
        if residue > IMAGINARY_RESIDUE_TOL * max(1.0, peak):
            logger.warning("Dropping imaginary residue %.3e (peak %.3e) after synthesis", residue, peak)
        values = values.real.copy()
    return Field2D(context.grid(n), values, context.domain, context.layer)


def sobolev_scale(spec: SpectralField, s: float, beta: float,
                  direction: Union[ScaleDirection, str] = ScaleDirection.APPLY) -> SpectralField:
    """Multiply (apply) or divide (remove) every coefficient by (1 + beta|(j,k)|^2)^(-s/2)."""
    direction = ScaleDirection(direction)
    factors = sobolev_factors(spec.n, s, beta)
    if direction is ScaleDirection.APPLY:
        return spec.with_coefficients(spec.coefficients * factors, spec.sobolev_order + s)
    return spec.with_coefficients(spec.coefficients / factors, spec.sobolev_order - s)


def sobolev_norm(spec: SpectralField, s: float, beta: float) -> float:
    """H^s norm over the in-band index set."""
    J, K = frequency_grid(spec.n)
    weights = (1.0 + beta * (J * J + K * K)) ** s
    band = spec.in_band
    return float(np.sqrt(np.sum(weights[band] * np.abs(spec.coefficients[band]) ** 2)))


def zero_extend(values: np.ndarray, mask: np.ndarray, grid: GridSpec,
                domain: Domain = Domain.APERTURE, layer: Optional[int] = None) -> Field2D:
    """
    Extend aperture data by zero to the whole square.

    ``values`` is either a full (n, n) array, whose samples outside the mask
    are discarded, or a 1-D array holding the samples on the mask points in
    row-major order.
    """
    values = np.asarray(values)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.shape:
        raise DomainMismatchError(f"Mask shape {mask.shape} does not match grid {grid.shape}")
    out = np.zeros(grid.shape, dtype=values.dtype)
    if values.shape == grid.shape:
        out[mask] = values[mask]
    elif values.ndim == 1 and values.size == int(mask.sum()):
        out[mask] = values
    else:
        raise DomainMismatchError(f"Cannot extend values of shape {values.shape} with a mask of {int(mask.sum())} points")
    return Field2D(grid, out, domain, layer)


def basis_samples(j: int, k: int, context: BasisContext, n: int) -> Field2D:
    """w_{jk} of the context evaluated pointwise on its n x n grid."""
    grid = context.grid(n)
    X, Y = grid.coordinates()
    omega = math.pi / context.half_width
    amplitude = math.sqrt(context.weight) / (context.scale * 2.0 * context.half_width)
    values = amplitude * np.exp(1j * omega * (j * X + k * Y) / context.scale)
    return Field2D(grid, values, context.domain, context.layer)


def inner_product(f: Field2D, g: Field2D, weight: float = 1.0) -> complex:
    """Riemann sum of (1/weight) * f * conj(g) over the grid."""
    if f.grid != g.grid:
        raise DomainMismatchError("Inner product of fields on different grids")
    return complex(np.sum(f.values * np.conj(g.values)) * f.grid.cell_area / weight)


def field_norm(f: Field2D, weight: float = 1.0) -> float:
    return float(np.sqrt(np.sum(np.abs(f.values) ** 2) * f.grid.cell_area / weight))
