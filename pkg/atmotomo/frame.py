"""
Frame decomposition of the tomography operator.

On layer l the functions w_{jk,lg} = w_{jk,l} * I_{lg} form a frame over the
layer footprint; the frame operator is multiplication by the overlay
O_l = sum_g I_{lg} and the canonical duals are w_{jk,lg} / O_l. Combining them
with the singular system of the single-star operators gives the explicit
approximate inverse

    (Ainv phi)_l(r) = sum_g gamma_l / (c_{l,g} sigma_g)^2 * phi_g((r - alpha_g h_l)/c_{l,g}) * I_{lg}(r) / O_l(r)

which is evaluated as a star-weighted sum of weighted adjoints. The
iterative FD and a steepest-descent baseline are built on top of it.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ConfigError,
    DivergenceError,
    DomainMismatchError,
    FrameError,
    LayerMasks,
    NumericalError,
    SystemGeometry,
)
from .forward import (
    AdjointVariant,
    LayerStack,
    WavefrontSet,
    get_operator,
    inner_product_waves,
    waves_norm,
)
from .spectral import (
    Domain,
    Field2D,
    SpectralField,
    analyze,
    aperture_context,
    basis_samples,
    frequency_grid,
    layer_context,
    synthesize,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrameIndex:
    j: int
    k: int
    layer: int
    star: int


@dataclass(frozen=True, eq=False)
class FrameCoefficients:
    """Per layer, an array (G, n, n) of <phi_l, w_{jk,lg}> in FFT order [g, k, j]."""
    coefficients: Tuple[np.ndarray, ...]

    def layer(self, layer_index: int) -> np.ndarray:
        return self.coefficients[layer_index]

    def energy(self, layer_index: int) -> float:
        """sum_g sum_jk |<phi_l, w_{jk,lg}>|^2 over the stored index set."""
        return float(np.sum(np.abs(self.coefficients[layer_index]) ** 2))


@dataclass(frozen=True)
class SolverOptions:
    """
    Options shared by the iterative solvers.

    ``adjoint`` picks the weighted adjoint inside the iterations; the
    transpose variant pairs exactly with the discrete forward.
    """
    iterations: int = 5
    step_scale: float = 1.0
    record_residuals: bool = True
    adjoint: AdjointVariant = AdjointVariant.TRANSPOSE
    divergence_factor: float = 10.0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "adjoint", AdjointVariant(self.adjoint))
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigError(f"iterations must be a non-negative integer, got {self.iterations}")
        if not self.step_scale > 0.0:
            raise ConfigError(f"step_scale must be positive, got {self.step_scale}")
        if not self.divergence_factor > 1.0:
            raise ConfigError(f"divergence_factor must exceed 1, got {self.divergence_factor}")


@dataclass(frozen=True, eq=False)
class SolverResult:
    stack: LayerStack
    residuals: Tuple[float, ...]
    iterations: int

    @property
    def final_residual(self) -> float:
        return self.residuals[-1]


def _layer_masks(geometry: SystemGeometry, n: int) -> LayerMasks:
    return get_operator(geometry, n).masks


def _check_layer_field(f: Field2D, layer_index: int, geometry: SystemGeometry) -> None:
    expected = geometry.layer_grid(layer_index, f.grid.n)
    if f.domain is not Domain.LAYER or f.layer != layer_index:
        raise DomainMismatchError(f"Field is not tagged as layer {layer_index}")
    if not math.isclose(f.grid.half_width, expected.half_width, rel_tol=1e-12):
        raise DomainMismatchError(f"Field grid half-width {f.grid.half_width} != c_l T = {expected.half_width}")


def star_sigma(geometry: SystemGeometry) -> np.ndarray:
    """sigma_g = sqrt(sum_l gamma_l c_{l,g}^-2); 1 for every NGS."""
    cone = geometry.cone_factors()
    return np.sqrt(np.sum(geometry.weights[:, None] / cone ** 2, axis=0))


def overlay_bounds(geometry: SystemGeometry, n: int) -> List[Tuple[int, int]]:
    """(min, max) of O_l over the footprint of every layer; the frame bounds of the layer."""
    masks = _layer_masks(geometry, n)
    bounds = []
    for l in range(geometry.n_layers):
        support = masks.support(l)
        values = masks.overlays[l][support]
        bounds.append((int(values.min()), int(values.max())) if values.size else (0, 0))
    return bounds


def frame_function(index: FrameIndex, geometry: SystemGeometry, n: int) -> Field2D:
    """w_{jk,lg} sampled on the n x n grid of layer l."""
    context = layer_context(geometry, index.layer)
    indicator = _layer_masks(geometry, n).indicators[index.layer][index.star]
    w = basis_samples(index.j, index.k, context, n)
    return w.with_values(w.values * indicator)


def dual_frame_eval(index: FrameIndex, geometry: SystemGeometry, n: int) -> Field2D:
    """
    Canonical dual w_{jk,lg} / O_l, zero outside the footprint.

    Raises:
        FrameError: if O_l vanishes anywhere on the support of I_{lg}.
    """
    masks = _layer_masks(geometry, n)
    indicator = masks.indicators[index.layer][index.star]
    overlay = masks.overlays[index.layer]
    if np.any(overlay[indicator] == 0):
        raise FrameError(f"Overlay vanishes on the support of I_({index.layer},{index.star})")
    w = frame_function(index, geometry, n)
    values = np.divide(w.values, overlay, out=np.zeros_like(w.values), where=overlay > 0)
    return w.with_values(values)


def frame_analyze(stack: LayerStack, geometry: Optional[SystemGeometry] = None) -> FrameCoefficients:
    """Frame coefficients <phi_l, w_{jk,lg}> = analyze(phi_l * I_{lg}) for every layer and star."""
    geometry = stack.geometry if geometry is None else geometry
    if geometry != stack.geometry:
        raise DomainMismatchError("Data and geometry disagree")
    masks = _layer_masks(geometry, stack.n)
    out = []
    for l, f in enumerate(stack):
        context = layer_context(geometry, l)
        out.append(np.stack([
            analyze(f.with_values(f.values * indicator), context).coefficients
            for indicator in masks.indicators[l]
        ]))
    return FrameCoefficients(tuple(out))


def frame_operator_apply(f: Field2D, layer_index: int, geometry: SystemGeometry) -> Field2D:
    """S_l f = f * O_l."""
    _check_layer_field(f, layer_index, geometry)
    overlay = _layer_masks(geometry, f.grid.n).overlays[layer_index]
    return f.with_values(f.values * overlay)


def _band_limit(n: int, band: Optional[int]) -> np.ndarray:
    J, K = frequency_grid(n)
    if band is None:
        return np.ones((n, n), dtype=bool)
    return (np.abs(J) <= band) & (np.abs(K) <= band)


def frame_operator_series(f: Field2D, layer_index: int, geometry: SystemGeometry,
                          band: Optional[int] = None) -> Field2D:
    """
    sum_g sum_jk <f, w_{jk,lg}> w_{jk,lg} evaluated by synthesis.

    ``band=None`` sums the complete discrete index set, an integer keeps
    |j|, |k| <= band.
    """
    _check_layer_field(f, layer_index, geometry)
    n = f.grid.n
    context = layer_context(geometry, layer_index)
    keep = _band_limit(n, band)
    total = np.zeros(f.grid.shape, dtype=f.values.dtype if not f.is_real else float)
    for indicator in _layer_masks(geometry, n).indicators[layer_index]:
        spec = analyze(f.with_values(f.values * indicator), context)
        partial = synthesize(spec.with_coefficients(np.where(keep, spec.coefficients, 0.0)), real=f.is_real)
        total = total + partial.values * indicator
    return f.with_values(total)


def dual_expansion(f: Field2D, layer_index: int, geometry: SystemGeometry, band: Optional[int] = None) -> Field2D:
    """sum_g sum_jk <f, w_{jk,lg}> w~_{jk,lg}; reproduces f on the footprint."""
    series = frame_operator_series(f, layer_index, geometry, band)
    overlay = _layer_masks(geometry, f.grid.n).overlays[layer_index]
    values = np.divide(series.values, overlay, out=np.zeros_like(series.values), where=overlay > 0)
    return f.with_values(values)


def frame_inverse_apply(waves: WavefrontSet, geometry: Optional[SystemGeometry] = None,
                        variant: AdjointVariant = AdjointVariant.FORMULA, threads: int = 1) -> LayerStack:
    """
    The explicit frame inverse: sum_g sigma_g^-2 A*_{g,xi} phi_g.

    No series is evaluated; each star's data is shifted back, rescaled and
    averaged over the overlay.
    """
    geometry = waves.geometry if geometry is None else geometry
    if geometry != waves.geometry:
        raise DomainMismatchError("Data and geometry disagree")
    op = get_operator(geometry, waves.n)
    weights = 1.0 / star_sigma(geometry) ** 2
    return op.adjoint(waves, variant, weighted=True, star_weights=weights, threads=threads)


def frame_inverse_series(waves: WavefrontSet, geometry: Optional[SystemGeometry] = None) -> LayerStack:
    """
    Series form of the frame inverse with explicit duals:

        (Ainv phi)_l = sum_g sum_jk sqrt(gamma_l)/(c_l sigma_g^2) exp(-i omega (j a_x + k a_y)) <phi_g, w_jk> w_{jk,l} I_{lg} / O_l

    with a = alpha_g h_l / c_l and omega = pi/T, summed over the complete
    discrete index set. Single-kind star sets only. Shifts off the grid are
    applied exactly as phases, so this differs from ``frame_inverse_apply``
    by its bilinear interpolation error; on grid-aligned shifts they coincide.
    """
    geometry = waves.geometry if geometry is None else geometry
    geometry.require_single_kind("The frame inverse series")
    n = waves.n
    masks = _layer_masks(geometry, n)
    sigma = star_sigma(geometry)
    J, K = frequency_grid(n)
    omega = math.pi / geometry.extension_half_width
    aperture = aperture_context(geometry)
    data = [analyze(f.with_values(np.where(waves.mask, f.values, 0.0)), aperture).coefficients for f in waves]
    layers = []
    for l, layer in enumerate(geometry.layers):
        c = geometry.scale(l)
        context = layer_context(geometry, l)
        total = np.zeros((n, n))
        for g in range(geometry.n_stars):
            ax, ay = geometry.shift(l, g)
            phase = np.exp(-1j * omega * (J * ax + K * ay) / c)
            coefficients = math.sqrt(layer.weight) / (c * sigma[g] ** 2) * phase * data[g]
            total += synthesize(SpectralField(coefficients, context)).values * masks.indicators[l][g]
        overlay = masks.overlays[l]
        layers.append(np.divide(total, overlay, out=np.zeros_like(total), where=overlay > 0))
    return LayerStack.from_arrays(geometry, layers)


def _guard(residuals: Sequence[float], factor: float, solver: str) -> None:
    if not math.isfinite(residuals[-1]):
        raise NumericalError(f"{solver} produced a non-finite residual")
    if residuals[-1] > factor * min(residuals):
        raise DivergenceError(
            f"{solver} diverged: residual {residuals[-1]:.6e} exceeds {factor:g}x its minimum {min(residuals):.6e}",
            residuals=residuals,
        )


def _finish(stack: LayerStack, residuals: List[float], iterations: int, options: SolverOptions) -> SolverResult:
    recorded = tuple(residuals) if options.record_residuals else (residuals[-1],)
    return SolverResult(stack, recorded, iterations)


def iterative_fd(waves: WavefrontSet, geometry: Optional[SystemGeometry] = None,
                 options: Optional[SolverOptions] = None) -> SolverResult:
    """
    phi_{k+1} = phi_k + step_scale * Ainv(phi_data - A phi_k), phi_0 = 0.

    One iteration is the plain frame-decomposition reconstruction with
    ``options.adjoint``; under the default TRANSPOSE variant it divides by
    the discrete overlay sum_g A_gl^T 1, so it matches
    ``frame_inverse_apply(..., variant="transpose")`` rather than the
    FORMULA default there. The residual over the aperture is recorded
    before the first update and after each one.

    Raises:
        DivergenceError: when a residual exceeds ``divergence_factor`` times
            the smallest one seen so far.
    """
    geometry = waves.geometry if geometry is None else geometry
    if geometry != waves.geometry:
        raise DomainMismatchError("Data and geometry disagree")
    options = options or SolverOptions()
    op = get_operator(geometry, waves.n)
    stack = LayerStack.zeros(geometry, waves.n)
    residual = waves
    residuals = [waves_norm(residual)]
    logger.info("iteration %d: |residual| = %.6e", 0, residuals[0])
    for it in range(1, options.iterations + 1):
        update = frame_inverse_apply(residual, geometry, options.adjoint, options.threads)
        stack = stack + options.step_scale * update
        residual = waves - op.forward(stack, options.threads)
        residuals.append(waves_norm(residual))
        logger.info("iteration %d: |residual| = %.6e", it, residuals[-1])
        _guard(residuals, options.divergence_factor, "Iterative FD")
    return _finish(stack, residuals, options.iterations, options)


def gradient_solve(waves: WavefrontSet, geometry: Optional[SystemGeometry] = None,
                   options: Optional[SolverOptions] = None) -> SolverResult:
    """
    Steepest descent on 1/2 |A phi - phi_data|^2 along the weighted adjoint
    of the residual, with the exact line-search step <r, A p> / |A p|^2.

    Stops early when the search direction is not a descent direction or
    its image vanishes.
    """
    geometry = waves.geometry if geometry is None else geometry
    if geometry != waves.geometry:
        raise DomainMismatchError("Data and geometry disagree")
    options = options or SolverOptions()
    op = get_operator(geometry, waves.n)
    stack = LayerStack.zeros(geometry, waves.n)
    residual = waves
    residuals = [waves_norm(residual)]
    logger.info("iteration %d: |residual| = %.6e", 0, residuals[0])
    done = 0
    for it in range(1, options.iterations + 1):
        direction = op.adjoint(residual, options.adjoint, weighted=True, threads=options.threads)
        image = op.forward(direction, options.threads)
        curvature = inner_product_waves(image, image).real
        slope = inner_product_waves(residual, image).real
        if curvature <= 0.0 or slope <= 0.0:
            logger.info("Gradient search stopped at iteration %d (no descent direction)", it)
            break
        step = options.step_scale * slope / curvature
        stack = stack + step * direction
        residual = residual - step * image
        residuals.append(waves_norm(residual))
        done = it
        logger.info("iteration %d: |residual| = %.6e", it, residuals[-1])
        _guard(residuals, options.divergence_factor, "Gradient method")
    return _finish(stack, residuals, done, options)
