"""
The atmospheric tomography operator

    (A_g phi)(r) = sum_l phi_l(c_{l,g} r + alpha_g h_l),    r in the aperture,

its adjoints and the periodic operator used to cross-check the spectral
solvers.

Off-grid evaluations use bilinear interpolation with periodic wrap, stored
as one sparse 4-tap matrix per (star, layer) pair. Those stencils are built
once per (geometry, n) by ``TomographyOperator`` and shared read-only.
"""

import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from scipy import sparse

from .core import (
    DomainMismatchError,
    GridSpec,
    LayerMasks,
    NumericalError,
    SystemGeometry,
    build_masks,
    require_extent,
)
from .core import beta as layer_beta
from .spectral import (
    Domain,
    Field2D,
    SobolevWeight,
    SpectralField,
    analyze,
    aperture_context,
    frequency_grid,
    in_band_mask,
    layer_context,
    sobolev_factors,
    synthesize,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Offsets closer than this to a grid node (in cells) snap onto it.
_SNAP = 1e-9


class AdjointVariant(str, Enum):
    """Exact transpose of the discrete forward, or the continuum formula sampled on the grid."""
    TRANSPOSE = "transpose"
    FORMULA = "formula"

    @classmethod
    def list(cls) -> List[str]:
        return [variant.value for variant in cls]


def parallel_map(func: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Map ``func`` over ``items``, on a thread pool when ``threads > 1``."""
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


@dataclass(frozen=True, eq=False)
class LayerStack:
    """One real or complex field per layer, on the squares c_l*[-T, T)^2."""
    geometry: SystemGeometry
    fields: Tuple[Field2D, ...]

    def __post_init__(self):
        fields = tuple(self.fields)
        object.__setattr__(self, "fields", fields)
        if len(fields) != self.geometry.n_layers:
            raise DomainMismatchError(f"Stack has {len(fields)} layers, geometry has {self.geometry.n_layers}")
        sizes = {f.grid.n for f in fields}
        if len(sizes) != 1:
            raise DomainMismatchError(f"Layer fields use different grid sizes {sorted(sizes)}")
        for l, f in enumerate(fields):
            if f.domain is not Domain.LAYER or f.layer != l:
                raise DomainMismatchError(f"Field {l} is not tagged as layer {l}")
            expected = self.geometry.scale(l) * self.geometry.extension_half_width
            if not math.isclose(f.grid.half_width, expected, rel_tol=1e-12):
                raise DomainMismatchError(f"Layer {l} grid half-width {f.grid.half_width} != c_l T = {expected}")

    @classmethod
    def from_arrays(cls, geometry: SystemGeometry, arrays: Sequence[np.ndarray]) -> "LayerStack":
        arrays = [np.asarray(a) for a in arrays]
        if len(arrays) != geometry.n_layers:
            raise DomainMismatchError(f"Expected {geometry.n_layers} layer arrays, got {len(arrays)}")
        return cls(geometry, tuple(
            Field2D(geometry.layer_grid(l, a.shape[0]), a, Domain.LAYER, l) for l, a in enumerate(arrays)
        ))

    @classmethod
    def zeros(cls, geometry: SystemGeometry, n: int) -> "LayerStack":
        return cls.from_arrays(geometry, [np.zeros((n, n)) for _ in range(geometry.n_layers)])

    @property
    def n(self) -> int:
        return self.fields[0].grid.n

    def as_array(self) -> np.ndarray:
        return np.stack([f.values for f in self.fields])

    def map(self, func: Callable[[int, np.ndarray], np.ndarray]) -> "LayerStack":
        return LayerStack.from_arrays(self.geometry, [func(l, f.values) for l, f in enumerate(self.fields)])

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self) -> Iterator[Field2D]:
        return iter(self.fields)

    def __getitem__(self, index: int) -> Field2D:
        return self.fields[index]

    def __add__(self, other: "LayerStack") -> "LayerStack":
        return LayerStack.from_arrays(self.geometry, [a.values + b.values for a, b in zip(self, other)])

    def __sub__(self, other: "LayerStack") -> "LayerStack":
        return LayerStack.from_arrays(self.geometry, [a.values - b.values for a, b in zip(self, other)])

    def __mul__(self, factor: float) -> "LayerStack":
        return LayerStack.from_arrays(self.geometry, [factor * f.values for f in self])

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class WavefrontSet:
    """One field per guide star on the aperture square, zero outside the aperture."""
    geometry: SystemGeometry
    fields: Tuple[Field2D, ...]
    mask: np.ndarray

    def __post_init__(self):
        fields = tuple(self.fields)
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if len(fields) != self.geometry.n_stars:
            raise DomainMismatchError(f"Wavefront set has {len(fields)} stars, geometry has {self.geometry.n_stars}")
        for g, f in enumerate(fields):
            if f.domain is not Domain.APERTURE:
                raise DomainMismatchError(f"Wavefront {g} is not an aperture-plane field")
            if not math.isclose(f.grid.half_width, self.geometry.extension_half_width, rel_tol=1e-12):
                raise DomainMismatchError(f"Wavefront {g} grid does not cover [-T, T)^2")
            if f.grid.shape != self.mask.shape:
                raise DomainMismatchError(f"Wavefront {g} grid does not match the aperture mask")

    @classmethod
    def from_arrays(cls, geometry: SystemGeometry, arrays: Sequence[np.ndarray],
                    mask: Optional[np.ndarray] = None) -> "WavefrontSet":
        """Wrap per-star arrays; samples outside the aperture are zeroed."""
        arrays = [np.asarray(a) for a in arrays]
        if len(arrays) != geometry.n_stars:
            raise DomainMismatchError(f"Expected {geometry.n_stars} wavefront arrays, got {len(arrays)}")
        grid = geometry.aperture_grid(arrays[0].shape[0])
        if mask is None:
            X, Y = grid.coordinates()
            mask = geometry.aperture.contains(X, Y)
        return cls(geometry, tuple(Field2D(grid, np.where(mask, a, 0.0), Domain.APERTURE) for a in arrays), mask)

    @property
    def n(self) -> int:
        return self.fields[0].grid.n

    @property
    def grid(self) -> GridSpec:
        return self.fields[0].grid

    def as_array(self) -> np.ndarray:
        return np.stack([f.values for f in self.fields])

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self) -> Iterator[Field2D]:
        return iter(self.fields)

    def __getitem__(self, index: int) -> Field2D:
        return self.fields[index]

    def __add__(self, other: "WavefrontSet") -> "WavefrontSet":
        return WavefrontSet.from_arrays(self.geometry, [a.values + b.values for a, b in zip(self, other)], self.mask)

    def __sub__(self, other: "WavefrontSet") -> "WavefrontSet":
        return WavefrontSet.from_arrays(self.geometry, [a.values - b.values for a, b in zip(self, other)], self.mask)

    def __mul__(self, factor: float) -> "WavefrontSet":
        return WavefrontSet.from_arrays(self.geometry, [factor * f.values for f in self], self.mask)

    __rmul__ = __mul__


def bilinear_matrix(qx: np.ndarray, qy: np.ndarray, rows: np.ndarray, grid: GridSpec, n_rows: int) -> sparse.csr_matrix:
    """
    Sparse bilinear interpolation on a periodic grid.

    Row ``rows[i]`` of the result evaluates a flattened grid field at the
    point (qx[i], qy[i]); all other rows are empty.
    """
    n = grid.n
    u = (np.asarray(qx, dtype=float) + grid.half_width) / grid.spacing
    v = (np.asarray(qy, dtype=float) + grid.half_width) / grid.spacing
    for w in (u, v):
        nearest = np.rint(w)
        snap = np.abs(w - nearest) < _SNAP
        w[snap] = nearest[snap]
    i0, j0 = np.floor(u), np.floor(v)
    t, s = u - i0, v - j0
    i0 = i0.astype(np.int64) % n
    j0 = j0.astype(np.int64) % n
    i1, j1 = (i0 + 1) % n, (j0 + 1) % n
    cols = np.concatenate([j0 * n + i0, j0 * n + i1, j1 * n + i0, j1 * n + i1])
    weights = np.concatenate([(1 - t) * (1 - s), t * (1 - s), (1 - t) * s, t * s])
    row_index = np.tile(np.asarray(rows, dtype=np.int64), 4)
    keep = weights != 0.0
    return sparse.csr_matrix((weights[keep], (row_index[keep], cols[keep])), shape=(n_rows, n * n))


class TomographyOperator:
    """
    Discretized A on an n x n grid for one geometry.

    Holds the footprint masks, the forward stencils (aperture samples ->
    layer grid), their transposes, and the stencils of the continuum adjoint
    formula (layer samples -> aperture grid).

    Example:
        op = TomographyOperator(geometry, 64)
        waves = op.forward(stack)
        back = op.adjoint(waves)
    """

    def __init__(self, geometry: SystemGeometry, n: int, threads: int = 1):
        require_extent(geometry)
        self.geometry = geometry
        self.n = int(n)
        self.threads = threads
        self.masks: LayerMasks = build_masks(geometry, self.n)
        self.aperture_grid = geometry.aperture_grid(self.n)
        self.layer_grids = self.masks.grids
        self.cone = geometry.cone_factors()
        flat_mask = np.flatnonzero(self.masks.aperture.ravel())
        X, Y = self.aperture_grid.coordinates()
        ax, ay = X.ravel()[flat_mask], Y.ravel()[flat_mask]
        size = self.n * self.n
        self._forward = [
            [
                bilinear_matrix(
                    self.cone[l, g] * ax + geometry.shift(l, g)[0],
                    self.cone[l, g] * ay + geometry.shift(l, g)[1],
                    flat_mask, self.layer_grids[l], size,
                )
                for l in range(geometry.n_layers)
            ]
            for g in range(geometry.n_stars)
        ]
        self._transpose = [[m.T.tocsr() for m in row] for row in self._forward]
        # (h_A / h_l)^2 = 1 / c_l^2 turns the transpose into the weighted-inner-product adjoint
        self._area_ratio = np.array([
            self.aperture_grid.cell_area / grid.cell_area for grid in self.layer_grids
        ])
        ones = self.masks.aperture.ravel().astype(float)
        self.discrete_overlays = tuple(
            sum(self._transpose[g][l] @ ones for g in range(geometry.n_stars)).reshape(self.n, self.n)
            for l in range(geometry.n_layers)
        )
        self._formula: Optional[List[List[sparse.csr_matrix]]] = None
        logger.debug("Built tomography operator: G=%d, L=%d, n=%d", geometry.n_stars, geometry.n_layers, self.n)

    def _formula_stencils(self) -> List[List[sparse.csr_matrix]]:
        if self._formula is None:
            size = self.n * self.n
            stencils = []
            for g in range(self.geometry.n_stars):
                row = []
                for l, grid in enumerate(self.layer_grids):
                    support = np.flatnonzero(self.masks.indicators[l][g].ravel())
                    X, Y = grid.coordinates()
                    sx, sy = self.geometry.shift(l, g)
                    c = self.cone[l, g]
                    row.append(bilinear_matrix(
                        (X.ravel()[support] - sx) / c, (Y.ravel()[support] - sy) / c,
                        support, self.aperture_grid, size,
                    ))
                stencils.append(row)
            self._formula = stencils
        return self._formula

    def _check_stack(self, stack: LayerStack) -> None:
        if stack.geometry != self.geometry:
            raise DomainMismatchError("Layer stack belongs to a different geometry")
        if stack.n != self.n:
            raise DomainMismatchError(f"Layer stack uses n={stack.n}, operator n={self.n}")

    def _check_waves(self, waves: WavefrontSet) -> None:
        if waves.geometry != self.geometry:
            raise DomainMismatchError("Wavefront set belongs to a different geometry")
        if waves.n != self.n:
            raise DomainMismatchError(f"Wavefront set uses n={waves.n}, operator n={self.n}")

    def forward(self, stack: LayerStack, threads: Optional[int] = None) -> WavefrontSet:
        self._check_stack(stack)
        layers = [f.values.ravel() for f in stack]

        def one_star(g: int) -> np.ndarray:
            return sum(self._forward[g][l] @ layers[l] for l in range(len(layers))).reshape(self.n, self.n)

        arrays = parallel_map(one_star, list(range(self.geometry.n_stars)), threads or self.threads)
        return WavefrontSet(
            self.geometry,
            tuple(Field2D(self.aperture_grid, a, Domain.APERTURE) for a in arrays),
            self.masks.aperture,
        )

    def adjoint_components(self, waves: WavefrontSet, variant: AdjointVariant = AdjointVariant.TRANSPOSE,
                           threads: Optional[int] = None) -> np.ndarray:
        """Per-star adjoint contributions A*_g phi_g, shape (G, L, n, n)."""
        self._check_waves(waves)
        variant = AdjointVariant(variant)
        data = [np.where(self.masks.aperture, f.values, 0.0).ravel() for f in waves]
        G, L = self.geometry.n_stars, self.geometry.n_layers
        weights = self.geometry.weights

        def one_layer(l: int) -> np.ndarray:
            out = []
            for g in range(G):
                if variant is AdjointVariant.TRANSPOSE:
                    values = weights[l] * self._area_ratio[l] * (self._transpose[g][l] @ data[g])
                else:
                    values = weights[l] / self.cone[l, g] ** 2 * (self._formula_stencils()[g][l] @ data[g])
                out.append(values.reshape(self.n, self.n))
            return np.stack(out)

        if variant is AdjointVariant.FORMULA:
            self._formula_stencils()
        per_layer = parallel_map(one_layer, list(range(L)), threads or self.threads)
        return np.stack(per_layer, axis=1)

    def overlay(self, layer_index: int, variant: AdjointVariant) -> np.ndarray:
        """O_l for the formula variant, the discrete overlay sum_g A_{gl}^T 1 for the transpose."""
        if AdjointVariant(variant) is AdjointVariant.TRANSPOSE:
            return self.discrete_overlays[layer_index]
        return self.masks.overlays[layer_index].astype(float)

    def adjoint(self, waves: WavefrontSet, variant: AdjointVariant = AdjointVariant.TRANSPOSE,
                weighted: bool = False, star_weights: Optional[Sequence[float]] = None,
                threads: Optional[int] = None) -> LayerStack:
        """
        A* (or A*_xi with ``weighted=True``) applied to a wavefront set.

        ``star_weights`` scales each star's contribution before summation.
        """
        components = self.adjoint_components(waves, variant, threads)
        if star_weights is not None:
            components = components * np.asarray(star_weights, dtype=float)[:, None, None, None]
        layers = components.sum(axis=0)
        if weighted:
            for l in range(self.geometry.n_layers):
                overlay = self.overlay(l, variant)
                layers[l] = np.divide(layers[l], overlay, out=np.zeros_like(layers[l]), where=overlay > 0)
        return LayerStack.from_arrays(self.geometry, list(layers))


@functools.lru_cache(maxsize=16)
def get_operator(geometry: SystemGeometry, n: int) -> TomographyOperator:
    """Shared operator for (geometry, n)."""
    return TomographyOperator(geometry, n)


def _operator_for(geometry: Optional[SystemGeometry], fallback: SystemGeometry, n: int) -> TomographyOperator:
    geometry = fallback if geometry is None else geometry
    if geometry != fallback:
        raise DomainMismatchError("Data and geometry disagree")
    return get_operator(geometry, n)


def apply_forward(stack: LayerStack, geometry: Optional[SystemGeometry] = None, threads: int = 1) -> WavefrontSet:
    """A phi: bilinear samples of every layer along every guide-star direction, zero outside the aperture."""
    op = _operator_for(geometry, stack.geometry, stack.n)
    return op.forward(stack, threads)


def apply_adjoint(waves: WavefrontSet, geometry: Optional[SystemGeometry] = None,
                  variant: AdjointVariant = AdjointVariant.TRANSPOSE, threads: int = 1) -> LayerStack:
    op = _operator_for(geometry, waves.geometry, waves.n)
    return op.adjoint(waves, variant, threads=threads)


def apply_weighted_adjoint(waves: WavefrontSet, geometry: Optional[SystemGeometry] = None,
                           variant: AdjointVariant = AdjointVariant.FORMULA, threads: int = 1) -> LayerStack:
    """A*_xi: the adjoint divided by the overlay on each layer footprint, zero elsewhere."""
    op = _operator_for(geometry, waves.geometry, waves.n)
    return op.adjoint(waves, variant, weighted=True, threads=threads)


def inner_product_layers(a: LayerStack, b: LayerStack) -> complex:
    """sum_l (1/gamma_l) * Riemann sum of a_l * conj(b_l) on c_l*[-T, T)^2."""
    total = 0.0
    for l, (fa, fb) in enumerate(zip(a, b)):
        weight = a.geometry.layers[l].weight
        total += np.sum(fa.values * np.conj(fb.values)) * fa.grid.cell_area / weight
    return complex(total)


def inner_product_waves(a: WavefrontSet, b: WavefrontSet) -> complex:
    """sum_g Riemann sum of a_g * conj(b_g) over the aperture samples."""
    mask = a.mask
    total = sum(np.sum((fa.values * np.conj(fb.values))[mask]) for fa, fb in zip(a, b))
    return complex(total * a.grid.cell_area)


def waves_norm(waves: WavefrontSet) -> float:
    return math.sqrt(max(inner_product_waves(waves, waves).real, 0.0))


def stack_norm(stack: LayerStack) -> float:
    return math.sqrt(max(inner_product_layers(stack, stack).real, 0.0))


def frequency_symbol(geometry: SystemGeometry, s: float, J: np.ndarray, K: np.ndarray) -> np.ndarray:
    """
    Matrices of the periodic operator in the H^s bases at frequencies (J, K).

    Returns an array of shape J.shape + (G, L) whose entry (g, l) is
    (1 + beta_l |(j,k)|^2)^(-s/2) * sqrt(gamma_l)/c_l * exp(i*omega*(j*a_x + k*a_y)/c_l)
    with (a_x, a_y) = alpha_g h_l and omega = pi/T.
    """
    geometry.require_single_kind("The periodic operator")
    J, K = np.asarray(J), np.asarray(K)
    omega = math.pi / geometry.extension_half_width
    G, L = geometry.n_stars, geometry.n_layers
    out = np.empty(J.shape + (G, L), dtype=complex)
    for l, layer in enumerate(geometry.layers):
        c = geometry.scale(l)
        factor = SobolevWeight(s, layer_beta(l, geometry)).factor(J, K) * math.sqrt(layer.weight) / c
        for g in range(G):
            sx, sy = geometry.shift(l, g)
            out[..., g, l] = factor * np.exp(1j * omega * (J * sx + K * sy) / c)
    return out


def frequency_matrices(geometry: SystemGeometry, s: float, n: int) -> np.ndarray:
    """Frequency matrices on the full n x n index set, shape (n, n, G, L) in FFT order [k, j]."""
    J, K = frequency_grid(n)
    return frequency_symbol(geometry, s, J, K)


def apply_periodic_forward(stack: LayerStack, geometry: Optional[SystemGeometry] = None, s: float = 0.0) -> WavefrontSet:
    """
    The periodic operator on [-T, T)^2: per in-band frequency the matrix
    product of the H^s coefficients with the frequency matrix, synthesized
    without aperture masking.
    """
    geometry = stack.geometry if geometry is None else geometry
    if geometry != stack.geometry:
        raise DomainMismatchError("Data and geometry disagree")
    n = stack.n
    matrices = frequency_matrices(geometry, s, n)
    coefficients = np.stack([
        analyze(f, layer_context(geometry, l)).coefficients / sobolev_factors(n, s, layer_beta(l, geometry))
        for l, f in enumerate(stack)
    ])
    if not np.all(np.isfinite(coefficients)):
        raise NumericalError("Non-finite layer coefficients")
    waves = np.einsum("kjgl,lkj->gkj", matrices, coefficients)
    waves[:, ~in_band_mask(n)] = 0.0
    context = aperture_context(geometry)
    fields = tuple(synthesize(SpectralField(w, context)) for w in waves)
    grid = geometry.aperture_grid(n)
    return WavefrontSet(geometry, fields, np.ones(grid.shape, dtype=bool))
