"""
Synthetic multi-layer turbulence.

Each layer screen is drawn as a periodic field on its square c_l*[-T, T)^2:
complex Gaussian spectral coefficients are shaped by the von Karman-type
power law (|kappa|^2 + 1/L0^2)^(exponent/2), the piston mode is removed, and
the real part of the inverse FFT is rescaled so that layer l carries the
variance gamma_l * (r0_ref / r0)^(5/3).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .core import ConfigError, GridSpec, SystemGeometry
from .forward import LayerStack, parallel_map
from .spectral import Domain, Field2D, frequency_grid

logger = logging.getLogger(__name__)

#: Fried parameter (m) at which the screens carry unit total variance.
REFERENCE_FRIED_PARAMETER = 0.129

KOLMOGOROV_EXPONENT = -11.0 / 3.0


@dataclass(frozen=True)
class TurbulenceParams:
    fried_parameter: float = REFERENCE_FRIED_PARAMETER
    spectral_exponent: float = KOLMOGOROV_EXPONENT
    outer_scale: float = 1.0e4
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.fried_parameter) and self.fried_parameter > 0.0):
            raise ConfigError(f"Fried parameter must be positive, got {self.fried_parameter}")
        if not self.spectral_exponent < -2.0:
            raise ConfigError(f"Spectral exponent must be below -2, got {self.spectral_exponent}")
        if not self.outer_scale > 0.0:
            raise ConfigError(f"Outer scale must be positive, got {self.outer_scale}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"Seed must be a non-negative integer, got {self.seed}")

    @property
    def total_variance(self) -> float:
        return (REFERENCE_FRIED_PARAMETER / self.fried_parameter) ** (5.0 / 3.0)

    def to_dict(self) -> Dict[str, float]:
        return {
            "fried_parameter": self.fried_parameter,
            "spectral_exponent": self.spectral_exponent,
            "outer_scale": self.outer_scale,
            "seed": int(self.seed),
        }


@dataclass(frozen=True, eq=False)
class ScreenSet:
    stack: LayerStack
    params: TurbulenceParams

    @property
    def seed(self) -> int:
        return int(self.params.seed)

    def layer_variances(self) -> np.ndarray:
        return np.array([float(np.var(f.values)) for f in self.stack])


def _layer_screen(grid: GridSpec, params: TurbulenceParams, rng: np.random.Generator) -> np.ndarray:
    n = grid.n
    J, K = frequency_grid(n)
    kappa2 = (J * J + K * K) / (2.0 * grid.half_width) ** 2
    amplitude = np.sqrt((kappa2 + 1.0 / params.outer_scale ** 2) ** (0.5 * params.spectral_exponent))
    amplitude[0, 0] = 0.0
    noise = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / math.sqrt(2.0)
    screen = np.fft.ifft2(noise * amplitude).real
    return screen - screen.mean()


def generate_screens(params: TurbulenceParams, geometry: SystemGeometry,
                     grids: Union[int, Sequence[GridSpec]], threads: int = 1) -> ScreenSet:
    """
    One screen per layer, deterministic for a fixed seed.

    Layer l draws from the l-th child of ``SeedSequence(seed)``, so adding
    layers never changes the earlier screens.

    Raises:
        ConfigError: when the outer scale does not exceed a grid spacing.
    """
    if isinstance(grids, (int, np.integer)):
        grids = [geometry.layer_grid(l, int(grids)) for l in range(geometry.n_layers)]
    grids = list(grids)
    if len(grids) != geometry.n_layers:
        raise ConfigError(f"Expected {geometry.n_layers} layer grids, got {len(grids)}")
    for l, grid in enumerate(grids):
        if params.outer_scale <= grid.spacing:
            raise ConfigError(
                f"Outer scale {params.outer_scale} m does not exceed the spacing {grid.spacing:.4g} m of layer {l}"
            )
    streams = np.random.SeedSequence(int(params.seed)).spawn(geometry.n_layers)
    total = params.total_variance

    def one_layer(l: int) -> np.ndarray:
        screen = _layer_screen(grids[l], params, np.random.default_rng(streams[l]))
        target = geometry.layers[l].weight * total
        variance = float(np.var(screen))
        if variance > 0.0:
            screen = screen * math.sqrt(target / variance)
        return screen - screen.mean()

    arrays = parallel_map(one_layer, list(range(geometry.n_layers)), threads)
    stack = LayerStack(geometry, tuple(Field2D(grid, a, Domain.LAYER, l) for l, (grid, a) in enumerate(zip(grids, arrays))))
    logger.info("Generated %d screens (seed=%d, r0=%.4g m, exponent=%.4g)",
                geometry.n_layers, params.seed, params.fried_parameter, params.spectral_exponent)
    return ScreenSet(stack, params)


def white_noise_screen(grid: GridSpec, seed: int, domain: Domain = Domain.APERTURE,
                       layer: Optional[int] = None) -> Field2D:
    rng = np.random.default_rng(seed)
    return Field2D(grid, rng.standard_normal(grid.shape), domain, layer)


@dataclass(frozen=True, eq=False)
class RegularityProbe:
    slope: float
    intercept: float
    radii: np.ndarray
    power: np.ndarray


def sobolev_regularity_probe(screen: Field2D, band: Optional[Tuple[int, int]] = None) -> RegularityProbe:
    """
    Log-log slope of the shell-averaged power |c_jk|^2 against |(j, k)|.

    Power is averaged over integer radial shells; the fit runs over the
    shells in ``band`` (default [4, n/4]). The slope estimates the spectral
    exponent of the screen.
    """
    n = screen.grid.n
    low, high = band if band is not None else (4, n // 4)
    if not 1 <= low < high:
        raise ConfigError(f"Invalid fit band ({low}, {high})")
    power = np.abs(np.fft.fft2(screen.values)) ** 2
    J, K = frequency_grid(n)
    radius = np.hypot(J, K)
    shell = np.rint(radius).astype(np.int64)
    radii, means = [], []
    for r in range(low, high + 1):
        members = shell == r
        if np.any(members):
            radii.append(float(radius[members].mean()))
            means.append(float(power[members].mean()))
    radii, means = np.array(radii), np.array(means)
    positive = means > 0.0
    if np.count_nonzero(positive) < 2:
        return RegularityProbe(float("nan"), float("nan"), radii, means)
    slope, intercept = np.polyfit(np.log(radii[positive]), np.log(means[positive]), 1)
    return RegularityProbe(float(slope), float(intercept), radii, means)
