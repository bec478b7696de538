#!/usr/bin/env python3
"""
Turbulence tests: seeded screens, layer variances, independence and spectral slope.
"""

import numpy as np
import pytest

from atmotomo import (
    ApertureSpec,
    ConfigError,
    GuideStar,
    LayerSpec,
    SystemGeometry,
    TurbulenceParams,
    generate_screens,
    sobolev_regularity_probe,
)
from atmotomo.spectral import Domain
from atmotomo.turbulence import white_noise_screen


def _geometry(layers):
    return SystemGeometry(
        aperture=ApertureSpec(4.0),
        stars=(GuideStar(0.0, 0.0),),
        layers=tuple(LayerSpec(h, w) for h, w in layers),
        extension_half_width=8.0,
    )


def _normalized(values):
    return (values - values.mean()) / values.std()


def test_screens_are_deterministic():
    """Same seed, same screens; different seed, different screens"""

    print("🚀 Testing screen determinism")
    print("="*40)

    geometry = _geometry(((0.0, 0.6), (5000.0, 0.4)))
    first = generate_screens(TurbulenceParams(seed=7), geometry, 32)
    second = generate_screens(TurbulenceParams(seed=7), geometry, 32, threads=2)
    other = generate_screens(TurbulenceParams(seed=8), geometry, 32)
    assert np.array_equal(first.stack.as_array(), second.stack.as_array()), "Seeded screens must repeat bit for bit"
    assert not np.allclose(first.stack.as_array(), other.stack.as_array()), "Different seeds must differ"
    assert first.seed == 7, "ScreenSet keeps the seed"
    print("✅ Deterministic and seed-dependent")


def test_layer_variances():
    """Layer l carries gamma_l * (0.129/r0)^(5/3) with zero mean"""

    print("\n🚀 Testing layer variances")
    print("="*40)

    geometry = _geometry(((0.0, 0.75), (4000.0, 0.15), (7000.0, 0.1)))
    for r0 in (0.129, 0.1):
        screens = generate_screens(TurbulenceParams(fried_parameter=r0, seed=3), geometry, 32)
        expected = geometry.weights * (0.129 / r0) ** (5.0 / 3.0)
        assert np.allclose(screens.layer_variances(), expected, rtol=1e-12), f"Variances wrong for r0={r0}"
        assert all(abs(f.values.mean()) < 1e-12 for f in screens.stack), "Screens must have zero mean"
        print(f"✅ r0 = {r0}: variances {np.round(screens.layer_variances(), 4)}")


def test_adding_layers_keeps_earlier_screens():
    """Layer l draws from its own child stream"""

    print("\n🚀 Testing per-layer streams")
    print("="*40)

    small = generate_screens(TurbulenceParams(seed=11), _geometry(((0.0, 0.6), (5000.0, 0.4))), 32)
    large = generate_screens(TurbulenceParams(seed=11), _geometry(((0.0, 0.5), (5000.0, 0.3), (7000.0, 0.2))), 32)
    for l in range(2):
        assert np.allclose(_normalized(small.stack[l].values), _normalized(large.stack[l].values), atol=1e-12), \
            f"Layer {l} changed when a layer was added"
    print("✅ Earlier layers unchanged up to the variance scaling")


def test_layers_are_independent():
    """Distinct layers are uncorrelated"""

    print("\n🚀 Testing layer independence")
    print("="*40)

    geometry = _geometry(((0.0, 0.5), (5000.0, 0.5)))
    screens = generate_screens(TurbulenceParams(outer_scale=1.0, seed=5), geometry, 64)
    a, b = (f.values.ravel() for f in screens.stack)
    correlation = float(np.corrcoef(a, b)[0, 1])
    print(f"📋 correlation {correlation:.4f}")
    assert abs(correlation) < 0.2, f"Layers look correlated ({correlation})"
    print("✅ Uncorrelated")


def test_spectral_slope():
    """Shell-averaged power follows the configured exponent"""

    print("\n🚀 Testing the regularity probe")
    print("="*40)

    geometry = _geometry(((0.0, 1.0),))
    screens = generate_screens(TurbulenceParams(seed=13), geometry, 128)
    probe = sobolev_regularity_probe(screens.stack[0])
    print(f"📋 fitted slope {probe.slope:.3f}")
    assert abs(probe.slope + 11.0 / 3.0) < 0.3, f"Slope {probe.slope} far from -11/3"

    noise = white_noise_screen(geometry.layer_grid(0, 128), 13, Domain.LAYER, 0)
    flat = sobolev_regularity_probe(noise)
    assert abs(flat.slope) < 0.3, f"White noise must have a flat spectrum, got {flat.slope}"
    print("✅ Kolmogorov and white spectra recognized")

    with pytest.raises(ConfigError):
        sobolev_regularity_probe(noise, band=(8, 4))


def test_invalid_parameters():
    """Non-physical parameters raise ConfigError"""

    print("\n🚀 Testing parameter validation")
    print("="*40)

    for kwargs in ({"fried_parameter": 0.0}, {"spectral_exponent": -1.0}, {"outer_scale": -1.0}, {"seed": -1}):
        with pytest.raises(ConfigError):
            TurbulenceParams(**kwargs)
    with pytest.raises(ConfigError):
        generate_screens(TurbulenceParams(outer_scale=0.1), _geometry(((0.0, 1.0),)), 16)
    print("✅ Invalid parameters rejected")
