#!/usr/bin/env python3
"""
Spectral tests: analyze/synthesize against the scaled bases and Sobolev weights.
"""

import math

import numpy as np
import pytest

from atmotomo import (
    ApertureSpec,
    Domain,
    DomainMismatchError,
    Field2D,
    GridSpec,
    GuideStar,
    LayerSpec,
    SobolevWeight,
    SystemGeometry,
    analyze,
    aperture_context,
    layer_context,
    sobolev_norm,
    sobolev_scale,
    synthesize,
    zero_extend,
)
from atmotomo.spectral import basis_samples, field_norm, in_band_mask, inner_product


def _geometry():
    return SystemGeometry(
        aperture=ApertureSpec(21.0, 5.88),
        stars=(GuideStar(0.0, 0.0),),
        layers=(LayerSpec(0.0, 0.75), LayerSpec(4000.0, 0.15), LayerSpec(12700.0, 0.1)),
        extension_half_width=27.0,
    )


def test_analyze_basis_and_constants():
    """Sampled basis functions analyze to Kronecker deltas; constants to a single DC term"""

    print("🚀 Testing analyze on basis functions")
    print("="*40)

    geometry = _geometry()
    n = 32

    print("📋 Test 1: basis function on the aperture square")
    context = aperture_context(geometry)
    spec = analyze(basis_samples(3, -2, context, n), context)
    expected = np.zeros((n, n), dtype=complex)
    expected[-2 % n, 3] = 1.0
    assert np.allclose(spec.coefficients, expected, atol=1e-12), "Basis function must analyze to a delta"
    assert abs(spec.coefficient(3, -2) - 1.0) < 1e-12, "coefficient(j, k) must read the delta"
    print("✅ Delta coefficient")

    print("\n📋 Test 2: basis function on a weighted layer")
    context = layer_context(geometry, 0)
    assert context.weight == 0.75, "Layer context must carry the layer weight"
    spec = analyze(basis_samples(-5, 7, context, n), context)
    assert abs(spec.coefficient(-5, 7) - 1.0) < 1e-12, "Weighted basis must analyze to 1"
    others = np.abs(spec.coefficients).sum() - abs(spec.coefficient(-5, 7))
    assert others < 1e-10, f"Off-diagonal leakage {others}"
    print("✅ Weighted delta coefficient")

    print("\n📋 Test 3: constant field")
    context = aperture_context(geometry)
    grid = context.grid(n)
    constant = Field2D(grid, np.full(grid.shape, 2.5), Domain.APERTURE)
    spec = analyze(constant, context)
    assert abs(spec.coefficient(0, 0) - 2.5 * 2.0 * 27.0) < 1e-10, "DC coefficient must equal 2T times the value"
    assert np.abs(spec.coefficients).sum() - abs(spec.coefficient(0, 0)) < 1e-10, "Only the DC term may be non-zero"
    print("✅ Constant field analyzed")


def test_round_trip_and_parseval():
    """synthesize inverts analyze and the coefficient norm equals the field norm"""

    print("\n🚀 Testing synthesis and Parseval")
    print("="*40)

    geometry = _geometry()
    rng = np.random.default_rng(7)
    n = 32
    for l in range(geometry.n_layers):
        context = layer_context(geometry, l)
        grid = context.grid(n)
        field = Field2D(grid, rng.standard_normal(grid.shape), Domain.LAYER, l)
        spec = analyze(field, context)
        back = synthesize(spec)
        assert back.is_real, "Real synthesis must return a real field"
        assert np.allclose(back.values, field.values, atol=1e-12), f"Round trip failed on layer {l}"
        coefficient_norm = math.sqrt(float(np.sum(np.abs(spec.coefficients) ** 2)))
        norm = field_norm(field, context.weight)
        assert abs(coefficient_norm - norm) < 1e-10 * norm, f"Parseval broken on layer {l}"
        print(f"✅ Layer {l}: round trip and Parseval hold")


def test_inner_product_orthonormality():
    """Sampled basis functions are orthonormal in the weighted Riemann-sum inner product"""

    print("\n🚀 Testing orthonormality")
    print("="*40)

    geometry = _geometry()
    context = layer_context(geometry, 2)
    n = 16
    w1 = basis_samples(1, 2, context, n)
    w2 = basis_samples(-3, 0, context, n)
    assert abs(inner_product(w1, w1, context.weight) - 1.0) < 1e-12, "Basis function must have unit norm"
    assert abs(inner_product(w1, w2, context.weight)) < 1e-12, "Distinct basis functions must be orthogonal"
    print("✅ Orthonormal")


def test_domain_mismatch():
    """analyze refuses fields from a different plane or layer"""

    print("\n🚀 Testing domain checks")
    print("="*40)

    geometry = _geometry()
    n = 16
    aperture = aperture_context(geometry)
    layer = layer_context(geometry, 1)
    field = Field2D(aperture.grid(n), np.zeros((n, n)), Domain.APERTURE)
    with pytest.raises(DomainMismatchError):
        analyze(field, layer)
    wrong_layer = Field2D(layer.grid(n), np.zeros((n, n)), Domain.LAYER, 2)
    with pytest.raises(DomainMismatchError):
        analyze(wrong_layer, layer)
    with pytest.raises(DomainMismatchError):
        Field2D(GridSpec(n, 27.0), np.zeros((n, n + 2)), Domain.APERTURE)
    print("✅ Mismatches rejected")


def test_sobolev_weights():
    """Factors, scaling direction and norms"""

    print("\n🚀 Testing Sobolev weights")
    print("="*40)

    weight = SobolevWeight(11.0 / 6.0, 0.01866)
    value = weight.factor(3, 4)
    assert abs(value - (1.0 + 0.01866 * 25.0) ** (-11.0 / 12.0)) < 1e-15, "Factor must follow the closed form"
    assert abs(value - 0.704) < 1e-3, f"Factor {value} not near 0.704"
    assert SobolevWeight(0.0, 0.5).factor(10, 10) == 1.0, "s = 0 must leave coefficients unchanged"
    print("✅ Factor formula")

    geometry = _geometry()
    context = aperture_context(geometry)
    n = 16
    rng = np.random.default_rng(3)
    spec = analyze(Field2D(context.grid(n), rng.standard_normal((n, n)), Domain.APERTURE), context)
    scaled = sobolev_scale(spec, 1.5, 0.02)
    assert scaled.sobolev_order == 1.5, "Applied order must be tracked"
    restored = sobolev_scale(scaled, 1.5, 0.02, "remove")
    assert np.allclose(restored.coefficients, spec.coefficients, rtol=1e-12, atol=1e-14), "remove must undo apply"
    print("✅ apply/remove are inverse")

    band = in_band_mask(n)
    l2 = math.sqrt(float(np.sum(np.abs(spec.coefficients[band]) ** 2)))
    assert abs(sobolev_norm(spec, 0.0, 0.02) - l2) < 1e-12 * l2, "H^0 norm is the in-band l2 norm"
    assert sobolev_norm(spec, 1.0, 0.02) > l2, "H^1 norm dominates the l2 norm"
    assert abs(sobolev_norm(scaled, 0.0, 0.02) - sobolev_norm(spec, -1.5, 0.02)) < 1e-10, \
        "Scaling by the factor equals the H^-s norm"
    print("✅ Norms consistent")


def test_zero_extend():
    """Aperture data extended by zero"""

    print("\n🚀 Testing zero extension")
    print("="*40)

    grid = GridSpec(8, 4.0)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[2:5, 3:6] = True
    full = zero_extend(np.ones(grid.shape), mask, grid)
    assert full.values.sum() == 9.0 and not full.values[~mask].any(), "Outside samples must be dropped"
    packed = zero_extend(np.arange(9.0), mask, grid)
    assert np.array_equal(packed.values[mask], np.arange(9.0)), "Packed samples fill the mask in row-major order"
    with pytest.raises(DomainMismatchError):
        zero_extend(np.arange(5.0), mask, grid)
    print("✅ Zero extension works for full and packed input")
