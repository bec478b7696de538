#!/usr/bin/env python3
"""
SVTD tests: filters, per-frequency decompositions, exact reconstruction,
the binary cache, Picard and well-posedness diagnostics.
"""

import json
import math
import tempfile
from pathlib import Path

import numpy as np
import pytest

from atmotomo import (
    ApertureSpec,
    CacheMismatchError,
    ConfigError,
    FilterSpec,
    GridFormatError,
    GuideStar,
    LayerSpec,
    LayerStack,
    MixedGeometryError,
    StarKind,
    SystemGeometry,
    WavefrontSet,
    apply_periodic_forward,
    decompose_all,
    load_or_build_cache,
    picard_diagnostic,
    reconstruct,
    ring_asterism,
    wellposedness_scan,
)
from atmotomo.spectral import frequency_grid, sobolev_factors
from atmotomo.svtd import (
    CACHE_DIR_ENV,
    build_matrix,
    cache_path,
    encode_cache,
    load_cache,
    save_cache,
    tikhonov_gain,
)


def _small(T=8.0):
    return SystemGeometry(
        aperture=ApertureSpec(4.0),
        stars=ring_asterism(3, 60.0),
        layers=(LayerSpec(0.0, 0.6), LayerSpec(5000.0, 0.4)),
        extension_half_width=T,
    )


def _ngs6():
    return SystemGeometry(
        aperture=ApertureSpec(21.0, 5.88),
        stars=ring_asterism(6, 60.0),
        layers=(LayerSpec(0.0, 0.75), LayerSpec(4000.0, 0.15), LayerSpec(12700.0, 0.1)),
        extension_half_width=27.0,
    )


def _two_star(alpha):
    return SystemGeometry(
        aperture=ApertureSpec(4.0),
        stars=(GuideStar(alpha, 0.0), GuideStar(-alpha, 0.0)),
        layers=(LayerSpec(0.0, 0.5), LayerSpec(10000.0, 0.5)),
        extension_half_width=10.0,
    )


def _single_layer():
    return SystemGeometry(
        aperture=ApertureSpec(2.0),
        stars=(GuideStar(0.0, 0.0),),
        layers=(LayerSpec(0.0, 1.0),),
        extension_half_width=5.0,
    )


def _random_stack(geometry, n, seed):
    rng = np.random.default_rng(seed)
    return LayerStack.from_arrays(geometry, [rng.standard_normal((n, n)) for _ in range(geometry.n_layers)])


def test_filters():
    """Tikhonov, truncation and pseudo-inverse gains"""

    print("🚀 Testing filter gains")
    print("="*40)

    sigma = np.array([[2.0, 0.5, 0.0]])
    tikhonov = FilterSpec.tikhonov(0.25).gains(sigma)
    assert np.allclose(tikhonov, [[2.0 / 4.25, 0.5 / 0.5, 0.0]]), f"Unexpected Tikhonov gains {tikhonov}"
    grid = np.linspace(0.0, 3.0, 301)
    assert tikhonov_gain(grid, 0.25).max() <= 1.0 / (2.0 * math.sqrt(0.25)) + 1e-15, "Tikhonov gain is bounded"
    assert np.allclose(FilterSpec.truncation(1.0).gains(sigma), [[0.5, 0.0, 0.0]]), "Truncation drops small sigma"
    assert np.allclose(FilterSpec.pseudo_inverse().gains(sigma), [[0.5, 2.0, 0.0]]), "Pseudo-inverse inverts nonzero sigma"
    print("✅ Gains correct")

    with pytest.raises(ConfigError):
        FilterSpec.tikhonov(0.0)
    with pytest.raises(ConfigError):
        tikhonov_gain(1.0, -1.0)
    with pytest.raises(ValueError):
        FilterSpec("wiener")
    print("✅ Invalid filters rejected")


def test_decomposition_matches_matrices():
    """Cached singular triplets rebuild the frequency matrices"""

    print("\n🚀 Testing the per-frequency SVD")
    print("="*40)

    geometry = _small()
    n = 16
    cache = decompose_all(geometry, 1.0, n)
    assert len(cache) == (n - 1) ** 2, "Cache must cover the in-band index set"
    for jk in [(0, 0), (3, -2), (-7, 7), (5, 1)]:
        svd = cache[jk]
        matrix = build_matrix(jk[0], jk[1], 1.0, geometry).entries
        assert np.allclose(svd.matrix(), matrix, atol=1e-12), f"SVD of {jk} does not rebuild the matrix"
        assert np.all(np.diff(svd.sigma) <= 0.0), "Singular values are sorted descending"
    assert cache[(0, 0)].rank == 1, "The DC matrix has identical rows"
    print("✅ Matrices rebuilt from the cache")

    with pytest.raises(MixedGeometryError):
        mixed = SystemGeometry(
            aperture=ApertureSpec(4.0),
            stars=ring_asterism(2, 60.0) + ring_asterism(2, 60.0, StarKind.LGS),
            layers=(LayerSpec(0.0, 0.6), LayerSpec(5000.0, 0.4)),
            extension_half_width=8.0,
        )
        decompose_all(mixed, 0.0, n)
    print("✅ Mixed star sets rejected")


@pytest.mark.parametrize("s", [1.0, 11.0 / 6.0, 2.0])
def test_sobolev_order_scales_singular_values(s):
    """For NGS every layer shares beta, so sigma scales by the Sobolev factor"""

    print(f"\n🚀 Testing singular values at s = {s:.4f}")
    print("="*40)

    geometry = _ngs6()
    n = 32
    plain = decompose_all(geometry, 0.0, n)
    smooth = decompose_all(geometry, s, n)
    beta = math.pi ** 2 / 27.0 ** 2
    factor = (1.0 + beta * (plain.j ** 2 + plain.k ** 2)) ** (-0.5 * s)
    assert np.array_equal(plain.j, smooth.j) and np.array_equal(plain.k, smooth.k), "Frequency order is fixed"
    deviation = float(np.max(np.abs(smooth.sigma - plain.sigma * factor[:, None])))
    print(f"📋 max deviation {deviation:.3e}")
    assert deviation <= 1e-12, f"sigma must scale by (1 + beta |(j,k)|^2)^(-s/2), off by {deviation:.3e}"
    print("✅ Singular values scale with the common factor")


def test_exact_reconstruction_on_periodic_data():
    """The pseudo-inverse reproduces range data and its own output"""

    print("\n🚀 Testing exact reconstruction")
    print("="*40)

    geometry = _small()
    n = 32
    cache = decompose_all(geometry, 0.0, n)
    data = apply_periodic_forward(_random_stack(geometry, n, 31))
    layers = reconstruct(data, cache, FilterSpec.pseudo_inverse())

    print("📋 Test 1: A A^+ d = d for range data")
    again = apply_periodic_forward(layers)
    scale = np.abs(data.as_array()).max()
    defect = np.abs(again.as_array() - data.as_array()).max() / scale
    print(f"   defect {defect:.3e}")
    assert defect < 1e-8, f"Range data not reproduced (defect {defect})"

    print("\n📋 Test 2: A^+ A phi = phi for the minimum-norm solution")
    twice = reconstruct(again, cache, FilterSpec.pseudo_inverse())
    defect = np.abs(twice.as_array() - layers.as_array()).max() / np.abs(layers.as_array()).max()
    assert defect < 1e-8, f"Reconstruction is not a fixed point (defect {defect})"
    print("✅ Exact on the range")

    print("\n📋 Test 3: Tikhonov tends to the pseudo-inverse as alpha shrinks")
    errors = [
        np.abs(reconstruct(data, cache, FilterSpec.tikhonov(alpha)).as_array() - layers.as_array()).max()
        for alpha in (1e-2, 1e-4, 1e-6)
    ]
    assert errors[0] > errors[1] > errors[2], f"Tikhonov error must shrink with alpha: {errors}"
    print("✅ Tikhonov converges")


def test_exact_reconstruction_on_ngs6():
    """Layers in the right-singular spans are recovered from noiseless periodic data"""

    print("\n🚀 Testing exact reconstruction on ngs6")
    print("="*40)

    geometry = _ngs6()
    n = 32
    s = 1.0
    cache = decompose_all(geometry, s, n)
    pinv = FilterSpec.pseudo_inverse(1e-6)
    # Minimum-norm reconstruction of arbitrary layers lies in the kept spans
    truth = reconstruct(apply_periodic_forward(_random_stack(geometry, n, 37), s=s), cache, pinv)
    result = reconstruct(apply_periodic_forward(truth, s=s), cache, pinv)
    for l in range(geometry.n_layers):
        error = np.linalg.norm(result[l].values - truth[l].values) / np.linalg.norm(truth[l].values)
        print(f"📋 layer {l}: relative error {error:.3e}")
        assert error <= 1e-8, f"Layer {l} not recovered (relative error {error:.3e})"
    print("✅ Exact on the spans")


def test_cache_files():
    """Save, reload, reject mismatches and corruption"""

    print("\n🚀 Testing the SVD cache file")
    print("="*40)

    geometry = _small()
    n = 16
    cache = decompose_all(geometry, 1.0, n)
    rng = np.random.default_rng(41)
    waves = WavefrontSet.from_arrays(geometry, [rng.standard_normal((n, n)) for _ in range(3)])
    expected = reconstruct(waves, cache, FilterSpec.tikhonov(1e-2)).as_array()

    with tempfile.TemporaryDirectory() as temp_dir:
        path = save_cache(cache, Path(temp_dir) / "svtd.atsv")
        loaded = load_cache(path, geometry, 1.0, n)
        assert loaded.key == cache.key and np.array_equal(loaded.rank, cache.rank), "Cache header must survive"
        result = reconstruct(waves, loaded, FilterSpec.tikhonov(1e-2)).as_array()
        assert np.allclose(result, expected, rtol=0.0, atol=1e-14), "Reloaded cache must reproduce the result"
        print("✅ Reload reproduces the reconstruction")

        with pytest.raises(CacheMismatchError):
            load_cache(path, geometry, 0.0, n)
        with pytest.raises(CacheMismatchError):
            reconstruct(WavefrontSet.from_arrays(geometry, [np.zeros((32, 32))] * 3), cache, FilterSpec.tikhonov(1e-2))
        print("✅ Mismatched (geometry, s, n) rejected")

        data = encode_cache(cache)
        bad_magic = Path(temp_dir) / "magic.atsv"
        bad_magic.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(GridFormatError):
            load_cache(bad_magic, geometry, 1.0, n)
        truncated = Path(temp_dir) / "short.atsv"
        truncated.write_bytes(data[:-7])
        with pytest.raises(GridFormatError):
            load_cache(truncated, geometry, 1.0, n)
        newer = Path(temp_dir) / "newer.atsv"
        newer.write_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
        with pytest.raises(CacheMismatchError):
            load_cache(newer, geometry, 1.0, n)
        print("✅ Corrupt and versioned files rejected")


def test_load_or_build(monkeypatch):
    """The cache directory comes from the argument or the environment"""

    print("\n🚀 Testing load_or_build_cache")
    print("="*40)

    geometry = _small()
    n = 16
    with tempfile.TemporaryDirectory() as temp_dir:
        first = load_or_build_cache(geometry, 0.0, n, cache_dir=temp_dir)
        path = cache_path(temp_dir, geometry, 0.0, n)
        assert path.exists(), "Cache file must be written on a miss"
        stamp = path.stat().st_mtime_ns
        second = load_or_build_cache(geometry, 0.0, n, cache_dir=temp_dir)
        assert path.stat().st_mtime_ns == stamp, "A hit must not rewrite the file"
        assert np.array_equal(first.sigma, second.sigma), "Hit must return the stored decomposition"
        print("✅ Miss then hit")

    with tempfile.TemporaryDirectory() as temp_dir:
        monkeypatch.setenv(CACHE_DIR_ENV, temp_dir)
        load_or_build_cache(geometry, 0.0, n)
        assert cache_path(temp_dir, geometry, 0.0, n).exists(), "Environment directory must be used"
        print("✅ Environment variable honoured")


def test_picard_diagnostic():
    """Plateau for smooth range data, divergence for white noise"""

    print("\n🚀 Testing the Picard diagnostic")
    print("="*40)

    geometry = _single_layer()
    n = 32
    ones = np.ones((n, n), dtype=bool)

    print("📋 Test 1: white noise against s = 2 diverges")
    cache = decompose_all(geometry, 2.0, n)
    rng = np.random.default_rng(51)
    noise = WavefrontSet.from_arrays(geometry, [rng.standard_normal((n, n))], mask=ones)
    report = picard_diagnostic(noise, cache)
    assert report.verdict == "diverging" and report.growth > 10.0, f"Noise must diverge, got {report.to_dict()}"
    assert np.all(np.diff(report.partial_sums) >= 0.0), "Partial sums are non-decreasing"
    print("✅ Diverging")

    print("\n📋 Test 2: a low-frequency cosine settles")
    X, _ = geometry.layer_grid(0, n).coordinates()
    stack = LayerStack.from_arrays(geometry, [np.cos(math.pi * X / 5.0)])
    report = picard_diagnostic(apply_periodic_forward(stack, s=2.0), cache)
    assert report.plateau and abs(report.growth - 1.0) < 1e-9, f"Cosine must plateau, got {report.to_dict()}"
    print("✅ Plateau")

    print("\n📋 Test 3: zero data")
    zero = WavefrontSet.from_arrays(geometry, [np.zeros((n, n))], mask=ones)
    report = picard_diagnostic(zero, cache)
    assert report.plateau and report.to_dict()["total"] == 0.0, "Zero data is a plateau"
    print("✅ Zero data handled")


def test_wellposedness_scan():
    """Rational shifts keep sigma bounded away from zero; a small perturbation does not"""

    print("\n🚀 Testing the well-posedness scan")
    print("="*40)

    rational = _two_star(2.5e-4)
    perturbed = _two_star(2.5e-4 * (1.0 + 2.0 * math.sqrt(2.0) * 1e-3))

    scans = {}
    for name, geometry in (("rational", rational), ("perturbed", perturbed)):
        for n in (16, 32):
            scans[name, n] = wellposedness_scan(geometry, n, bins=10)

    expected = math.sqrt(1.0 - math.sqrt(0.5))
    print(f"📋 rational min sigma {scans['rational', 32].min_sigma:.4f}, "
          f"perturbed {scans['perturbed', 32].min_sigma:.4f}")
    assert abs(scans["rational", 32].min_sigma - expected) < 1e-6, "Rational shifts bound sigma below by sqrt(1 - 1/sqrt 2)"
    assert abs(scans["perturbed", 32].min_sigma - 0.0063) < 3e-4, "Perturbed shifts collapse sigma"
    assert scans["rational", 32].shifts.all_rational and not scans["perturbed", 32].shifts.all_rational
    for name in ("rational", "perturbed"):
        assert scans[name, 32].min_sigma <= scans[name, 16].min_sigma + 1e-15, "Refining n never raises the minimum"
    payload = json.dumps(scans["perturbed", 32].to_dict())
    assert "log10_sigma_histogram" in payload, "Scan must serialize to JSON"
    assert sum(scans["rational", 16].histogram) == int(np.count_nonzero(decompose_all(rational, 0.0, 16).sigma))
    print("✅ Well-posedness behaves as expected")
