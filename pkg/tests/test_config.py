#!/usr/bin/env python3
"""
Config tests: presets, schema validation, defaults, file formats and overrides.
"""

import copy
import json
import math
import tempfile
from pathlib import Path

import pytest
import tomli_w
import yaml

from atmotomo import (
    ConfigError,
    ExperimentConfig,
    FileReadError,
    SolverKind,
    StarKind,
    list_presets,
    load_config,
    load_preset,
    validate_extent,
)
from atmotomo.config import PRESET_DIR, SolverConfig


def _minimal():
    return {
        "geometry": {
            "aperture": {"outer_radius": 4.0},
            "layers": [{"height": 0.0, "weight": 1.0}],
            "stars": [{"x_arcsec": 0.0, "y_arcsec": 0.0}],
        }
    }


def _preset_document(name):
    return json.loads((PRESET_DIR / f"{name}.json").read_text(encoding="utf-8"))


def test_presets():
    """Shipped presets load and describe valid geometries"""

    print("🚀 Testing presets")
    print("="*40)

    assert list_presets() == ["lgs6", "mixed", "ngs6"], f"Unexpected presets {list_presets()}"
    for name in list_presets():
        config = load_preset(name)
        geometry = config.build_geometry()
        assert config.name == name, f"Preset {name} carries the wrong name"
        assert validate_extent(geometry).ok, f"Preset {name} violates the extension condition"
        T = geometry.extension_half_width
        for x, y in config.evaluation.grid().radians:
            for l, layer in enumerate(geometry.layers):
                reach = geometry.aperture.outer_radius + math.hypot(x, y) * layer.height
                assert reach <= geometry.scale(l) * T, f"Preset {name}: evaluation direction leaves layer {l}"
        print(f"✅ {name}: {geometry.n_stars} stars, {geometry.n_layers} layers, T = {T} m")

    ngs6 = load_preset("ngs6")
    assert ngs6.solver.kind is SolverKind.SVTD and ngs6.solver.filter.alpha == 0.01
    mixed = load_preset("mixed").build_geometry()
    assert not mixed.is_single_kind and mixed.stars[0].kind is StarKind.NGS, "Mixed preset lists NGS first"
    assert load_preset("mixed").solver.kind is SolverKind.ITERATIVE_FD

    with pytest.raises(ConfigError):
        load_preset("scao")
    print("✅ Unknown preset rejected")


def test_unknown_and_invalid_keys():
    """Unknown keys and bad values raise ConfigError"""

    print("\n🚀 Testing schema validation")
    print("="*40)

    cases = []
    doc = _minimal()
    doc["solvr"] = {}
    cases.append(("unknown top-level key", doc))
    doc = _minimal()
    doc["solver"] = {"filter": {"alfa": 1.0}}
    cases.append(("unknown nested key", doc))
    doc = _minimal()
    doc["grid"] = {"n": 63}
    cases.append(("odd grid size", doc))
    doc = _minimal()
    doc["seed"] = True
    cases.append(("boolean seed", doc))
    doc = _minimal()
    doc["seed"] = -3
    cases.append(("negative seed", doc))
    doc = _minimal()
    doc["picard"] = {"threshold": 1.0}
    cases.append(("Picard threshold", doc))
    doc = _minimal()
    doc["solver"] = {"filter": {"kind": "tikhonov", "alpha": 0.0}}
    cases.append(("Tikhonov alpha", doc))
    doc = _minimal()
    doc["solver"] = {"kind": "cg"}
    cases.append(("solver kind", doc))
    doc = _minimal()
    doc["evaluation"] = {"remove_piston": "yes"}
    cases.append(("remove_piston type", doc))
    doc = _minimal()
    doc["noise_level"] = -0.1
    cases.append(("negative noise", doc))
    doc = _minimal()
    doc["turbulence"] = {"fried_parameter": 0.0}
    cases.append(("Fried parameter", doc))
    doc = _minimal()
    del doc["geometry"]["stars"]
    cases.append(("no stars", doc))

    for label, document in cases:
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(document)
        print(f"✅ {label} rejected")


def test_defaults_and_round_trip():
    """Every default is filled in and to_dict reproduces the config"""

    print("\n🚀 Testing defaults")
    print("="*40)

    config = ExperimentConfig.from_dict(_minimal())
    assert config.grid.n == 64 and config.grid.extension_half_width == 27.0
    assert config.solver.kind is SolverKind.SVTD and config.solver.sobolev_order == 1.0
    assert config.solver.filter.alpha == 1e-2 and config.picard.threshold == 1.5
    assert config.evaluation.grid_size == 5 and config.evaluation.field_of_view_arcsec == 120.0
    assert config.seed == 0 and config.threads == 1 and config.noise_level == 0.0
    print("✅ Defaults filled in")

    again = ExperimentConfig.from_dict(config.to_dict())
    assert again == config, "to_dict must describe the config completely"
    assert json.loads(json.dumps(config.to_dict())) == config.to_dict(), "to_dict must be JSON-compatible"
    print("✅ to_dict round trip")

    fd = SolverConfig(kind=SolverKind.FD, iterations=5)
    assert fd.options().iterations == 1, "Plain FD is a single iteration"
    assert SolverConfig(kind=SolverKind.ITERATIVE_FD, iterations=7).options(threads=3).threads == 3
    print("✅ Solver options")


def test_guide_star_order():
    """Explicit stars and asterisms are merged with NGS first"""

    print("\n🚀 Testing guide-star ordering")
    print("="*40)

    doc = _minimal()
    doc["geometry"]["stars"] = [{"x_arcsec": 10.0, "y_arcsec": 0.0, "kind": "lgs"}, {"x_arcsec": 0.0, "y_arcsec": 5.0}]
    doc["geometry"]["asterisms"] = [{"count": 2, "diameter_arcsec": 20.0}]
    stars = ExperimentConfig.from_dict(doc).geometry.guide_stars()
    assert [s.kind for s in stars] == [StarKind.NGS] * 3 + [StarKind.LGS], "NGS must come first"
    assert stars[0].alpha_x == 0.0, "NGS keep their listed order"
    print("✅ NGS first, order otherwise kept")


def test_file_formats():
    """The same experiment loads from JSON, YAML and TOML"""

    print("\n🚀 Testing config file formats")
    print("="*40)

    document = _preset_document("ngs6")
    expected = load_preset("ngs6").content_hash()
    with tempfile.TemporaryDirectory() as temp_dir:
        paths = {
            ".yaml": Path(temp_dir) / "ngs6.yaml",
            ".toml": Path(temp_dir) / "ngs6.toml",
        }
        paths[".yaml"].write_text(yaml.safe_dump(document), encoding="utf-8")
        paths[".toml"].write_text(tomli_w.dumps(document), encoding="utf-8")
        for suffix, path in paths.items():
            assert load_config(path).content_hash() == expected, f"{suffix} config differs from the JSON preset"
            print(f"✅ {suffix} loads")

        empty = Path(temp_dir) / "empty.json"
        empty.write_text("", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(empty)
        with pytest.raises(FileReadError):
            load_config(Path(temp_dir) / "missing.yaml")
        print("✅ Empty and missing files reported")


def test_overrides_and_hash():
    """CLI overrides; output_dir and threads do not change the content hash"""

    print("\n🚀 Testing overrides")
    print("="*40)

    config = load_preset("ngs6")
    moved = config.with_overrides(output_dir="elsewhere", threads=4)
    assert moved.output_dir == "elsewhere" and moved.threads == 4
    assert moved.content_hash() == config.content_hash(), "Output location must not affect the hash"
    reseeded = config.with_overrides(seed=2 ** 64 - 1)
    assert reseeded.seed == 2 ** 64 - 1 and reseeded.content_hash() != config.content_hash(), "Seed affects the hash"
    assert config.with_overrides() is config, "No overrides returns the same config"
    with pytest.raises(ConfigError):
        config.with_overrides(seed=2 ** 64)
    with pytest.raises(ConfigError):
        config.with_overrides(threads=0)

    document = copy.deepcopy(_preset_document("ngs6"))
    document["solver"]["filter"]["alpha"] = 0.02
    assert ExperimentConfig.from_dict(document).content_hash() != config.content_hash(), "alpha affects the hash"
    print("✅ Overrides and hashing")
