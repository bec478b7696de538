#!/usr/bin/env python3
"""
Test that the public atmotomo API imports and that __all__ is consistent.
"""


def test_imports():
    """Public classes, functions and exceptions import from the package root"""

    print("🚀 Testing atmotomo Imports")
    print("="*40)

    from atmotomo import SystemGeometry, LayerStack, WavefrontSet, SvtdCache, ExperimentConfig
    print("✅ Main classes imported successfully")

    from atmotomo import apply_forward, reconstruct, iterative_fd, generate_screens, evaluate, run_pipeline
    print("✅ Operations imported successfully")

    from atmotomo import (
        AtmoTomoError, GeometryError, ExtentError, MixedGeometryError, DomainMismatchError,
        NumericalError, DivergenceError, FrameError, CacheMismatchError, ConfigError,
        FileOperationError, FileReadError, FileWriteError, GridFormatError, ArtifactError,
    )
    for error in (GeometryError, DomainMismatchError, NumericalError, CacheMismatchError, ConfigError,
                  FileOperationError):
        assert issubclass(error, AtmoTomoError), f"{error.__name__} must derive from AtmoTomoError"
    assert issubclass(ExtentError, GeometryError) and issubclass(MixedGeometryError, GeometryError)
    assert issubclass(DivergenceError, NumericalError) and issubclass(FrameError, NumericalError)
    assert issubclass(GridFormatError, FileReadError) and issubclass(ArtifactError, FileOperationError)
    assert issubclass(ConfigError, ValueError), "ConfigError doubles as a ValueError"
    print("✅ Exception hierarchy")

    from atmotomo import __version__
    print(f"✅ Version imported successfully: {__version__}")


def test_all_is_consistent():
    """Every name in __all__ exists"""

    import atmotomo

    missing = [name for name in atmotomo.__all__ if not hasattr(atmotomo, name)]
    assert not missing, f"Names listed in __all__ but missing: {missing}"
    assert len(set(atmotomo.__all__)) == len(atmotomo.__all__), "Duplicate entries in __all__"


def test_default_formats_registered():
    """JSON, YAML and TOML handlers are available without extra imports"""

    from atmotomo import list_supported_formats

    assert {".json", ".yaml", ".yml", ".toml"} <= set(list_supported_formats())
    print("✅ Default formats registered")
