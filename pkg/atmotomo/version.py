from pathlib import Path
import sys

if sys.version_info >= (3, 11):
    import tomllib as tomli
else:
    import tomli

_FALLBACK = "0.0.0"


def get_version() -> str:
    """Poetry version from the source tree's pyproject.toml, or the installed distribution's."""
    pyproject = Path(__file__).parent.parent / "pyproject.toml"
    if pyproject.exists():
        with pyproject.open("rb") as f:
            data = tomli.load(f)
        return data.get("tool", {}).get("poetry", {}).get("version", _FALLBACK)
    try:
        from importlib.metadata import PackageNotFoundError, version
    except ImportError:  # pragma: no cover
        return _FALLBACK
    try:
        return version("atmotomo")
    except PackageNotFoundError:
        return _FALLBACK


__version__ = get_version()
