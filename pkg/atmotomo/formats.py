from typing import IO, Any, Callable, Dict, List, Tuple

from .core import AtmoTomoError

Loader = Callable[[IO], Any]
Dumper = Callable[[Any, IO], None]

# Global registry: extension -> (loader, dumper)
FORMAT_REGISTRY: Dict[str, Tuple[Loader, Dumper]] = {}


class FormatNotRegisteredError(AtmoTomoError, ValueError):
    pass


def _normalize(ext: str) -> str:
    if not ext.startswith("."):
        ext = "." + ext
    return ext.lower()


def register_format(ext: str, loader: Loader, dumper: Dumper) -> None:
    """
    Registers a loader/dumper for a config or manifest extension.

    Args:
        ext: extension (with or without dot, e.g. '.json' or 'json')
        loader: function that receives a file-like and returns the document
        dumper: function that receives the document and a file-like

    Example:
        from atmotomo.formats import register_format
        register_format('.ini', ini_loader, ini_dumper)
    """
    FORMAT_REGISTRY[_normalize(ext)] = (loader, dumper)


def _get_handlers(suffix: str) -> Tuple[Loader, Dumper]:
    suffix = _normalize(suffix)
    if suffix in FORMAT_REGISTRY:
        return FORMAT_REGISTRY[suffix]
    raise FormatNotRegisteredError(
        f"No format registered for extension '{suffix}' (supported: {', '.join(list_supported_formats())})"
    )


def load_data(file_obj: IO, suffix: str) -> Any:
    loader, _ = _get_handlers(suffix)
    return loader(file_obj)


def dump_data(data: Any, file_obj: IO, suffix: str) -> None:
    _, dumper = _get_handlers(suffix)
    dumper(data, file_obj)


def list_supported_formats() -> List[str]:
    """Returns a list of currently supported extensions."""
    return sorted(FORMAT_REGISTRY.keys())
