import json
import sys
from typing import IO, Any

import numpy as np
import yaml

# Handle tomli/tomllib based on Python version
if sys.version_info >= (3, 11):
    import tomllib as tomli  # Built-in since Python 3.11
else:
    import tomli  # External package for Python < 3.11

# tomli_w is always external (no built-in write support)
import tomli_w

from .formats import register_format


def to_plain(data: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into plain Python containers."""
    if isinstance(data, dict):
        return {str(key): to_plain(value) for key, value in data.items()}
    if isinstance(data, (list, tuple)):
        return [to_plain(value) for value in data]
    if isinstance(data, np.ndarray):
        return to_plain(data.tolist())
    if isinstance(data, np.integer):
        return int(data)
    if isinstance(data, np.floating):
        return float(data)
    if isinstance(data, np.bool_):
        return bool(data)
    return data


# YAML
def yaml_loader(f: IO):
    return yaml.safe_load(f)


def yaml_dumper(data, f: IO):
    yaml.safe_dump(to_plain(data), f, default_flow_style=False, allow_unicode=True, indent=4, sort_keys=True)


register_format(".yaml", yaml_loader, yaml_dumper)
register_format(".yml", yaml_loader, yaml_dumper)


# JSON
def json_loader(f: IO):
    content = f.read()
    if not content.strip():  # Empty or whitespace-only file
        return None
    return json.loads(content)


def json_dumper(data, f: IO):
    json.dump(to_plain(data), f, indent=4, sort_keys=True)
    f.write("\n")


register_format(".json", json_loader, json_dumper)


# TOML (no null values: drop None entries before writing)
def _drop_none(data: Any) -> Any:
    if isinstance(data, dict):
        return {key: _drop_none(value) for key, value in data.items() if value is not None}
    if isinstance(data, list):
        return [_drop_none(value) for value in data]
    return data


def toml_loader(f: IO):
    data = f.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return tomli.loads(data)


def toml_dumper(data, f: IO):
    f.write(tomli_w.dumps(_drop_none(to_plain(data))))


register_format(".toml", toml_loader, toml_dumper)
