"""
Artifact persistence: atomic writes, lock-protected files, binary grid files
and CSV tables.

Grid file layout (little-endian):

    magic "ATGR" | version u32 | n u32 | half_width f64 | domain u8 | layer i32
    payload: n*n float64, row-major (rows along y)

The layer index is -1 for aperture-plane fields.
"""

import contextlib
import csv
import logging
import os
import struct
import tempfile
from pathlib import Path
from threading import RLock
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from filelock import FileLock

from .core import FileReadError, FileWriteError, GridFormatError, GridSpec
from .formats import dump_data, list_supported_formats, load_data
from .spectral import Domain, Field2D

logger = logging.getLogger(__name__)

GRID_MAGIC = b"ATGR"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIdBi")
_DOMAIN_TAGS = {Domain.APERTURE: 0, Domain.LAYER: 1}
_TAG_DOMAINS = {tag: domain for domain, tag in _DOMAIN_TAGS.items()}

PathLike = Union[str, os.PathLike]


@contextlib.contextmanager
def atomic_write(path: PathLike, mode: str = "w", encoding: Optional[str] = None, overwrite: bool = True):
    """
    Atomic file writing (text or binary).

    Writes go to a temporary file in the target directory, which is flushed,
    fsynced and then moved over the target. Missing parent directories are
    created.
    """
    path = str(path)
    dirpath = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirpath, exist_ok=True)
    newline = "" if "b" not in mode else None
    with tempfile.NamedTemporaryFile(delete=False, dir=dirpath, mode=mode, encoding=encoding, newline=newline) as tf:
        try:
            yield tf
            tf.flush()
            os.fsync(tf.fileno())
        except BaseException:
            tf.close()
            os.unlink(tf.name)
            raise
    if overwrite:
        os.replace(tf.name, path)
    else:
        os.link(tf.name, path)
        os.unlink(tf.name)


_thread_lock = RLock()


class LockedFile:
    """
    A file guarded by an inter-process FileLock (``<path>.lock``) and a
    process-wide thread lock, serialized by extension through the format
    registry.

    Example usage:
        manifest = LockedFile(out / "manifest.json")
        manifest.write({"seed": 7})
        data = manifest.read()
    """

    def __init__(self, path: PathLike, timeout: Union[bool, int, float, None] = True):
        """
        Args:
            path: Path to the file.
            timeout: True waits up to 15 s for the lock, False/None waits
                forever, a number waits that many seconds.
        """
        self.path = Path(path)
        if timeout is True:
            lock_timeout = 15
        elif timeout is False or timeout is None:
            lock_timeout = -1
        elif isinstance(timeout, (int, float)):
            lock_timeout = timeout
        else:
            raise ValueError(f"Invalid value for timeout: {timeout!r}. Must be True, False, None, int, or float.")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.file_lock = FileLock(str(self.path) + ".lock", timeout=lock_timeout)

    def __enter__(self):
        _thread_lock.acquire()
        self.file_lock.acquire()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.file_lock.release()
        _thread_lock.release()

    def read(self) -> Optional[Any]:
        """Deserialize the file by extension; None if it does not exist."""
        with _thread_lock, self.file_lock:
            if not self.path.exists():
                return None
            mode = "rb" if self.path.suffix.lower() == ".toml" else "r"
            encoding = None if mode == "rb" else "utf-8"
            try:
                with open(self.path, mode, encoding=encoding) as f:
                    return load_data(f, self.path.suffix)
            except Exception as e:
                raise FileReadError(f"Failed to read '{self.path}': {e}") from e

    def write(self, data: Any) -> None:
        with _thread_lock, self.file_lock:
            try:
                with atomic_write(self.path, mode="w", encoding="utf-8") as f:
                    dump_data(data, f, self.path.suffix)
            except Exception as e:
                raise FileWriteError(f"Failed to write '{self.path}': {e}") from e

    def read_bytes(self) -> Optional[bytes]:
        with _thread_lock, self.file_lock:
            if not self.path.exists():
                return None
            try:
                return self.path.read_bytes()
            except Exception as e:
                raise FileReadError(f"Failed to read bytes from '{self.path}': {e}") from e

    def write_bytes(self, data: bytes) -> None:
        with _thread_lock, self.file_lock:
            try:
                with atomic_write(self.path, mode="wb") as f:
                    f.write(data)
            except Exception as e:
                raise FileWriteError(f"Failed to write bytes to '{self.path}': {e}") from e

    @staticmethod
    def supported_formats() -> List[str]:
        return list_supported_formats()


def load_document(path: PathLike) -> Any:
    """Read a JSON/YAML/TOML document without locking (configs, presets)."""
    path = Path(path)
    mode = "rb" if path.suffix.lower() == ".toml" else "r"
    encoding = None if mode == "rb" else "utf-8"
    try:
        with open(path, mode, encoding=encoding) as f:
            return load_data(f, path.suffix)
    except FileNotFoundError as e:
        raise FileReadError(f"File not found: '{path}'") from e
    except FileReadError:
        raise
    except Exception as e:
        raise FileReadError(f"Failed to read '{path}': {e}") from e


def encode_grid(field: Field2D) -> bytes:
    values = field.values
    if np.iscomplexobj(values):
        raise FileWriteError("Grid files hold real fields only")
    layer = -1 if field.layer is None else int(field.layer)
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, field.grid.n, field.grid.half_width,
                               _DOMAIN_TAGS[field.domain], layer)
    return header + np.ascontiguousarray(values, dtype="<f8").tobytes()


def decode_grid(data: bytes, source: str = "<bytes>") -> Field2D:
    if len(data) < _GRID_HEADER.size:
        raise GridFormatError(f"'{source}' is too short for a grid header")
    magic, version, n, half_width, tag, layer = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"'{source}' is not a grid file (magic {magic!r})")
    if version != GRID_VERSION:
        raise GridFormatError(f"'{source}' has grid format version {version}, expected {GRID_VERSION}")
    if tag not in _TAG_DOMAINS:
        raise GridFormatError(f"'{source}' has unknown domain tag {tag}")
    payload = data[_GRID_HEADER.size:]
    if len(payload) != 8 * n * n:
        raise GridFormatError(f"'{source}' payload holds {len(payload)} bytes, expected {8 * n * n}")
    values = np.frombuffer(payload, dtype="<f8").reshape(n, n).astype(float)
    domain = _TAG_DOMAINS[tag]
    return Field2D(GridSpec(n, half_width), values, domain, None if layer < 0 else layer)


def write_grid(path: PathLike, field: Field2D) -> Path:
    path = Path(path)
    try:
        with atomic_write(path, mode="wb") as f:
            f.write(encode_grid(field))
    except FileWriteError:
        raise
    except Exception as e:
        raise FileWriteError(f"Failed to write grid '{path}': {e}") from e
    return path


def read_grid(path: PathLike) -> Field2D:
    path = Path(path)
    try:
        data = path.read_bytes()
    except Exception as e:
        raise FileReadError(f"Failed to read grid '{path}': {e}") from e
    return decode_grid(data, str(path))


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Atomically write a CSV table; an empty ``rows`` gives a header-only file."""
    path = Path(path)
    try:
        with atomic_write(path, mode="w", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format_cell(value) for value in row])
    except Exception as e:
        raise FileWriteError(f"Failed to write table '{path}': {e}") from e
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))
    except Exception as e:
        raise FileReadError(f"Failed to read table '{path}': {e}") from e


def _format_cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def export_grid_csv(grid_path: PathLike, csv_path: PathLike) -> Path:
    """Long-format CSV (x, y, value) of a grid file, for inspection."""
    field = read_grid(grid_path)
    X, Y = field.grid.coordinates()
    rows = zip(X.ravel(), Y.ravel(), field.values.ravel())
    return write_csv(csv_path, ["x_m", "y_m", "value"], rows)

