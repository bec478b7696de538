"""
Singular-value-type decomposition (SVTD) of the periodic tomography operator.

For a single-kind star set the periodic operator decouples in frequency: each
in-band (j, k) contributes one small G x L matrix, and its SVD gives the
singular system of the whole operator. The reconstructor analyzes the data,
applies a filtered pseudo-inverse per frequency and synthesizes every layer
from its Sobolev-scaled coefficients.

Decompositions are kept in an ``SvtdCache`` that can be saved to a versioned
binary file and reused across runs.
"""

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .core import (
    CacheMismatchError,
    ConfigError,
    GridFormatError,
    NumericalError,
    RationalShiftReport,
    SystemGeometry,
    rational_shift_report,
    require_extent,
)
from .core import beta as layer_beta
from .forward import LayerStack, WavefrontSet, frequency_symbol, parallel_map
from .spectral import (
    SobolevWeight,
    SpectralField,
    analyze,
    aperture_context,
    frequency_grid,
    in_band_mask,
    layer_context,
    synthesize,
)
from .storage import LockedFile

logger = logging.getLogger(__name__)

#: Singular values below this fraction of the largest one count as zero.
DEFAULT_RANK_TOL = 1e-10

#: Environment variable naming the SVD cache directory.
CACHE_DIR_ENV = "ATMOTOMO_CACHE_DIR"

CACHE_MAGIC = b"ATSV"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sI32sdIIII")
_RECORD_HEADER = struct.Struct("<iiI")

# Components below this fraction of the largest |v| entry are skipped when
# fixing the phase of a singular pair.
_PHASE_FLOOR = 1e-12


class FilterKind(str, Enum):
    TIKHONOV = "tikhonov"
    TRUNCATION = "truncation"
    PSEUDO_INVERSE = "pseudo_inverse"

    @classmethod
    def list(cls) -> List[str]:
        return [kind.value for kind in cls]


def tikhonov_gain(sigma: Union[float, np.ndarray], alpha: float) -> Union[float, np.ndarray]:
    """g_alpha(sigma) = sigma / (sigma^2 + alpha), bounded by 1/(2 sqrt(alpha))."""
    if not alpha > 0.0:
        raise ConfigError(f"Tikhonov parameter must be positive, got {alpha}")
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0.0):
        raise ConfigError("Singular values must be non-negative")
    gain = sigma / (sigma * sigma + alpha)
    return float(gain) if gain.ndim == 0 else gain


@dataclass(frozen=True)
class FilterSpec:
    """
    Filter applied to the singular values of every frequency matrix.

    tikhonov: sigma/(sigma^2 + alpha); truncation: 1/sigma for sigma >= sigma_min;
    pseudo_inverse: 1/sigma above ``rank_tol`` times the largest singular value.
    """
    kind: FilterKind
    alpha: Optional[float] = None
    sigma_min: float = 0.0
    rank_tol: float = DEFAULT_RANK_TOL

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if self.kind is FilterKind.TIKHONOV and not (self.alpha is not None and self.alpha > 0.0):
            raise ConfigError(f"Tikhonov filter needs alpha > 0, got {self.alpha}")
        if not self.sigma_min >= 0.0:
            raise ConfigError(f"Truncation level must be >= 0, got {self.sigma_min}")
        if not self.rank_tol >= 0.0:
            raise ConfigError(f"Rank tolerance must be >= 0, got {self.rank_tol}")

    @classmethod
    def tikhonov(cls, alpha: float) -> "FilterSpec":
        return cls(FilterKind.TIKHONOV, alpha=alpha)

    @classmethod
    def truncation(cls, sigma_min: float) -> "FilterSpec":
        return cls(FilterKind.TRUNCATION, sigma_min=sigma_min)

    @classmethod
    def pseudo_inverse(cls, rank_tol: float = DEFAULT_RANK_TOL) -> "FilterSpec":
        return cls(FilterKind.PSEUDO_INVERSE, rank_tol=rank_tol)

    def gains(self, sigma: np.ndarray) -> np.ndarray:
        """Filter gains for a (frequencies, components) array; zero singular values get zero gain."""
        sigma = np.asarray(sigma, dtype=float)
        out = np.zeros_like(sigma)
        positive = sigma > 0.0
        if self.kind is FilterKind.TIKHONOV:
            out[positive] = tikhonov_gain(sigma[positive], self.alpha)
        elif self.kind is FilterKind.TRUNCATION:
            keep = positive & (sigma >= self.sigma_min)
            out[keep] = 1.0 / sigma[keep]
        else:
            largest = sigma.max(axis=-1, keepdims=True) if sigma.size else sigma
            keep = positive & (sigma > self.rank_tol * largest)
            out[keep] = 1.0 / sigma[keep]
        return out

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind.value, "alpha": self.alpha, "sigma_min": self.sigma_min, "rank_tol": self.rank_tol}


@dataclass(frozen=True, eq=False)
class FrequencyMatrix:
    j: int
    k: int
    entries: np.ndarray


def build_matrix(j: int, k: int, s: float, geometry: SystemGeometry) -> FrequencyMatrix:
    """
    The G x L matrix of the periodic operator at frequency (j, k) in the H^s bases.

    Raises:
        MixedGeometryError: for star sets mixing NGS and LGS.
        ExtentError: when T is too small for the geometry.
    """
    require_extent(geometry)
    entries = frequency_symbol(geometry, s, np.array(j), np.array(k))
    return FrequencyMatrix(int(j), int(k), entries)


@dataclass(frozen=True, eq=False)
class FrequencySvd:
    """Nonzero singular triplets of one frequency matrix; u is G x r, v is L x r."""
    j: int
    k: int
    sigma: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.size)

    def matrix(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.conj().T


@dataclass(frozen=True, eq=False)
class SvtdCache:
    """
    Batched singular systems over the in-band index set, sorted by (j, k).

    ``sigma`` is (m, R), ``u`` is (m, G, R) and ``v`` is (m, L, R) with
    R = min(G, L); components beyond ``rank[i]`` are zero.
    """
    key: str
    s: float
    n: int
    n_stars: int
    n_layers: int
    j: np.ndarray
    k: np.ndarray
    sigma: np.ndarray
    u: np.ndarray
    v: np.ndarray
    rank: np.ndarray
    _index: Dict[Tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("j", "k", "sigma", "u", "v", "rank"):
            array = getattr(self, name)
            array.setflags(write=False)
        self._index.update({(int(a), int(b)): i for i, (a, b) in enumerate(zip(self.j, self.k))})

    def __len__(self) -> int:
        return int(self.j.size)

    @property
    def frequencies(self) -> List[Tuple[int, int]]:
        return list(self._index)

    def __getitem__(self, jk: Tuple[int, int]) -> FrequencySvd:
        i = self._index[(int(jk[0]), int(jk[1]))]
        r = int(self.rank[i])
        return FrequencySvd(int(self.j[i]), int(self.k[i]), self.sigma[i, :r].copy(),
                            self.u[i, :, :r].copy(), self.v[i, :, :r].copy())

    def matches(self, geometry: SystemGeometry, s: float, n: int) -> bool:
        return self.key == cache_key(geometry, s, n)

    def nonzero_sigma(self) -> np.ndarray:
        return self.sigma[self.sigma > 0.0]


def cache_key(geometry: SystemGeometry, s: float, n: int) -> str:
    return geometry.content_hash("svtd", float(s), int(n))


def _band_frequencies(n: int) -> Tuple[np.ndarray, np.ndarray]:
    J, K = frequency_grid(n)
    band = in_band_mask(n)
    j, k = J[band], K[band]
    order = np.lexsort((k, j))
    return j[order], k[order]


def _fix_phases(u: np.ndarray, v: np.ndarray) -> None:
    """Rotate each singular pair in place so the first significant v component is real-positive."""
    magnitude = np.abs(v)
    floor = _PHASE_FLOOR * magnitude.max(axis=1, keepdims=True)
    first = np.argmax(magnitude > floor, axis=1)
    pivot = np.take_along_axis(v, first[:, None, :], axis=1)[:, 0, :]
    size = np.abs(pivot)
    rotation = np.where(size > 0.0, np.conj(pivot) / np.where(size > 0.0, size, 1.0), 1.0)
    v *= rotation[:, None, :]
    u *= rotation[:, None, :]


def decompose_all(geometry: SystemGeometry, s: float, n: int, rank_tol: float = DEFAULT_RANK_TOL) -> SvtdCache:
    """
    SVDs of every in-band frequency matrix, batched in one numpy call.

    Singular values below ``rank_tol * sigma_max`` of their matrix are
    dropped together with their vectors.
    """
    require_extent(geometry)
    geometry.require_single_kind("SVTD")
    j, k = _band_frequencies(n)
    matrices = frequency_symbol(geometry, s, j, k)
    u, sigma, vh = np.linalg.svd(matrices, full_matrices=False)
    v = np.conj(np.swapaxes(vh, 1, 2)).copy()
    u = u.copy()
    _fix_phases(u, v)
    keep = sigma > rank_tol * sigma[:, :1]
    sigma = np.where(keep, sigma, 0.0)
    u *= keep[:, None, :]
    v *= keep[:, None, :]
    rank = keep.sum(axis=1).astype(np.int64)
    deficient = int(np.count_nonzero(rank < min(geometry.n_stars, geometry.n_layers)))
    logger.info("Decomposed %d frequency matrices (G=%d, L=%d, s=%g, n=%d); %d rank-deficient",
                j.size, geometry.n_stars, geometry.n_layers, s, n, deficient)
    return SvtdCache(cache_key(geometry, s, n), float(s), int(n), geometry.n_stars, geometry.n_layers,
                     j, k, sigma, u, v, rank)


def _require_cache(cache: SvtdCache, geometry: SystemGeometry, n: int) -> None:
    if cache.n != n:
        raise CacheMismatchError(f"Cache was built for n={cache.n}, data uses n={n}")
    if not cache.matches(geometry, cache.s, n):
        raise CacheMismatchError("Cache was built for a different geometry")


def _data_projections(waves: WavefrontSet, cache: SvtdCache) -> np.ndarray:
    """u_n^H phi_jk for every cached frequency and component, shape (m, R)."""
    geometry = waves.geometry
    _require_cache(cache, geometry, waves.n)
    context = aperture_context(geometry)
    coefficients = []
    for f in waves:
        values = np.where(waves.mask, f.values, 0.0)
        if not np.all(np.isfinite(values)):
            raise NumericalError("Wavefront data contains non-finite values")
        coefficients.append(analyze(f.with_values(values), context).coefficients)
    data = np.stack(coefficients)[:, cache.k % cache.n, cache.j % cache.n].T
    return np.einsum("mgr,mg->mr", np.conj(cache.u), data)


def reconstruct(waves: WavefrontSet, cache: SvtdCache, filter_spec: FilterSpec, threads: int = 1) -> LayerStack:
    """
    Filtered SVTD reconstruction.

    Analyzes the zero-extended data, forms d_jk = sum_n g(sigma_n) (u_n^H phi_jk) v_n
    per frequency, turns the H^s coefficients into L2 coefficients and
    synthesizes each layer on its square.

    Raises:
        CacheMismatchError: when the cache belongs to another geometry or n.
        NumericalError: on non-finite data.
    """
    geometry = waves.geometry
    projections = _data_projections(waves, cache)
    gains = filter_spec.gains(cache.sigma)
    layer_coefficients = np.einsum("mlr,mr->ml", cache.v, gains * projections)
    n = cache.n
    rows, cols = cache.k % n, cache.j % n

    def one_layer(l: int):
        weight = SobolevWeight(cache.s, layer_beta(l, geometry)).factor(cache.j, cache.k)
        coefficients = np.zeros((n, n), dtype=complex)
        coefficients[rows, cols] = layer_coefficients[:, l] * weight
        return synthesize(SpectralField(coefficients, layer_context(geometry, l)))

    fields = parallel_map(one_layer, list(range(geometry.n_layers)), threads)
    stack = LayerStack(geometry, tuple(fields))
    if not all(np.all(np.isfinite(f.values)) for f in stack):
        raise NumericalError("SVTD reconstruction produced non-finite values")
    return stack


@dataclass(frozen=True, eq=False)
class PicardReport:
    """Picard partial sums ordered by decreasing singular value."""
    sigma: np.ndarray
    partial_sums: np.ndarray
    growth: float
    threshold: float
    verdict: str

    @property
    def plateau(self) -> bool:
        return self.verdict == "plateau"

    def to_dict(self) -> Dict[str, object]:
        return {
            "verdict": self.verdict,
            "growth": self.growth if math.isfinite(self.growth) else "inf",
            "threshold": self.threshold,
            "terms": int(self.partial_sums.size),
            "total": float(self.partial_sums[-1]) if self.partial_sums.size else 0.0,
        }


def picard_diagnostic(waves: WavefrontSet, cache: SvtdCache, threshold: float = 1.5) -> PicardReport:
    """
    Cumulative sums of |u_n^H phi_jk|^2 / sigma_n^2 in order of decreasing sigma.

    The growth over the last decade is S_total / S(sigma >= 10 sigma_min);
    the verdict is "plateau" when it stays below ``threshold``. Zero data is
    a plateau, and a nonzero total with an empty upper decade diverges.
    """
    projections = _data_projections(waves, cache)
    valid = cache.sigma > 0.0
    sigma = cache.sigma[valid]
    terms = np.abs(projections[valid]) ** 2 / sigma ** 2
    order = np.argsort(-sigma, kind="stable")
    sigma, terms = sigma[order], terms[order]
    partial = np.cumsum(terms)
    total = float(partial[-1]) if partial.size else 0.0
    if total == 0.0:
        growth = 1.0
    else:
        upper = float(np.sum(terms[sigma >= 10.0 * sigma[-1]]))
        growth = math.inf if upper == 0.0 else total / upper
    verdict = "plateau" if growth < threshold else "diverging"
    logger.info("Picard check: growth %.4g over the last decade -> %s", growth, verdict)
    return PicardReport(sigma, partial, growth, threshold, verdict)


@dataclass(frozen=True, eq=False)
class WellposednessScan:
    min_sigma: float
    argmin: Tuple[int, int]
    histogram: np.ndarray
    bin_edges: np.ndarray
    shifts: RationalShiftReport

    def to_dict(self) -> Dict[str, object]:
        return {
            "min_sigma": self.min_sigma,
            "argmin": list(self.argmin),
            "log10_sigma_histogram": {"counts": self.histogram.tolist(), "edges": self.bin_edges.tolist()},
            "rational_shifts": self.shifts.all_rational,
            "shift_ratios": [
                {"layer": e.layer, "star": e.star, "x": e.ratio_x, "y": e.ratio_y,
                 "x_fraction": str(e.fraction_x), "y_fraction": str(e.fraction_y), "rational": e.rational}
                for e in self.shifts.entries
            ],
        }


def wellposedness_scan(geometry: SystemGeometry, n: int, s: float = 0.0, bins: int = 20,
                       cache: Optional[SvtdCache] = None) -> WellposednessScan:
    """Smallest nonzero singular value over the in-band set, where it occurs and a log10 histogram."""
    cache = decompose_all(geometry, s, n) if cache is None else cache
    rows = np.arange(len(cache))
    smallest = cache.sigma[rows, np.maximum(cache.rank - 1, 0)]
    smallest = np.where(cache.rank > 0, smallest, np.inf)
    i = int(np.argmin(smallest))
    counts, edges = np.histogram(np.log10(cache.nonzero_sigma()), bins=bins)
    return WellposednessScan(float(smallest[i]), (int(cache.j[i]), int(cache.k[i])), counts, edges,
                             rational_shift_report(geometry))


def encode_cache(cache: SvtdCache) -> bytes:
    parts = [_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, bytes.fromhex(cache.key), cache.s, cache.n,
                                cache.n_stars, cache.n_layers, len(cache))]
    for i in range(len(cache)):
        r = int(cache.rank[i])
        parts.append(_RECORD_HEADER.pack(int(cache.j[i]), int(cache.k[i]), r))
        parts.append(np.ascontiguousarray(cache.sigma[i, :r], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(cache.u[i, :, :r], dtype="<c16").tobytes())
        parts.append(np.ascontiguousarray(cache.v[i, :, :r], dtype="<c16").tobytes())
    return b"".join(parts)


def decode_cache(data: bytes, source: str = "<bytes>") -> SvtdCache:
    if len(data) < _CACHE_HEADER.size:
        raise GridFormatError(f"'{source}' is too short for an SVD cache header")
    magic, version, digest, s, n, G, L, count = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise GridFormatError(f"'{source}' is not an SVD cache (magic {magic!r})")
    if version != CACHE_VERSION:
        raise CacheMismatchError(f"'{source}' has cache version {version}, expected {CACHE_VERSION}")
    R = min(G, L)
    j = np.empty(count, dtype=np.int64)
    k = np.empty(count, dtype=np.int64)
    rank = np.empty(count, dtype=np.int64)
    sigma = np.zeros((count, R))
    u = np.zeros((count, G, R), dtype=complex)
    v = np.zeros((count, L, R), dtype=complex)
    offset = _CACHE_HEADER.size
    try:
        for i in range(count):
            j[i], k[i], r = _RECORD_HEADER.unpack_from(data, offset)
            offset += _RECORD_HEADER.size
            if r > R:
                raise GridFormatError(f"'{source}' record {i} has rank {r} > {R}")
            rank[i] = r
            sigma[i, :r] = np.frombuffer(data, dtype="<f8", count=r, offset=offset)
            offset += 8 * r
            u[i, :, :r] = np.frombuffer(data, dtype="<c16", count=G * r, offset=offset).reshape(G, r)
            offset += 16 * G * r
            v[i, :, :r] = np.frombuffer(data, dtype="<c16", count=L * r, offset=offset).reshape(L, r)
            offset += 16 * L * r
    except (struct.error, ValueError) as e:
        raise GridFormatError(f"'{source}' is truncated: {e}") from e
    if offset != len(data):
        raise GridFormatError(f"'{source}' has {len(data) - offset} trailing bytes")
    return SvtdCache(digest.hex(), s, n, G, L, j, k, sigma, u, v, rank)


def save_cache(cache: SvtdCache, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    LockedFile(path).write_bytes(encode_cache(cache))
    return path


def load_cache(path: Union[str, os.PathLike], geometry: SystemGeometry, s: float, n: int) -> SvtdCache:
    """
    Read a cache file and check it belongs to (geometry, s, n).

    Raises:
        CacheMismatchError: on a version or content-hash mismatch.
        GridFormatError: on a malformed file.
    """
    data = LockedFile(path).read_bytes()
    if data is None:
        raise CacheMismatchError(f"No SVD cache at '{path}'")
    cache = decode_cache(data, str(path))
    if not cache.matches(geometry, s, n):
        raise CacheMismatchError(f"SVD cache '{path}' belongs to a different (geometry, s, n)")
    return cache


def cache_path(cache_dir: Union[str, os.PathLike], geometry: SystemGeometry, s: float, n: int) -> Path:
    return Path(cache_dir) / f"svtd_{cache_key(geometry, s, n)[:16]}.atsv"


def resolve_cache_dir(cache_dir: Optional[Union[str, os.PathLike]] = None) -> Optional[Path]:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_DIR_ENV)
    return Path(env) if env else None


def load_or_build_cache(geometry: SystemGeometry, s: float, n: int,
                        cache_dir: Optional[Union[str, os.PathLike]] = None,
                        rank_tol: float = DEFAULT_RANK_TOL) -> SvtdCache:
    """
    Reuse the cache file for (geometry, s, n) or rebuild and store it.

    The check-build-write sequence runs under the file's lock, so concurrent
    runs sharing a directory build each cache once. Without a directory (and
    no ``ATMOTOMO_CACHE_DIR``) the decomposition is computed in memory.
    """
    directory = resolve_cache_dir(cache_dir)
    if directory is None:
        return decompose_all(geometry, s, n, rank_tol)
    path = cache_path(directory, geometry, s, n)
    locked = LockedFile(path, timeout=120)
    with locked:
        data = locked.read_bytes()
        if data is not None:
            try:
                cache = decode_cache(data, str(path))
                if cache.matches(geometry, s, n):
                    logger.info("SVD cache hit: %s", path)
                    return cache
                logger.info("SVD cache at %s belongs to another problem; rebuilding", path)
            except (GridFormatError, CacheMismatchError) as e:
                logger.warning("Discarding unreadable SVD cache %s: %s", path, e)
        else:
            logger.info("SVD cache miss: %s", path)
        cache = decompose_all(geometry, s, n, rank_tol)
        locked.write_bytes(encode_cache(cache))
        return cache
