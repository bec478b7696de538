"""
Experiment configuration.

Configs are JSON, YAML or TOML documents (angles in arcsec, lengths in
metres) parsed into frozen dataclasses. Unknown keys are rejected and every
default is filled in, so ``ExperimentConfig.to_dict()`` is the complete
record written to the run manifest.

Example document (JSON):

    {
        "name": "ngs6",
        "seed": 0,
        "geometry": {
            "aperture": {"outer_radius": 21.0, "inner_radius": 5.88},
            "layers": [{"height": 0.0, "weight": 0.75}, {"height": 4000.0, "weight": 0.15},
                       {"height": 12700.0, "weight": 0.1}],
            "asterisms": [{"count": 6, "diameter_arcsec": 60.0, "kind": "ngs"}]
        },
        "grid": {"n": 64, "extension_half_width": 27.0},
        "solver": {"kind": "svtd", "sobolev_order": 1.0, "filter": {"kind": "tikhonov", "alpha": 0.01}}
    }
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from .core import (
    DEFAULT_LGS_HEIGHT,
    ApertureSpec,
    ConfigError,
    FileReadError,
    GeometryError,
    GuideStar,
    LayerSpec,
    StarKind,
    SystemGeometry,
    ring_asterism,
)
from .forward import AdjointVariant
from .frame import SolverOptions
from .metrics import EvaluationGrid
from .storage import load_document
from .svtd import DEFAULT_RANK_TOL, FilterKind, FilterSpec
from .turbulence import KOLMOGOROV_EXPONENT, REFERENCE_FRIED_PARAMETER, TurbulenceParams

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "presets"


class SolverKind(str, Enum):
    SVTD = "svtd"
    FD = "fd"
    ITERATIVE_FD = "iterative_fd"
    GRADIENT = "gradient"

    @classmethod
    def list(cls) -> List[str]:
        return [kind.value for kind in cls]


def _section(data: Any, allowed: Tuple[str, ...], where: str) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"'{where}' must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{where}': {', '.join(unknown)} (allowed: {', '.join(allowed)})")
    return dict(data)


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{where}' must be a number, got {value!r}")
    return float(value)


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"'{where}' must be an integer, got {value!r}")
    return int(value)


def _enum(enum_cls, value: Any, where: str):
    try:
        return enum_cls(value)
    except ValueError:
        raise ConfigError(f"'{where}' must be one of {', '.join(enum_cls.list())}, got {value!r}") from None


@dataclass(frozen=True)
class StarConfig:
    x_arcsec: float
    y_arcsec: float
    kind: StarKind = StarKind.NGS

    @classmethod
    def from_dict(cls, data: Any, where: str) -> "StarConfig":
        d = _section(data, ("x_arcsec", "y_arcsec", "kind"), where)
        for key in ("x_arcsec", "y_arcsec"):
            if key not in d:
                raise ConfigError(f"'{where}.{key}' is required")
        return cls(_number(d["x_arcsec"], f"{where}.x_arcsec"), _number(d["y_arcsec"], f"{where}.y_arcsec"),
                   _enum(StarKind, d.get("kind", "ngs"), f"{where}.kind"))

    def to_dict(self) -> Dict[str, Any]:
        return {"x_arcsec": self.x_arcsec, "y_arcsec": self.y_arcsec, "kind": self.kind.value}


@dataclass(frozen=True)
class AsterismConfig:
    count: int
    diameter_arcsec: float
    kind: StarKind = StarKind.NGS
    first_angle_deg: float = 90.0

    @classmethod
    def from_dict(cls, data: Any, where: str) -> "AsterismConfig":
        d = _section(data, ("count", "diameter_arcsec", "kind", "first_angle_deg"), where)
        for key in ("count", "diameter_arcsec"):
            if key not in d:
                raise ConfigError(f"'{where}.{key}' is required")
        return cls(_integer(d["count"], f"{where}.count"), _number(d["diameter_arcsec"], f"{where}.diameter_arcsec"),
                   _enum(StarKind, d.get("kind", "ngs"), f"{where}.kind"),
                   _number(d.get("first_angle_deg", 90.0), f"{where}.first_angle_deg"))

    def to_dict(self) -> Dict[str, Any]:
        return {"count": self.count, "diameter_arcsec": self.diameter_arcsec, "kind": self.kind.value,
                "first_angle_deg": self.first_angle_deg}


@dataclass(frozen=True)
class GeometryConfig:
    """Aperture, layers and guide stars; explicit stars and ring asterisms are combined, NGS first."""
    outer_radius: float
    inner_radius: float = 0.0
    layers: Tuple[LayerSpec, ...] = ()
    stars: Tuple[StarConfig, ...] = ()
    asterisms: Tuple[AsterismConfig, ...] = ()
    lgs_height: float = DEFAULT_LGS_HEIGHT

    @classmethod
    def from_dict(cls, data: Any) -> "GeometryConfig":
        d = _section(data, ("aperture", "layers", "stars", "asterisms", "lgs_height"), "geometry")
        aperture = _section(d.get("aperture"), ("outer_radius", "inner_radius"), "geometry.aperture")
        if "outer_radius" not in aperture:
            raise ConfigError("'geometry.aperture.outer_radius' is required")
        layers = []
        for i, item in enumerate(d.get("layers") or []):
            ld = _section(item, ("height", "weight"), f"geometry.layers[{i}]")
            if "height" not in ld or "weight" not in ld:
                raise ConfigError(f"'geometry.layers[{i}]' needs height and weight")
            layers.append((_number(ld["height"], f"geometry.layers[{i}].height"),
                           _number(ld["weight"], f"geometry.layers[{i}].weight")))
        if not layers:
            raise ConfigError("'geometry.layers' must list at least one layer")
        stars = tuple(StarConfig.from_dict(s, f"geometry.stars[{i}]") for i, s in enumerate(d.get("stars") or []))
        asterisms = tuple(AsterismConfig.from_dict(a, f"geometry.asterisms[{i}]")
                          for i, a in enumerate(d.get("asterisms") or []))
        if not stars and not asterisms:
            raise ConfigError("'geometry' needs 'stars' or 'asterisms'")
        try:
            layer_specs = tuple(LayerSpec(h, w) for h, w in layers)
        except GeometryError as e:
            raise ConfigError(f"Invalid layer in 'geometry.layers': {e}") from e
        return cls(
            outer_radius=_number(aperture["outer_radius"], "geometry.aperture.outer_radius"),
            inner_radius=_number(aperture.get("inner_radius", 0.0), "geometry.aperture.inner_radius"),
            layers=layer_specs,
            stars=stars,
            asterisms=asterisms,
            lgs_height=_number(d.get("lgs_height", DEFAULT_LGS_HEIGHT), "geometry.lgs_height"),
        )

    def guide_stars(self) -> Tuple[GuideStar, ...]:
        stars = [GuideStar.from_arcsec(s.x_arcsec, s.y_arcsec, s.kind) for s in self.stars]
        for a in self.asterisms:
            stars.extend(ring_asterism(a.count, a.diameter_arcsec, a.kind, a.first_angle_deg))
        # stable: NGS keep their order, then LGS
        return tuple(sorted(stars, key=lambda s: s.kind is StarKind.LGS))

    def build(self, extension_half_width: float) -> SystemGeometry:
        return SystemGeometry(
            aperture=ApertureSpec(self.outer_radius, self.inner_radius),
            stars=self.guide_stars(),
            layers=self.layers,
            extension_half_width=extension_half_width,
            lgs_height=self.lgs_height,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "aperture": {"outer_radius": self.outer_radius, "inner_radius": self.inner_radius},
            "layers": [{"height": l.height, "weight": l.weight} for l in self.layers],
            "stars": [s.to_dict() for s in self.stars],
            "asterisms": [a.to_dict() for a in self.asterisms],
            "lgs_height": self.lgs_height,
        }


@dataclass(frozen=True)
class GridConfig:
    n: int = 64
    extension_half_width: float = 27.0

    @classmethod
    def from_dict(cls, data: Any) -> "GridConfig":
        d = _section(data, ("n", "extension_half_width"), "grid")
        n = _integer(d.get("n", cls.n), "grid.n")
        if n < 4 or n % 2:
            raise ConfigError(f"'grid.n' must be an even integer >= 4, got {n}")
        T = _number(d.get("extension_half_width", cls.extension_half_width), "grid.extension_half_width")
        if not T > 0.0:
            raise ConfigError(f"'grid.extension_half_width' must be positive, got {T}")
        return cls(n, T)

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "extension_half_width": self.extension_half_width}


@dataclass(frozen=True)
class TurbulenceConfig:
    fried_parameter: float = REFERENCE_FRIED_PARAMETER
    spectral_exponent: float = KOLMOGOROV_EXPONENT
    outer_scale: float = 1.0e4

    @classmethod
    def from_dict(cls, data: Any) -> "TurbulenceConfig":
        d = _section(data, ("fried_parameter", "spectral_exponent", "outer_scale"), "turbulence")
        return cls(
            _number(d.get("fried_parameter", cls.fried_parameter), "turbulence.fried_parameter"),
            _number(d.get("spectral_exponent", cls.spectral_exponent), "turbulence.spectral_exponent"),
            _number(d.get("outer_scale", cls.outer_scale), "turbulence.outer_scale"),
        )

    def params(self, seed: int) -> TurbulenceParams:
        return TurbulenceParams(self.fried_parameter, self.spectral_exponent, self.outer_scale, seed)

    def to_dict(self) -> Dict[str, Any]:
        return {"fried_parameter": self.fried_parameter, "spectral_exponent": self.spectral_exponent,
                "outer_scale": self.outer_scale}


@dataclass(frozen=True)
class FilterConfig:
    kind: FilterKind = FilterKind.TIKHONOV
    alpha: float = 1e-2
    sigma_min: float = 0.0
    rank_tol: float = DEFAULT_RANK_TOL

    @classmethod
    def from_dict(cls, data: Any) -> "FilterConfig":
        d = _section(data, ("kind", "alpha", "sigma_min", "rank_tol"), "solver.filter")
        return cls(
            _enum(FilterKind, d.get("kind", cls.kind.value), "solver.filter.kind"),
            _number(d.get("alpha", cls.alpha), "solver.filter.alpha"),
            _number(d.get("sigma_min", cls.sigma_min), "solver.filter.sigma_min"),
            _number(d.get("rank_tol", cls.rank_tol), "solver.filter.rank_tol"),
        )

    def spec(self) -> FilterSpec:
        return FilterSpec(self.kind, alpha=self.alpha, sigma_min=self.sigma_min, rank_tol=self.rank_tol)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "alpha": self.alpha, "sigma_min": self.sigma_min, "rank_tol": self.rank_tol}


@dataclass(frozen=True)
class SolverConfig:
    kind: SolverKind = SolverKind.SVTD
    sobolev_order: float = 1.0
    filter: FilterConfig = field(default_factory=FilterConfig)
    iterations: int = 5
    step_scale: float = 1.0
    adjoint: AdjointVariant = AdjointVariant.TRANSPOSE
    divergence_factor: float = 10.0

    @classmethod
    def from_dict(cls, data: Any) -> "SolverConfig":
        d = _section(data, ("kind", "sobolev_order", "filter", "iterations", "step_scale", "adjoint",
                            "divergence_factor"), "solver")
        config = cls(
            kind=_enum(SolverKind, d.get("kind", cls.kind.value), "solver.kind"),
            sobolev_order=_number(d.get("sobolev_order", cls.sobolev_order), "solver.sobolev_order"),
            filter=FilterConfig.from_dict(d.get("filter")),
            iterations=_integer(d.get("iterations", cls.iterations), "solver.iterations"),
            step_scale=_number(d.get("step_scale", cls.step_scale), "solver.step_scale"),
            adjoint=_enum(AdjointVariant, d.get("adjoint", cls.adjoint.value), "solver.adjoint"),
            divergence_factor=_number(d.get("divergence_factor", cls.divergence_factor), "solver.divergence_factor"),
        )
        if config.sobolev_order < 0.0:
            raise ConfigError(f"'solver.sobolev_order' must be >= 0, got {config.sobolev_order}")
        config.filter.spec()
        config.options()
        return config

    def options(self, threads: int = 1) -> SolverOptions:
        iterations = 1 if self.kind is SolverKind.FD else self.iterations
        return SolverOptions(iterations=iterations, step_scale=self.step_scale, adjoint=self.adjoint,
                             divergence_factor=self.divergence_factor, threads=threads)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "sobolev_order": self.sobolev_order,
            "filter": self.filter.to_dict(),
            "iterations": self.iterations,
            "step_scale": self.step_scale,
            "adjoint": self.adjoint.value,
            "divergence_factor": self.divergence_factor,
        }


@dataclass(frozen=True)
class EvaluationConfig:
    """Either explicit directions, or a ``grid_size`` x ``grid_size`` grid over ``field_of_view_arcsec``."""
    directions_arcsec: Optional[Tuple[Tuple[float, float], ...]] = None
    grid_size: int = 5
    field_of_view_arcsec: float = 120.0
    remove_piston: bool = False

    @classmethod
    def from_dict(cls, data: Any) -> "EvaluationConfig":
        d = _section(data, ("directions_arcsec", "grid_size", "field_of_view_arcsec", "remove_piston"), "evaluation")
        directions = d.get("directions_arcsec")
        if directions is not None:
            try:
                directions = tuple((_number(x, "evaluation.directions_arcsec"), _number(y, "evaluation.directions_arcsec"))
                                   for x, y in directions)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"'evaluation.directions_arcsec' must be a list of [x, y] pairs: {e}") from e
        grid_size = _integer(d.get("grid_size", cls.grid_size), "evaluation.grid_size")
        if grid_size < 1:
            raise ConfigError(f"'evaluation.grid_size' must be >= 1, got {grid_size}")
        remove_piston = d.get("remove_piston", cls.remove_piston)
        if not isinstance(remove_piston, bool):
            raise ConfigError(f"'evaluation.remove_piston' must be true or false, got {remove_piston!r}")
        return cls(directions, grid_size,
                   _number(d.get("field_of_view_arcsec", cls.field_of_view_arcsec), "evaluation.field_of_view_arcsec"),
                   remove_piston)

    def grid(self) -> EvaluationGrid:
        if self.directions_arcsec is not None:
            return EvaluationGrid(self.directions_arcsec)
        return EvaluationGrid.square(self.grid_size, self.field_of_view_arcsec)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "directions_arcsec": None if self.directions_arcsec is None else [list(d) for d in self.directions_arcsec],
            "grid_size": self.grid_size,
            "field_of_view_arcsec": self.field_of_view_arcsec,
            "remove_piston": self.remove_piston,
        }


@dataclass(frozen=True)
class PicardConfig:
    threshold: float = 1.5

    @classmethod
    def from_dict(cls, data: Any) -> "PicardConfig":
        d = _section(data, ("threshold",), "picard")
        threshold = _number(d.get("threshold", cls.threshold), "picard.threshold")
        if not threshold > 1.0:
            raise ConfigError(f"'picard.threshold' must exceed 1, got {threshold}")
        return cls(threshold)

    def to_dict(self) -> Dict[str, Any]:
        return {"threshold": self.threshold}


_TOP_LEVEL = ("name", "seed", "output_dir", "threads", "noise_level", "geometry", "grid", "turbulence",
              "solver", "evaluation", "picard")


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: GeometryConfig
    grid: GridConfig = field(default_factory=GridConfig)
    turbulence: TurbulenceConfig = field(default_factory=TurbulenceConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    picard: PicardConfig = field(default_factory=PicardConfig)
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "atmotomo-out"
    threads: int = 1
    noise_level: float = 0.0

    @classmethod
    def from_dict(cls, data: Any) -> "ExperimentConfig":
        d = _section(data, _TOP_LEVEL, "config")
        if "geometry" not in d:
            raise ConfigError("'geometry' is required")
        seed = _integer(d.get("seed", 0), "seed")
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError(f"'seed' must be an unsigned 64-bit integer, got {seed}")
        threads = _integer(d.get("threads", 1), "threads")
        if threads < 1:
            raise ConfigError(f"'threads' must be >= 1, got {threads}")
        noise = _number(d.get("noise_level", 0.0), "noise_level")
        if noise < 0.0:
            raise ConfigError(f"'noise_level' must be >= 0, got {noise}")
        name = d.get("name", "experiment")
        output_dir = d.get("output_dir", "atmotomo-out")
        if not isinstance(name, str) or not isinstance(output_dir, str):
            raise ConfigError("'name' and 'output_dir' must be strings")
        config = cls(
            geometry=GeometryConfig.from_dict(d["geometry"]),
            grid=GridConfig.from_dict(d.get("grid")),
            turbulence=TurbulenceConfig.from_dict(d.get("turbulence")),
            solver=SolverConfig.from_dict(d.get("solver")),
            evaluation=EvaluationConfig.from_dict(d.get("evaluation")),
            picard=PicardConfig.from_dict(d.get("picard")),
            name=name,
            seed=seed,
            output_dir=output_dir,
            threads=threads,
            noise_level=noise,
        )
        config.turbulence.params(seed)
        return config

    def build_geometry(self) -> SystemGeometry:
        return self.geometry.build(self.grid.extension_half_width)

    def turbulence_params(self) -> TurbulenceParams:
        return self.turbulence.params(self.seed)

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[Union[str, os.PathLike]] = None,
                       threads: Optional[int] = None) -> "ExperimentConfig":
        """Apply CLI overrides; None leaves a value unchanged."""
        changes: Dict[str, Any] = {}
        if seed is not None:
            if seed < 0 or seed >= 2 ** 64:
                raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {seed}")
            changes["seed"] = int(seed)
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        if threads is not None:
            if threads < 1:
                raise ConfigError(f"Thread count must be >= 1, got {threads}")
            changes["threads"] = int(threads)
        return replace(self, **changes) if changes else self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "threads": self.threads,
            "noise_level": self.noise_level,
            "geometry": self.geometry.to_dict(),
            "grid": self.grid.to_dict(),
            "turbulence": self.turbulence.to_dict(),
            "solver": self.solver.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "picard": self.picard.to_dict(),
        }

    def content_hash(self) -> str:
        """sha256 of the canonical config; output_dir and threads do not affect results and are left out."""
        data = self.to_dict()
        data.pop("output_dir")
        data.pop("threads")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()


def load_config(path: Union[str, os.PathLike]) -> ExperimentConfig:
    """
    Load an experiment config from a .json, .yaml/.yml or .toml file.

    Raises:
        FileReadError: when the file is missing or unreadable.
        ConfigError: when the document violates the schema.
    """
    data = load_document(path)
    if data is None:
        raise ConfigError(f"Config file '{path}' is empty")
    config = ExperimentConfig.from_dict(data)
    logger.info("Loaded config '%s' from %s", config.name, path)
    return config


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.json"))


def load_preset(name: str) -> ExperimentConfig:
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"Unknown preset '{name}' (available: {', '.join(list_presets())})")
    try:
        return load_config(path)
    except FileReadError as e:
        raise ConfigError(f"Preset '{name}' is unreadable: {e}") from e
