"""Run configuration: schema, defaults, validation and initial-condition presets."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import pathlib
import tomllib
from typing import TYPE_CHECKING, Any, Literal, Self

import numpy as np

from lasalt import deepmerge, serialization, snapshots, utils
from lasalt.errors import ConfigError
from lasalt.fields import ConstantVector, ScalarField, Tensor2Field
from lasalt.grid import DEFAULT_DEALIAS, TWO_PI, TorusGrid
from lasalt.noise import NoiseSpec, parse_noise_spec


if TYPE_CHECKING:
    import os
    from collections.abc import Callable, Mapping


logger = logging.getLogger(__name__)

RESOURCES = pathlib.Path(__file__).parent / "resources"
SchemeStr = Literal["strat", "ito"]
OutputFormatStr = Literal["lsf1", "csv", "json"]
MAX_MOMENT_ORDER = 6

DEFAULTS: dict[str, Any] = {
    "grid": {"n": None, "length": TWO_PI, "dealias_fraction": DEFAULT_DEALIAS},
    "physics": {"g": 1.0},
    "noise": None,
    "initial": {
        "omega": None,
        "theta": None,
        "ubar": [0.0, 0.0],
        "moments": {"theta2": "zero", "dtheta2": "zero", "cross": "zero", "u2": "zero"},
    },
    "solver": {
        "dt": None,
        "t_end": None,
        "save_every": 1,
        "scheme": "strat",
        "enable_u_equation": False,
        "require_parabolic": True,
    },
    "ensemble": {
        "members": 1,
        "seed": 0,
        "moments_P": 4,
        "shard_size": 25,
        "retain_members": False,
        "report_every": 0,
        "discretization_tolerance": 0.05,
    },
    "output": {"directory": "lasalt-out", "formats": ["lsf1", "csv", "json"]},
}
"""Documented defaults; ``None`` marks a required entry."""

HASHED_SECTIONS = ("grid", "physics", "noise", "initial", "solver")


# -- presets -----------------------------------------------------------------------


def zero_field(grid: TorusGrid) -> np.ndarray:
    return np.zeros(grid.shape)


def taylor_green(grid: TorusGrid, a: float) -> np.ndarray:
    x, y = grid.mesh
    s = TWO_PI / grid.length
    return a * (np.cos(s * x) + np.cos(s * y))


def theta_blob(grid: TorusGrid, cx: float, cy: float, r: float, amp: float) -> np.ndarray:
    """Gaussian bump summed over the 3x3 periodic images of its centre."""
    if not r > 0:
        msg = f"theta_blob radius must be positive, got {r}"
        raise ConfigError(msg)
    x, y = grid.mesh
    total = np.zeros(grid.shape)
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            dx = x - cx - i * grid.length
            dy = y - cy - j * grid.length
            total += np.exp(-(dx**2 + dy**2) / r**2)
    return amp * total


def blob_anomaly(
    grid: TorusGrid, cx: float, cy: float, r: float, amp: float
) -> np.ndarray:
    values = theta_blob(grid, cx, cy, r, amp)
    return values - values.mean()


def single_mode(
    grid: TorusGrid, kx: float, ky: float, amp_cos: float, amp_sin: float
) -> np.ndarray:
    if kx != int(kx) or ky != int(ky):
        msg = f"mode() needs integer wavenumbers, got {kx}, {ky}"
        raise ConfigError(msg)
    x, y = grid.mesh
    phase = TWO_PI / grid.length * (kx * x + ky * y)
    return amp_cos * np.cos(phase) + amp_sin * np.sin(phase)


@dataclasses.dataclass(frozen=True)
class Preset:
    """An entry of the preset registry file."""

    identifier: str
    fn: str
    params: tuple[str, ...] = ()
    description: str | None = None
    example: str | None = None

    def __repr__(self) -> str:
        return utils.get_repr(self, self.identifier)

    @property
    def preset_fn(self) -> Callable[..., np.ndarray]:
        return utils.as_callable(self.fn)

    def evaluate(self, grid: TorusGrid, args: tuple[float, ...]) -> np.ndarray:
        if len(args) != len(self.params):
            msg = f"Preset {self.identifier!r} takes {list(self.params)}, got {len(args)}"
            raise ConfigError(msg)
        return self.preset_fn(grid, *args)


@functools.cache
def load_presets(path: str | None = None) -> dict[str, Preset]:
    """Read the preset registry (the packaged ``presets.toml`` by default)."""
    text = (pathlib.Path(path) if path else RESOURCES / "presets.toml").read_text("utf-8")
    data = tomllib.loads(text)
    return {
        name: Preset(name, dct["fn"], tuple(dct.get("params", ())),
                     dct.get("description"), dct.get("example"))
        for name, dct in data.get("presets", {}).items()
    }


def scalar_from_spec(
    spec: str,
    grid: TorusGrid,
    *,
    mean_free: bool = False,
    base_dir: str | os.PathLike[str] | None = None,
) -> ScalarField:
    """Evaluate a preset expression or read an LSF1 file into a scalar field.

    Args:
        spec: Preset call like ``"taylor_green(1.0)"`` or a path / URL to an LSF1 file
        grid: Target grid
        mean_free: Remove the spatial mean (vorticity data)
        base_dir: Directory relative paths are resolved against
    """
    call = utils.parse_call(spec)
    presets = load_presets()
    if call is not None and call[0] in presets:
        values = presets[call[0]].evaluate(grid, call[1])
        if mean_free:
            values = values - values.mean()
        return ScalarField(values, grid)
    field = snapshots.read_lsf1(_resolve_path(spec, base_dir)).to_field(ScalarField, grid)
    if mean_free:
        field = field - field.mean()
    return field


def tensor_from_spec(
    spec: str, grid: TorusGrid, *, base_dir: str | os.PathLike[str] | None = None
) -> Tensor2Field:
    """``"zero"`` or an LSF1 file with four components."""
    if spec.strip() == "zero":
        return Tensor2Field.zeros(grid)
    snap = snapshots.read_lsf1(_resolve_path(spec, base_dir))
    return snap.to_field(Tensor2Field, grid)


def _resolve_path(spec: str, base_dir: str | os.PathLike[str] | None) -> str:
    if base_dir is None or "://" in spec or pathlib.PurePath(spec).is_absolute():
        return spec
    return str(pathlib.Path(base_dir) / spec)


# -- schema ------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class GridConfig:
    n: int
    """Nodes per axis."""
    length: float = TWO_PI
    """Domain period."""
    dealias_fraction: float = DEFAULT_DEALIAS
    """Fraction of the resolved band kept after products."""

    def to_grid(self) -> TorusGrid:
        return TorusGrid(self.n, self.length, self.dealias_fraction)


@dataclasses.dataclass(frozen=True)
class PhysicsConfig:
    g: float = 1.0
    """Gravity (buoyancy) constant."""


@dataclasses.dataclass(frozen=True)
class MomentsInit:
    """Initial moment fields; zero unless given as presets / LSF1 files."""

    theta2: str = "zero"
    dtheta2: str = "zero"
    cross: str = "zero"
    u2: str = "zero"


@dataclasses.dataclass(frozen=True)
class InitialConfig:
    omega: str
    """Initial vorticity (preset or LSF1 path), mean removed."""
    theta: str
    """Initial buoyancy (preset or LSF1 path)."""
    ubar: tuple[float, float] = (0.0, 0.0)
    """Initial mean velocity."""
    moments: MomentsInit = dataclasses.field(default_factory=MomentsInit)


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    dt: float
    """Time step of every solver."""
    t_end: float
    """Final time."""
    save_every: int = 1
    """Snapshot stride of the expectation trajectory."""
    scheme: SchemeStr = "strat"
    """Stochastic integrator of the SPDE members."""
    enable_u_equation: bool = False
    """Also evolve the circulation one-form u."""
    require_parabolic: bool = True
    """Refuse degenerate noise for the expectation solve."""

    @property
    def n_steps(self) -> int:
        return round(self.t_end / self.dt)


@dataclasses.dataclass(frozen=True)
class EnsembleConfig:
    members: int = 1
    seed: int = 0
    moments_P: int = 4  # noqa: N815
    """Highest central moment accumulated."""
    shard_size: int = 25
    """Members advanced together; also the unit of the fixed merge tree."""
    retain_members: bool = False
    """Keep every member's final snapshot (debugging, small ensembles)."""
    report_every: int = 0
    """Step stride of the statistics reports; 0 means final time only."""
    discretization_tolerance: float = 0.05
    """Floor of the closure-comparison gate."""


@dataclasses.dataclass(frozen=True)
class OutputConfig:
    directory: str = "lasalt-out"
    formats: tuple[OutputFormatStr, ...] = ("lsf1", "csv", "json")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated run configuration."""

    grid: GridConfig
    noise: NoiseSpec
    initial: InitialConfig
    solver: SolverConfig
    physics: PhysicsConfig = dataclasses.field(default_factory=PhysicsConfig)
    ensemble: EnsembleConfig = dataclasses.field(default_factory=EnsembleConfig)
    output: OutputConfig = dataclasses.field(default_factory=OutputConfig)
    base_dir: str | None = dataclasses.field(default=None, compare=False)
    """Directory of the config file; relative LSF1 paths resolve against it."""

    def __repr__(self) -> str:
        return utils.get_repr(
            self, n=self.grid.n, dt=self.solver.dt, hash=self.config_hash
        )

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | None = None) -> Self:
        """Merge ``raw`` over the documented defaults and validate.

        Raises:
            ConfigError: On unknown keys, missing required entries or invalid values.
        """
        merged = deepmerge.StrictMerger().merge(dict(raw), DEFAULTS)
        if missing := deepmerge.missing_keys(merged):
            msg = f"Missing required config entries: {', '.join(missing)}"
            raise ConfigError(msg)
        try:
            cfg = cls(
                grid=GridConfig(
                    n=_as_int(merged["grid"]["n"], "grid.n"),
                    length=float(merged["grid"]["length"]),
                    dealias_fraction=float(merged["grid"]["dealias_fraction"]),
                ),
                physics=PhysicsConfig(g=float(merged["physics"]["g"])),
                noise=parse_noise_spec(merged["noise"]),
                initial=InitialConfig(
                    omega=str(merged["initial"]["omega"]),
                    theta=str(merged["initial"]["theta"]),
                    ubar=_as_pair(merged["initial"]["ubar"], "initial.ubar"),
                    moments=MomentsInit(**merged["initial"]["moments"]),
                ),
                solver=SolverConfig(
                    dt=float(merged["solver"]["dt"]),
                    t_end=float(merged["solver"]["t_end"]),
                    save_every=_as_int(
                        merged["solver"]["save_every"], "solver.save_every"
                    ),
                    scheme=merged["solver"]["scheme"],
                    enable_u_equation=bool(merged["solver"]["enable_u_equation"]),
                    require_parabolic=bool(merged["solver"]["require_parabolic"]),
                ),
                ensemble=EnsembleConfig(
                    members=_as_int(merged["ensemble"]["members"], "ensemble.members"),
                    seed=_as_int(merged["ensemble"]["seed"], "ensemble.seed"),
                    moments_P=_as_int(
                        merged["ensemble"]["moments_P"], "ensemble.moments_P"
                    ),
                    shard_size=_as_int(
                        merged["ensemble"]["shard_size"], "ensemble.shard_size"
                    ),
                    retain_members=bool(merged["ensemble"]["retain_members"]),
                    report_every=_as_int(
                        merged["ensemble"]["report_every"], "ensemble.report_every"
                    ),
                    discretization_tolerance=float(
                        merged["ensemble"]["discretization_tolerance"]
                    ),
                ),
                output=OutputConfig(
                    directory=str(merged["output"]["directory"]),
                    formats=tuple(merged["output"]["formats"]),
                ),
                base_dir=base_dir,
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            msg = f"Invalid config value: {e}"
            raise ConfigError(msg) from e
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> Self:
        """Load a JSON or TOML config from any fsspec location."""
        import upath

        raw = serialization.load_file(path)
        logger.debug("Loaded config %s", path)
        return cls.from_dict(raw, base_dir=str(upath.UPath(path).parent))

    def as_dict(self) -> dict[str, Any]:
        """Plain json-like form; ``from_dict(cfg.as_dict()) == cfg``."""
        return {
            "grid": dataclasses.asdict(self.grid),
            "physics": dataclasses.asdict(self.physics),
            "noise": self.noise.as_config(),
            "initial": {
                "omega": self.initial.omega,
                "theta": self.initial.theta,
                "ubar": list(self.initial.ubar),
                "moments": dataclasses.asdict(self.initial.moments),
            },
            "solver": dataclasses.asdict(self.solver),
            "ensemble": dataclasses.asdict(self.ensemble),
            "output": {
                "directory": self.output.directory,
                "formats": list(self.output.formats),
            },
        }

    def to_file(self, path: str | os.PathLike[str]) -> None:
        serialization.dump_file(self.as_dict(), path)

    @property
    def config_hash(self) -> str:
        """md5 over the physics-relevant sections."""
        dct = self.as_dict()
        return utils.get_hash({k: dct[k] for k in HASHED_SECTIONS}, hash_length=None)

    def validate(self) -> None:
        """Check the invariants that the dataclass types alone cannot express."""
        self.grid.to_grid()
        checks = [
            (self.solver.dt > 0, f"solver.dt must be positive, got {self.solver.dt}"),
            (
                self.solver.t_end >= self.solver.dt,
                f"solver.t_end must be >= dt, got {self.solver.t_end}",
            ),
            (
                math.isclose(self.solver.n_steps * self.solver.dt, self.solver.t_end,
                             rel_tol=1e-9),
                "solver.t_end must be an integer multiple of solver.dt",
            ),
            (self.solver.save_every >= 1, "solver.save_every must be >= 1"),
            (
                self.solver.n_steps % max(self.solver.save_every, 1) == 0,
                "the number of steps must be a multiple of solver.save_every",
            ),
            (
                self.solver.scheme in ("strat", "ito"),
                f"solver.scheme must be 'strat' or 'ito', got {self.solver.scheme!r}",
            ),
            (self.ensemble.members >= 1, "ensemble.members must be >= 1"),
            (
                2 <= self.ensemble.moments_P <= MAX_MOMENT_ORDER,  # noqa: PLR2004
                f"ensemble.moments_P must be in [2, {MAX_MOMENT_ORDER}]",
            ),
            (self.ensemble.shard_size >= 1, "ensemble.shard_size must be >= 1"),
            (
                0 <= self.ensemble.seed < 2**64,
                "ensemble.seed must be a non-negative 64-bit integer",
            ),
            (self.ensemble.report_every >= 0, "ensemble.report_every must be >= 0"),
            (
                self.ensemble.discretization_tolerance >= 0,
                "ensemble.discretization_tolerance must be >= 0",
            ),
            (
                set(self.output.formats) <= {"lsf1", "csv", "json"},
                f"Unknown output formats in {list(self.output.formats)}",
            ),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def with_grid(self, n: int) -> RunConfig:
        """Same run on a different resolution."""
        return dataclasses.replace(self, grid=dataclasses.replace(self.grid, n=n))

    def with_solver(self, **kwargs: Any) -> RunConfig:
        return dataclasses.replace(
            self, solver=dataclasses.replace(self.solver, **kwargs)
        )

    def with_ensemble(self, **kwargs: Any) -> RunConfig:
        return dataclasses.replace(
            self, ensemble=dataclasses.replace(self.ensemble, **kwargs)
        )

    def initial_fields(self) -> tuple[ScalarField, ScalarField, ConstantVector]:
        """``(Omega_0, Theta_0, Ubar_0)`` on the configured grid."""
        grid = self.grid.to_grid()
        omega = scalar_from_spec(
            self.initial.omega, grid, mean_free=True, base_dir=self.base_dir
        )
        theta = scalar_from_spec(self.initial.theta, grid, base_dir=self.base_dir)
        return omega, theta, ConstantVector(*self.initial.ubar)


def _as_int(value: Any, key: str) -> int:
    if isinstance(value, bool) or not float(value).is_integer():
        msg = f"{key} must be an integer, got {value!r}"
        raise ConfigError(msg)
    return int(value)


def _as_pair(value: Any, key: str) -> tuple[float, float]:
    if not isinstance(value, list | tuple) or len(value) != 2:  # noqa: PLR2004
        msg = f"{key} must be a list of two numbers, got {value!r}"
        raise ConfigError(msg)
    return float(value[0]), float(value[1])


def desk_config() -> RunConfig:
    """The packaged desk-scale configuration used by ``lasalt verify``."""
    return RunConfig.from_file(RESOURCES / "desk.json")


if __name__ == "__main__":
    cfg = desk_config()
    print(cfg, cfg.as_dict())
