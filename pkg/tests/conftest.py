from __future__ import annotations

import pathlib
from typing import Any

import pytest

from lasalt import expectation
from lasalt.grid import TorusGrid
from lasalt.noise import build_noise_basis
from lasalt.runconfig import RunConfig


RESOURCES = pathlib.Path(__file__).parent / "testresources"


def small_config_dict(**sections: Any) -> dict[str, Any]:
    raw: dict[str, Any] = {
        "grid": {"n": 16},
        "physics": {"g": 1.0},
        "noise": "canonical(0.3)",
        "initial": {
            "omega": "taylor_green(0.5)",
            "theta": "theta_blob(3.14159, 3.14159, 0.8, 1.0)",
        },
        "solver": {"dt": 0.005, "t_end": 0.05, "save_every": 2},
        "ensemble": {"members": 8, "seed": 7, "moments_P": 4, "shard_size": 4},
        "output": {"directory": "lasalt-test"},
    }
    for key, value in sections.items():
        raw[key] = value if not isinstance(value, dict) else raw.get(key, {}) | value
    return raw


@pytest.fixture
def grid() -> TorusGrid:
    return TorusGrid(16)


@pytest.fixture
def grid32() -> TorusGrid:
    return TorusGrid(32)


@pytest.fixture
def config_dict() -> dict[str, Any]:
    return small_config_dict()


@pytest.fixture
def config() -> RunConfig:
    return RunConfig.from_dict(small_config_dict())


@pytest.fixture
def basis(config: RunConfig):
    return build_noise_basis(config.noise, config.grid.to_grid())


@pytest.fixture(scope="session")
def trajectory() -> expectation.ExpectationTrajectory:
    return expectation.run_expectation(RunConfig.from_dict(small_config_dict()))


@pytest.fixture
def make_config():
    """Build a small config with some sections overridden."""

    def make(**sections: Any) -> RunConfig:
        return RunConfig.from_dict(small_config_dict(**sections))

    return make
