"""Exception hierarchy shared by all solvers."""

from __future__ import annotations

from typing import TYPE_CHECKING


if TYPE_CHECKING:
    from collections.abc import Sequence


class LasaltError(Exception):
    """Base class for all errors raised by lasalt."""


class ConfigError(LasaltError, ValueError):
    """A run configuration violates the schema."""


class ConfigMismatchError(LasaltError):
    """Two statistics objects were built from different configurations."""


class HashMismatchError(LasaltError):
    """A trajectory on disk does not match the config or its recorded hashes."""


class NumericalError(LasaltError):
    """Base class for failures inside the numerics."""


class NonZeroMeanError(NumericalError):
    """An inversion requiring a mean-free input got a field with nonzero mean."""

    def __init__(self, msg: str, mean: float = 0.0) -> None:
        super().__init__(msg)
        self.mean = mean


class GridMismatchError(NumericalError, ValueError):
    """Operands live on different grids."""


class EllipticityViolationError(NumericalError):
    """The noise basis is not uniformly elliptic but a parabolic solve was requested."""

    def __init__(self, msg: str, lambda_min: float = 0.0) -> None:
        super().__init__(msg)
        self.lambda_min = lambda_min


class InstabilityError(NumericalError):
    """A field blew up during a time step."""

    def __init__(
        self,
        msg: str,
        step_index: int = -1,
        field: str = "",
        growth: float = float("inf"),
        member_index: int | None = None,
    ) -> None:
        super().__init__(msg)
        self.step_index = step_index
        self.field = field
        self.growth = growth
        self.member_index = member_index
        """Position of the failing member inside a batched state."""


class TrajectoryExhaustedError(NumericalError):
    """A solver asked for expectation data outside the archived time range."""


class TimeMisalignedError(NumericalError):
    """Two objects that must share a time level do not."""


class JacobianDegenerateError(NumericalError):
    """A flow map Jacobian became (nearly) singular."""

    def __init__(
        self,
        msg: str,
        node: tuple[int, int] = (0, 0),
        determinant: float = 0.0,
    ) -> None:
        super().__init__(msg)
        self.node = node
        self.determinant = determinant


class MemberFailedError(NumericalError):
    """An ensemble member failed; wraps the original error."""

    def __init__(
        self, msg: str, member_id: int, shard: Sequence[int] = ()
    ) -> None:
        super().__init__(msg)
        self.member_id = member_id
        self.shard = tuple(shard)
        """Members that were stepped together with the failing one."""


class SeamContaminationWarning(UserWarning):
    """Fluctuation mass reached the seam of the sawtooth coordinate y."""


class SnapshotFormatError(ConfigError):
    """A file is not a valid LSF1 snapshot or does not fit the expected field."""
