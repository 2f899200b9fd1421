"""LSF1 field snapshots, run directories and diagnostics tables.

LSF1 layout (little endian): magic ``b"LSF1"``, u32 grid_n, u32 n_components,
u64 step_index, f64 time, then ``n_components * grid_n**2`` f64 values, row-major
with the y-index outermost, components concatenated.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
from typing import TYPE_CHECKING, Any

import numpy as np
import upath

from lasalt import utils
from lasalt.errors import ConfigError, HashMismatchError, SnapshotFormatError


if TYPE_CHECKING:
    import os
    from collections.abc import Iterable, Mapping, Sequence

    from lasalt.fields import GridField
    from lasalt.grid import TorusGrid


logger = logging.getLogger(__name__)

MAGIC = b"LSF1"
HEADER_DTYPE = np.dtype([
    ("magic", "S4"),
    ("n", "<u4"),
    ("ncomp", "<u4"),
    ("step", "<u8"),
    ("time", "<f8"),
])


@dataclasses.dataclass(frozen=True, eq=False)
class Snapshot:
    """Decoded content of one LSF1 file."""

    n: int
    n_components: int
    step: int
    time: float
    values: np.ndarray
    """Shape ``(n_components, n, n)``."""

    def __repr__(self) -> str:
        return utils.get_repr(
            self, n=self.n, n_components=self.n_components, step=self.step, time=self.time
        )

    def to_field[F: GridField](self, cls: type[F], grid: TorusGrid) -> F:
        """Reshape the values into a field of the given kind on ``grid``."""
        expected = int(np.prod(cls.component_shape, dtype=int))
        if self.n != grid.n or self.n_components != expected:
            msg = (
                f"Snapshot with n={self.n}, {self.n_components} components "
                f"does not fit a {cls.__name__} on {grid!r}"
            )
            raise SnapshotFormatError(msg)
        values = self.values.reshape(*cls.component_shape, grid.n, grid.n)
        return cls(values, grid)


def encode_lsf1(values: np.ndarray, step: int = 0, time: float = 0.0) -> bytes:
    """Serialise component-stacked values (``(..., n, n)``) to LSF1 bytes."""
    arr = np.asarray(values, dtype=np.float64)
    n = arr.shape[-1]
    if arr.ndim < 2 or arr.shape[-2] != n:  # noqa: PLR2004
        msg = f"LSF1 needs square grid data, got shape {arr.shape}"
        raise SnapshotFormatError(msg)
    flat = arr.reshape(-1, n, n)
    header = np.array([(MAGIC, n, flat.shape[0], step, time)], dtype=HEADER_DTYPE)
    return header.tobytes() + flat.astype("<f8").tobytes()


def decode_lsf1(data: bytes, source: str = "<bytes>") -> Snapshot:
    if len(data) < HEADER_DTYPE.itemsize:
        msg = f"{source}: too short for an LSF1 header"
        raise SnapshotFormatError(msg)
    header = np.frombuffer(data, dtype=HEADER_DTYPE, count=1)[0]
    if header["magic"] != MAGIC:
        msg = f"{source}: bad magic {bytes(header['magic'])!r}"
        raise SnapshotFormatError(msg)
    n, ncomp = int(header["n"]), int(header["ncomp"])
    body = data[HEADER_DTYPE.itemsize :]
    if len(body) != 8 * ncomp * n * n:
        msg = f"{source}: expected {ncomp * n * n} values, got {len(body) // 8}"
        raise SnapshotFormatError(msg)
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(ncomp, n, n)
    return Snapshot(n, ncomp, int(header["step"]), float(header["time"]), values)


def write_lsf1(
    path: str | os.PathLike[str],
    field: GridField | np.ndarray,
    step: int = 0,
    time: float = 0.0,
) -> str:
    """Write one snapshot and return the md5 of the written bytes."""
    values = getattr(field, "values", field)
    if getattr(field, "batch_shape", ()):
        msg = f"Cannot write a batched field of shape {values.shape} as one snapshot"
        raise SnapshotFormatError(msg)
    data = encode_lsf1(values, step, time)
    upath.UPath(path).write_bytes(data)
    return hashlib.md5(data).hexdigest()


def read_lsf1(path: str | os.PathLike[str], expected_md5: str | None = None) -> Snapshot:
    """Read one snapshot, optionally verifying its recorded content hash.

    Raises:
        HashMismatchError: If ``expected_md5`` is given and differs from the file's.
        SnapshotFormatError: If the file is not valid LSF1.
    """
    p = upath.UPath(path)
    try:
        data = p.read_bytes()
    except FileNotFoundError as e:
        msg = f"Snapshot not found: {path}"
        raise SnapshotFormatError(msg) from e
    if expected_md5 is not None and hashlib.md5(data).hexdigest() != expected_md5:
        msg = f"Content hash of {path} does not match the recorded one"
        raise HashMismatchError(msg)
    return decode_lsf1(data, str(p))


def snapshot_name(prefix: str, index: int) -> str:
    return f"{prefix}_{index:06d}.lsf1"


def prepare_directory(
    path: str | os.PathLike[str], *, force: bool = False
) -> upath.UPath:
    """Create an output directory, refusing to overwrite unless ``force`` is set."""
    p = upath.UPath(path)
    if p.exists() and any(p.iterdir()):
        if not force:
            msg = f"Output directory {path} is not empty (use --force to overwrite)"
            raise ConfigError(msg)
        logger.info("Overwriting %s", p)
        p.fs.rm(p.path, recursive=True)
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_series(
    directory: str | os.PathLike[str],
    prefix: str,
    fields: Sequence[GridField],
    steps: Sequence[int],
    times: Sequence[float],
) -> dict[str, str]:
    """Write a time series of one quantity, returning ``{file name: md5}``."""
    root = upath.UPath(directory)
    hashes = {}
    for i, (f, step, t) in enumerate(zip(fields, steps, times, strict=True)):
        name = snapshot_name(prefix, i)
        hashes[name] = write_lsf1(root / name, f, step, t)
    return hashes


def read_series[F: GridField](
    directory: str | os.PathLike[str],
    prefix: str,
    cls: type[F],
    grid: TorusGrid,
    hashes: Mapping[str, str],
) -> list[F]:
    """Read back a series written by `write_series`, verifying every file hash."""
    root = upath.UPath(directory)
    names = sorted(name for name in hashes if name.startswith(f"{prefix}_"))
    return [read_lsf1(root / name, hashes[name]).to_field(cls, grid) for name in names]


def rows_to_csv(rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _csv_value(row.get(c, "")) for c in columns})
    return buffer.getvalue()


def _csv_value(value: Any) -> Any:
    if isinstance(value, float | np.floating):
        return repr(float(value))
    return value


def write_csv(
    path: str | os.PathLike[str],
    rows: Iterable[Mapping[str, Any]],
    columns: Sequence[str],
) -> None:
    upath.UPath(path).write_text(rows_to_csv(rows, columns), encoding="utf-8")
    logger.debug("Wrote %s", path)


def field_rows(t: float, name: str, field: GridField, **aux: Any) -> dict[str, Any]:
    """One diagnostics row ``(t, field, l2, min, max, aux...)``."""
    return {
        "t": t,
        "field": name,
        "l2": field.l2_norm(),
        "min": float(np.min(field.values)),
        "max": float(np.max(field.values)),
        **aux,
    }


if __name__ == "__main__":
    blob = encode_lsf1(np.zeros((2, 8, 8)), step=3, time=0.5)
    print(decode_lsf1(blob))
