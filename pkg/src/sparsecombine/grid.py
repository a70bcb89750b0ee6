"""Tensor-product grids on the unit cube and piecewise-multilinear interpolation.

A grid is described by a level multi-index l = (l_0, ..., l_{d-1}): direction j
has mesh width 2**-l[j] and 2**l[j] + 1 nodes, boundary included. Node values
are stored flat in lexicographic (C) order by index tuple, so the node with
index (j_0, ..., j_{d-1}) sits at x = (j_0 * h_0, ..., j_{d-1} * h_{d-1}).

Direction indices are 0-based throughout the package.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "LevelIndex",
    "GridFunction",
    "Point",
    "mesh_widths",
    "refine",
    "enumerate_nodes",
    "multilinear_eval",
]

# A point in the closed unit cube, given as a sequence of d floats.
Point = Sequence[float]


class LevelIndex(tuple):
    """Per-direction dyadic refinement depths of a tensor grid on [0,1]^d.

    Behaves as a plain tuple of non-negative ints with grid-geometry helpers.
    """

    __slots__ = ()

    def __new__(cls, levels: Iterable[int]):
        lv = tuple(int(v) for v in levels)
        if not lv:
            raise ValueError("LevelIndex needs at least one direction")
        for v in lv:
            if v < 0:
                raise ValueError(f"levels must be non-negative, got {lv}")
        return super().__new__(cls, lv)

    @property
    def dim(self) -> int:
        return len(self)

    def mesh_widths(self) -> tuple[float, ...]:
        """Mesh width 2**-l[j] per direction (exact in binary floating point)."""
        return tuple(2.0 ** -v for v in self)

    def points_per_direction(self) -> tuple[int, ...]:
        return tuple(2 ** v + 1 for v in self)

    def node_count(self) -> int:
        """Total number of nodes, boundary included: prod(2**l_j + 1)."""
        count = 1
        for v in self:
            count *= 2 ** v + 1
        return count

    def interior_count(self) -> int:
        """Number of interior nodes: prod(2**l_j - 1), zero if any l_j = 0."""
        count = 1
        for v in self:
            count *= 2 ** v - 1
        return count

    def refine(self, directions: Iterable[int] = ()) -> "LevelIndex":
        """Bisect the mesh in the given 0-based directions (duplicates ignored)."""
        dirs = set(directions)
        for j in dirs:
            if not 0 <= j < len(self):
                raise IndexError(f"direction {j} out of range for dim {len(self)}")
        return LevelIndex(v + 1 if j in dirs else v for j, v in enumerate(self))

    def shifted(self, offset: int) -> "LevelIndex":
        """Add a constant offset to every direction's level."""
        return LevelIndex(v + offset for v in self)

    def __repr__(self) -> str:
        return f"LevelIndex{tuple(self)!r}"


def mesh_widths(level: Iterable[int]) -> tuple[float, ...]:
    """Mesh widths (2**-l_0, ..., 2**-l_{d-1}) of the grid at ``level``."""
    return LevelIndex(level).mesh_widths()


def refine(level: Iterable[int], directions: Iterable[int] = ()) -> LevelIndex:
    """Return ``level`` bisected in the given 0-based ``directions``."""
    return LevelIndex(level).refine(directions)


class GridFunction:
    """Immutable nodal values on a tensor grid, boundary nodes included.

    The value buffer is flat, C-ordered by node index tuple, and marked
    read-only, so instances are safe to share across threads.
    """

    __slots__ = ("level", "values")

    def __init__(self, level: Iterable[int], values) -> None:
        lv = LevelIndex(level)
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size != lv.node_count():
            raise ValueError(
                f"value buffer has {arr.size} entries, grid {tuple(lv)} "
                f"needs {lv.node_count()}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "level", lv)
        object.__setattr__(self, "values", arr)

    @classmethod
    def _from_owned(cls, level: LevelIndex, arr: np.ndarray) -> "GridFunction":
        # Internal no-copy constructor: the caller hands over ownership.
        self = object.__new__(cls)
        flat = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
        flat.setflags(write=False)
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "values", flat)
        return self

    def __setattr__(self, name: str, value) -> None:
        raise AttributeError("GridFunction is immutable")

    @property
    def dim(self) -> int:
        return self.level.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.level.points_per_direction()

    def ndview(self) -> np.ndarray:
        """Read-only view shaped (2**l_0 + 1, ..., 2**l_{d-1} + 1)."""
        return self.values.reshape(self.shape)

    @classmethod
    def zeros(cls, level: Iterable[int]) -> "GridFunction":
        lv = LevelIndex(level)
        return cls._from_owned(lv, np.zeros(lv.node_count()))

    @classmethod
    def from_callable(
        cls,
        level: Iterable[int],
        fn: Callable,
        vectorized: bool = False,
    ) -> "GridFunction":
        """Sample ``fn`` at every node.

        With ``vectorized=False``, ``fn`` maps a point (tuple of d floats) to a
        scalar and is called once per node. With ``vectorized=True``, ``fn``
        receives d broadcastable coordinate arrays and must return the full
        nodal array in one call.
        """
        lv = LevelIndex(level)
        axes = [np.linspace(0.0, 1.0, m) for m in lv.points_per_direction()]
        if vectorized:
            mesh = np.meshgrid(*axes, indexing="ij", sparse=True)
            out = np.asarray(fn(*mesh), dtype=np.float64)
            out = np.broadcast_to(out, lv.points_per_direction()).copy()
            return cls._from_owned(lv, out)
        out = np.empty(lv.points_per_direction())
        for idx in np.ndindex(*lv.points_per_direction()):
            out[idx] = fn(tuple(axes[j][i] for j, i in enumerate(idx)))
        return cls._from_owned(lv, out)

    # -- serialization: header (d, levels) + raw little-endian float64 payload

    def to_bytes(self) -> bytes:
        d = self.level.dim
        header = struct.pack("<I", d) + struct.pack(f"<{d}I", *self.level)
        return header + self.values.astype("<f8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GridFunction":
        if len(buf) < 4:
            raise ValueError("truncated grid buffer")
        (d,) = struct.unpack_from("<I", buf, 0)
        if d < 1 or len(buf) < 4 + 4 * d:
            raise ValueError("truncated grid header")
        levels = struct.unpack_from(f"<{d}I", buf, 4)
        lv = LevelIndex(levels)
        payload = buf[4 + 4 * d :]
        expected = 8 * lv.node_count()
        if len(payload) != expected:
            raise ValueError(
                f"grid payload has {len(payload)} bytes, expected {expected}"
            )
        values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return cls._from_owned(lv, values)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GridFunction":
        return cls.from_bytes(Path(path).read_bytes())

    def __repr__(self) -> str:
        return f"GridFunction(level={tuple(self.level)}, nodes={self.values.size})"


def enumerate_nodes(
    level: Iterable[int],
) -> Iterator[tuple[tuple[int, ...], tuple[float, ...]]]:
    """Yield (index tuple, coordinates) for every node, in lexicographic order."""
    lv = LevelIndex(level)
    widths = lv.mesh_widths()
    for idx in np.ndindex(*lv.points_per_direction()):
        yield idx, tuple(i * h for i, h in zip(idx, widths))


def multilinear_eval(g: GridFunction, x: Point) -> float:
    """Evaluate the piecewise-multilinear interpolant of ``g`` at ``x``.

    Exact at grid nodes and for any function that is d-linear on each cell.
    Points on a cell boundary use the lower cell; x_j = 1 uses the last cell
    (the interpolant is continuous, so the choice is unobservable).
    """
    lv = g.level
    if len(x) != lv.dim:
        raise ValueError(f"point has {len(x)} coords, grid is {lv.dim}-dimensional")
    cells: list[int] = []
    fracs: list[float] = []
    for j, xj in enumerate(x):
        xj = float(xj)
        if not 0.0 <= xj <= 1.0:
            raise ValueError(f"coordinate {j} = {xj} outside [0, 1]")
        m = 2 ** lv[j]  # number of cells in direction j
        t = xj * m
        i = min(int(t), m - 1)
        cells.append(i)
        fracs.append(t - i)
    block = g.ndview()[tuple(slice(i, i + 2) for i in cells)]
    for t in fracs:
        block = (1.0 - t) * block[0] + t * block[1]
    return float(block)
