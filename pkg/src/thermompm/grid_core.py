"""Uniform-lattice sparse fields, B-spline transfer kernels and spatial hashing.

All grids in the simulator share one lattice spacing ``dx``.  Fluid velocities
live on cell corners; MPM, pressure, temperature and level-set values live on
cell centers.  A :class:`GridDescriptor` records which of the two node sites a
field uses so that index <-> position conversions stay in one place.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CELL_CENTER = "cell_center"
CELL_CORNER = "cell_corner"

# bin packing for the spatial hash: 21 bits per axis, signed offset
_HASH_BITS = 21
_HASH_OFFSET = 1 << (_HASH_BITS - 1)


class StencilError(ValueError):
    """A transfer stencil reaches outside the grid."""

    def __init__(self, axis: int, message: str):
        super().__init__(f"stencil out of bounds on axis {axis}: {message}")
        self.axis = axis


@dataclass(frozen=True)
class GridDescriptor:
    origin: np.ndarray
    dx: float
    dims: tuple[int, ...]
    node_site: str = CELL_CENTER

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(-1)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if not self.dx > 0:
            raise ValueError(f"dx must be positive, got {self.dx}")
        if len(self.dims) != origin.size:
            raise ValueError("origin and dims disagree on dimension")
        if any(n < 1 for n in self.dims):
            raise ValueError(f"dims must be >= 1 per axis, got {self.dims}")
        if self.node_site not in (CELL_CENTER, CELL_CORNER):
            raise ValueError(f"unknown node site {self.node_site!r}")

    @classmethod
    def for_cells(cls, origin, dx: float, cells: Sequence[int]) -> "GridDescriptor":
        return cls(np.asarray(origin, float), dx, tuple(cells), CELL_CENTER)

    @classmethod
    def for_corners(cls, origin, dx: float, cells: Sequence[int]) -> "GridDescriptor":
        return cls(np.asarray(origin, float), dx, tuple(n + 1 for n in cells), CELL_CORNER)

    @property
    def dim(self) -> int:
        return len(self.dims)

    @property
    def offset(self) -> float:
        return 0.5 if self.node_site == CELL_CENTER else 0.0

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def node_position(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=float)
        return self.origin + (index + self.offset) * self.dx

    def grid_coordinates(self, x) -> np.ndarray:
        """Position in units of node spacing, node ``i`` at coordinate ``i``."""
        return (np.asarray(x, dtype=float) - self.origin) / self.dx - self.offset

    def contains(self, index) -> np.ndarray:
        index = np.asarray(index)
        return np.all((index >= 0) & (index < np.asarray(self.dims)), axis=-1)

    def pack(self, index) -> np.ndarray:
        """Row-major packed key; sorted keys are lexicographic in the index."""
        index = np.asarray(index, dtype=np.int64)
        return np.ravel_multi_index(tuple(np.moveaxis(index, -1, 0)), self.dims)

    def unpack(self, keys) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(keys, dtype=np.int64), self.dims), axis=-1)

    def all_node_positions(self) -> np.ndarray:
        axes = [self.origin[a] + (np.arange(n) + self.offset) * self.dx for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


class SparseField:
    """Values on the active nodes of a lattice.

    Storage is a sorted array of packed node keys with a parallel value
    array, so iteration over active nodes is lexicographic by index.  Reads
    of inactive nodes return ``background``.
    """

    def __init__(self, descriptor: GridDescriptor, value_shape: tuple[int, ...] = (),
                 background: float = 0.0, dtype=float):
        self.descriptor = descriptor
        self.value_shape = tuple(value_shape)
        self.background = background
        self.keys = np.zeros(0, dtype=np.int64)
        self.values = np.zeros((0, *self.value_shape), dtype=dtype)

    @classmethod
    def from_arrays(cls, descriptor, keys, values, background=0.0) -> "SparseField":
        keys = np.asarray(keys, dtype=np.int64)
        values = np.asarray(values)
        out = cls(descriptor, values.shape[1:], background, values.dtype)
        order = np.argsort(keys, kind="stable")
        out.keys = keys[order]
        out.values = values[order]
        if out.keys.size > 1 and np.any(np.diff(out.keys) == 0):
            raise ValueError("duplicate node keys")
        return out

    @classmethod
    def from_dense(cls, descriptor, array, mask=None, background=0.0) -> "SparseField":
        array = np.asarray(array)
        if mask is None:
            mask = np.ones(descriptor.dims, dtype=bool)
        keys = np.flatnonzero(mask.reshape(-1))
        values = array.reshape(descriptor.size, *array.shape[descriptor.dim:])[keys]
        return cls.from_arrays(descriptor, keys, values, background)

    def __len__(self) -> int:
        return self.keys.size

    def __contains__(self, index) -> bool:
        return bool(self._lookup(np.asarray(index)[None])[1][0])

    def __getitem__(self, index):
        return self.get(np.asarray(index)[None])[0]

    @property
    def active(self) -> np.ndarray:
        return self.descriptor.unpack(self.keys)

    def items(self):
        for idx, val in zip(self.active, self.values):
            yield tuple(int(i) for i in idx), val

    def _lookup(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        inside = self.descriptor.contains(indices)
        keys = np.full(indices.shape[:-1], -1, dtype=np.int64)
        keys[inside] = self.descriptor.pack(indices[inside])
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, max(self.keys.size - 1, 0))
        found = inside & (self.keys.size > 0)
        if self.keys.size:
            found &= self.keys[pos] == keys
        return pos, found

    def get(self, indices) -> np.ndarray:
        pos, found = self._lookup(indices)
        out = np.full((*pos.shape, *self.value_shape), self.background, dtype=self.values.dtype)
        out[found] = self.values[pos[found]]
        return out

    def _merge_keys(self, keys):
        new = np.setdiff1d(keys, self.keys)
        if new.size:
            merged = np.union1d(self.keys, new)
            vals = np.full((merged.size, *self.value_shape), self.background, dtype=self.values.dtype)
            vals[np.searchsorted(merged, self.keys)] = self.values
            self.keys, self.values = merged, vals
        return np.searchsorted(self.keys, keys)

    def set(self, indices, values) -> None:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.descriptor.dim)
        if not np.all(self.descriptor.contains(indices)):
            raise IndexError("write outside the grid")
        keys = self.descriptor.pack(indices)
        slots = self._merge_keys(keys)
        self.values[slots] = np.asarray(values).reshape(-1, *self.value_shape)

    def add(self, indices, values, workers: int = 1) -> None:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.descriptor.dim)
        if not np.all(self.descriptor.contains(indices)):
            raise IndexError("write outside the grid")
        values = np.asarray(values, dtype=float).reshape(-1, *self.value_shape)
        keys, summed = scatter_add(self.descriptor.pack(indices), values, workers)
        slots = self._merge_keys(keys)
        self.values[slots] += summed.reshape(-1, *self.value_shape)

    def to_dense(self) -> np.ndarray:
        out = np.full((self.descriptor.size, *self.value_shape), self.background, dtype=self.values.dtype)
        out[self.keys] = self.values
        return out.reshape(*self.descriptor.dims, *self.value_shape)

    def copy(self) -> "SparseField":
        out = SparseField(self.descriptor, self.value_shape, self.background, self.values.dtype)
        out.keys = self.keys.copy()
        out.values = self.values.copy()
        return out


def scatter_add(keys: np.ndarray, values: np.ndarray, workers: int = 1):
    """Sum ``values`` grouped by integer ``keys``.

    Returns the sorted unique keys and the per-key sums.  With ``workers > 1``
    the input is split into contiguous chunks that are reduced independently
    and merged in chunk order, which keeps results bitwise reproducible for a
    fixed worker count.
    """
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    values = np.asarray(values, dtype=float)
    values = values.reshape(keys.size, -1)
    unique, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.reshape(-1)

    def reduce(chunk):
        inv, val = chunk
        return np.stack([np.bincount(inv, weights=val[:, c], minlength=unique.size)
                         for c in range(val.shape[1])], axis=-1)

    workers = max(1, int(workers))
    if workers == 1 or keys.size < 2 * workers:
        total = reduce((inverse, values))
    else:
        bounds = np.linspace(0, keys.size, workers + 1).astype(int)
        chunks = [(inverse[a:b], values[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(reduce, chunks))
        total = partials[0]
        for part in partials[1:]:
            total = total + part
    return unique, total


class Stencil(NamedTuple):
    """Transfer stencil for a batch of particles.

    ``indices`` has shape (N, S, d), ``weights`` (N, S) and ``gradients``
    (N, S, d) where S is 2**d (linear) or 3**d (quadratic).
    """
    indices: np.ndarray
    weights: np.ndarray
    gradients: np.ndarray


def _offsets(width: int, dim: int) -> np.ndarray:
    return np.array(list(itertools.product(range(width), repeat=dim)), dtype=np.int64)


def _tensor_stencil(base, w1d, dw1d, dx):
    # w1d, dw1d: (N, d, width) per-axis factors
    n, dim, width = w1d.shape
    offs = _offsets(width, dim)
    indices = base[:, None, :] + offs[None]
    axis = np.arange(dim)
    wf = w1d[:, axis[None, :], offs]            # (N, S, d)
    dwf = dw1d[:, axis[None, :], offs]
    weights = np.prod(wf, axis=-1)
    grads = np.empty_like(wf)
    for a in range(dim):
        others = np.prod(np.delete(wf, a, axis=-1), axis=-1) if dim > 1 else 1.0
        grads[..., a] = dwf[..., a] * others / dx
    return Stencil(indices, weights, grads)


def _check_bounds(base, width, g: GridDescriptor):
    dims = np.asarray(g.dims)
    low = base < 0
    high = base + width - 1 > dims - 1
    bad = low | high
    if np.any(bad):
        axis = int(np.nonzero(np.any(bad, axis=0))[0][0])
        raise StencilError(axis, f"{int(np.count_nonzero(np.any(bad, axis=1)))} position(s) outside the valid region")


def quadratic_weights(xp, g: GridDescriptor) -> Stencil:
    """Quadratic B-spline stencil (3**d nodes) for positions ``xp``."""
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    s = g.grid_coordinates(xp)
    base = np.floor(s + 0.5).astype(np.int64) - 1
    _check_bounds(base, 3, g)
    fx = s - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)
    dw = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], axis=-1)
    return _tensor_stencil(base, w, dw, g.dx)


def linear_weights(xp, g: GridDescriptor) -> Stencil:
    """Multilinear stencil (2**d nodes) for positions ``xp``.

    A position exactly on the last node of an axis uses the final cell with
    weight 1 on that node.
    """
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    s = g.grid_coordinates(xp)
    dims = np.asarray(g.dims)
    outside = (s < 0) | (s > dims - 1)
    if np.any(outside):
        axis = int(np.nonzero(np.any(outside, axis=0))[0][0])
        raise StencilError(axis, f"{int(np.count_nonzero(np.any(outside, axis=1)))} position(s) outside the grid")
    base = np.minimum(np.floor(s).astype(np.int64), np.maximum(dims - 2, 0))
    fx = s - base
    w = np.stack([1.0 - fx, fx], axis=-1)
    dw = np.stack([-np.ones_like(fx), np.ones_like(fx)], axis=-1)
    return _tensor_stencil(base, w, dw, g.dx)


def quadratic_valid_bounds(g: GridDescriptor):
    """Closed-open world-space box where every quadratic stencil is in range."""
    lo = g.origin + (0.5 + g.offset) * g.dx
    hi = g.origin + (np.asarray(g.dims) - 1.5 + g.offset) * g.dx
    return lo, hi


def linear_valid_bounds(g: GridDescriptor):
    lo = g.origin + g.offset * g.dx
    hi = g.origin + (np.asarray(g.dims) - 1 + g.offset) * g.dx
    return lo, hi


def clamp_positions(x: np.ndarray, lo, hi, label: str = "particles") -> np.ndarray:
    """Clamp positions into [lo, hi) in place, warning when anything moved."""
    hi_open = np.nextafter(np.asarray(hi, float), -np.inf)
    bad = np.any((x < lo) | (x > hi_open), axis=-1)
    if np.any(bad):
        logger.warning("clamped %d %s into the valid stencil region", int(bad.sum()), label)
        np.clip(x, lo, hi_open, out=x)
    return x


def _pack_bins(bins: np.ndarray) -> np.ndarray:
    b = np.asarray(bins, dtype=np.int64) + _HASH_OFFSET
    if np.any((b < 0) | (b >= (1 << _HASH_BITS))):
        raise ValueError("hash bin index out of packable range")
    key = np.zeros(b.shape[:-1], dtype=np.int64)
    for a in range(b.shape[-1]):
        key = (key << _HASH_BITS) | b[..., a]
    return key


@dataclass
class SpatialHash:
    """Particles binned on a lattice of width ``dx``.

    Bin of a position is ``floor((x - origin) / dx)`` per axis, so a
    position on a bin boundary belongs to the upper bin.
    """
    dx: float
    origin: np.ndarray
    positions: np.ndarray = field(repr=False)
    ids: np.ndarray = field(repr=False)
    keys: np.ndarray = field(repr=False)
    bin_keys: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.origin.size

    def bins_of(self, x) -> np.ndarray:
        return np.floor((np.asarray(x, float) - self.origin) / self.dx).astype(np.int64)

    @property
    def table(self) -> dict[tuple[int, ...], list[int]]:
        bins = self.bins_of(self.positions)
        out: dict[tuple[int, ...], list[int]] = {}
        for b, i in zip(map(tuple, bins.tolist()), self.ids.tolist()):
            out.setdefault(b, []).append(i)
        return out

    def occupied(self, bins) -> np.ndarray:
        keys = _pack_bins(bins)
        return np.isin(keys, self.bin_keys)

    def candidates(self, points, radius: int = 1):
        """All (query index, slot) pairs whose bins lie within ``radius`` bins."""
        points = np.atleast_2d(np.asarray(points, float))
        qbins = self.bins_of(points)
        qs, slots = [], []
        if self.ids.size == 0 or points.shape[0] == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        for off in itertools.product(range(-radius, radius + 1), repeat=self.dim):
            keys = _pack_bins(qbins + np.asarray(off))
            pos = np.searchsorted(self.bin_keys, keys)
            pos = np.minimum(pos, self.bin_keys.size - 1)
            hit = self.bin_keys[pos] == keys
            q = np.nonzero(hit)[0]
            if q.size == 0:
                continue
            cnt = self.counts[pos[q]]
            st = self.starts[pos[q]]
            rep_q = np.repeat(q, cnt)
            first = np.repeat(np.cumsum(cnt) - cnt, cnt)
            within = np.arange(cnt.sum()) - first
            qs.append(rep_q)
            slots.append(np.repeat(st, cnt) + within)
        if not qs:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(qs), np.concatenate(slots)

    def closest(self, points, radius: int = 1):
        """Closest particle id per query within the bin neighborhood.

        Returns ``(ids, distances)``; queries with an empty neighborhood get
        id -1 and distance inf.  Equal distances resolve to the lowest id.
        """
        points = np.atleast_2d(np.asarray(points, float))
        out_ids = np.full(points.shape[0], -1, dtype=np.int64)
        out_d = np.full(points.shape[0], np.inf)
        q, slot = self.candidates(points, radius)
        if q.size == 0:
            return out_ids, out_d
        dist = np.linalg.norm(self.positions[slot] - points[q], axis=-1)
        cid = self.ids[slot]
        order = np.lexsort((cid, dist, q))
        q, dist, cid = q[order], dist[order], cid[order]
        first = np.ones(q.size, dtype=bool)
        first[1:] = q[1:] != q[:-1]
        out_ids[q[first]] = cid[first]
        out_d[q[first]] = dist[first]
        return out_ids, out_d


def hash_build(positions, dx: float, origin=None, ids=None) -> SpatialHash:
    positions = np.asarray(positions, dtype=float)
    origin = np.zeros(positions.shape[-1]) if origin is None else np.asarray(origin, float)
    positions = positions.reshape(-1, origin.size)
    ids = np.arange(positions.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    finite = np.all(np.isfinite(positions), axis=-1)
    if not np.all(finite):
        bad = ids[~finite][0]
        raise ValueError(f"non-finite position for particle {int(bad)}")
    bins = np.floor((positions - origin) / dx).astype(np.int64)
    keys = _pack_bins(bins)
    order = np.lexsort((ids, keys))
    keys, ids, positions = keys[order], ids[order], positions[order]
    bin_keys, starts, counts = np.unique(keys, return_index=True, return_counts=True)
    return SpatialHash(dx, origin, positions, ids, keys, bin_keys, starts, counts)


def closest_in_neighborhood(xp, h: SpatialHash, candidates=None):
    """Closest hashed particle to ``xp`` among the 3**d adjacent bins.

    ``candidates`` optionally restricts the answer to a subset of ids.
    Returns the particle id or ``None``.
    """
    if candidates is not None:
        keep = np.isin(h.ids, np.asarray(list(candidates), dtype=np.int64))
        h = hash_build(h.positions[keep], h.dx, h.origin, h.ids[keep])
    ids, _ = h.closest(np.asarray(xp, float)[None])
    return None if ids[0] < 0 else int(ids[0])
