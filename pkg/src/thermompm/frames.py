"""Binary frame files and optional CSV dumps.

Layout (little-endian)::

    header   b"THMP", u32 version, u32 dim, u32 mpm_count, u32 smoke_count, u32 flags
    grid     u32 cell_dims[dim]                 (only when a grid field flag is set)
    mpm      x (N*dim f32), v (N*dim f32), T, fuel (N f32), state (N u8), J (N f32)
    smoke    x (M*dim f32), v (M*dim f32), T (M f32)
    fields   T  (cells f32), u (corners*dim f32), labels (cells u8), in flag order

Particle vectors are stored row by row (components contiguous).  Grid fields
are stored with the x index varying fastest.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"THMP"
VERSION = 1
FLAG_T = 1
FLAG_U = 2
FLAG_LABELS = 4
FIELD_FLAGS = {"T": FLAG_T, "u": FLAG_U, "labels": FLAG_LABELS}
_HEADER = struct.Struct("<4s5I")


class FrameFormatError(ValueError):
    pass


@dataclass
class FrameRecord:
    dim: int
    mpm_x: np.ndarray
    mpm_v: np.ndarray
    mpm_T: np.ndarray
    mpm_fuel: np.ndarray
    mpm_state: np.ndarray
    mpm_J: np.ndarray
    smoke_x: np.ndarray
    smoke_v: np.ndarray
    smoke_T: np.ndarray
    cell_dims: tuple = ()
    T_field: np.ndarray | None = None
    u_field: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def flags(self) -> int:
        return ((FLAG_T if self.T_field is not None else 0)
                | (FLAG_U if self.u_field is not None else 0)
                | (FLAG_LABELS if self.labels is not None else 0))


def frame_name(index: int) -> str:
    return f"frame_{index:06d}.bin"


def make_record(mpm, smoke, T_field=None, u_field=None, labels=None) -> FrameRecord:
    d = mpm.dim
    J = np.linalg.det(mpm.F) if len(mpm) else np.zeros(0)
    f32 = lambda a: np.ascontiguousarray(a, dtype="<f4")  # noqa: E731
    dims = tuple(T_field.shape if T_field is not None else labels.shape if labels is not None
                 else (np.asarray(u_field.shape[:-1]) - 1) if u_field is not None else ())
    return FrameRecord(
        d, f32(mpm.x), f32(mpm.v), f32(mpm.T), f32(mpm.fuel), mpm.state.astype(np.uint8), f32(J),
        f32(smoke.x.reshape(-1, d)), f32(smoke.v.reshape(-1, d)), f32(smoke.T),
        tuple(int(n) for n in dims),
        None if T_field is None else f32(T_field),
        None if u_field is None else f32(u_field),
        None if labels is None else labels.astype(np.uint8),
    )


def _grid_bytes(a: np.ndarray, vector: bool) -> bytes:
    if vector:
        # (*dims, d) -> components contiguous per node, x fastest over nodes
        return np.ascontiguousarray(np.moveaxis(a, -1, 0).transpose()).tobytes()
    return np.asfortranarray(a).tobytes(order="F")


def write_frame(path, rec: FrameRecord) -> None:
    n, m = rec.mpm_x.shape[0], rec.smoke_x.shape[0]
    parts = [_HEADER.pack(MAGIC, VERSION, rec.dim, n, m, rec.flags)]
    if rec.flags:
        parts.append(struct.pack(f"<{rec.dim}I", *rec.cell_dims))
    for a in (rec.mpm_x, rec.mpm_v, rec.mpm_T, rec.mpm_fuel):
        parts.append(np.ascontiguousarray(a, "<f4").tobytes())
    parts.append(np.ascontiguousarray(rec.mpm_state, np.uint8).tobytes())
    parts.append(np.ascontiguousarray(rec.mpm_J, "<f4").tobytes())
    for a in (rec.smoke_x, rec.smoke_v, rec.smoke_T):
        parts.append(np.ascontiguousarray(a, "<f4").tobytes())
    if rec.T_field is not None:
        parts.append(_grid_bytes(rec.T_field.astype("<f4"), False))
    if rec.u_field is not None:
        parts.append(_grid_bytes(rec.u_field.astype("<f4"), True))
    if rec.labels is not None:
        parts.append(_grid_bytes(rec.labels.astype(np.uint8), False))
    Path(path).write_bytes(b"".join(parts))


def read_frame(path) -> FrameRecord:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FrameFormatError(f"{path}: truncated header")
    magic, version, d, n, m, flags = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FrameFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FrameFormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    dims: tuple = ()
    if flags:
        dims = struct.unpack_from(f"<{d}I", buf, pos)
        pos += 4 * d

    def take(count, dtype, shape):
        nonlocal pos
        size = count * np.dtype(dtype).itemsize
        if pos + size > len(buf):
            raise FrameFormatError(f"{path}: truncated body")
        a = np.frombuffer(buf, dtype, count, pos).reshape(shape)
        pos += size
        return a.copy()

    x = take(n * d, "<f4", (n, d))
    v = take(n * d, "<f4", (n, d))
    T = take(n, "<f4", (n,))
    fuel = take(n, "<f4", (n,))
    state = take(n, np.uint8, (n,))
    J = take(n, "<f4", (n,))
    sx = take(m * d, "<f4", (m, d))
    sv = take(m * d, "<f4", (m, d))
    sT = take(m, "<f4", (m,))
    cells = int(np.prod(dims)) if dims else 0
    corner_dims = tuple(k + 1 for k in dims)
    T_field = u_field = labels = None
    if flags & FLAG_T:
        T_field = take(cells, "<f4", dims[::-1]).transpose()
    if flags & FLAG_U:
        raw = take(int(np.prod(corner_dims)) * d, "<f4", (*corner_dims[::-1], d))
        u_field = np.ascontiguousarray(np.moveaxis(raw.transpose(), 0, -1))
    if flags & FLAG_LABELS:
        labels = take(cells, np.uint8, dims[::-1]).transpose()
    if pos != len(buf):
        raise FrameFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return FrameRecord(d, x, v, T, fuel, state, J, sx, sv, sT, tuple(dims),
                       None if T_field is None else np.ascontiguousarray(T_field),
                       u_field,
                       None if labels is None else np.ascontiguousarray(labels))


def write_csv(path, rec: FrameRecord) -> None:
    """One row per particle: kind, id, position, velocity, T, fuel, state, J."""
    axes = "xyz"[: rec.dim]
    header = ["kind", "id", *axes, *(f"v{a}" for a in axes), "T", "fuel", "state", "J"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(rec.mpm_x.shape[0]):
            w.writerow(["mpm", i, *rec.mpm_x[i].tolist(), *rec.mpm_v[i].tolist(), float(rec.mpm_T[i]),
                        float(rec.mpm_fuel[i]), int(rec.mpm_state[i]), float(rec.mpm_J[i])])
        for i in range(rec.smoke_x.shape[0]):
            w.writerow(["smoke", i, *rec.smoke_x[i].tolist(), *rec.smoke_v[i].tolist(),
                        float(rec.smoke_T[i]), "", "", ""])
