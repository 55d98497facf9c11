"""Terrain model snapshots and grid exports.

Snapshot layout (little-endian, version 1)::

    magic        4 bytes   b"RBFT"
    version      u32
    N            u32       number of centers
    B            u32       number of blocks
    kernel       7 x f64   sigma, sigma_eps, lam, cutoff_radius, tile_size,
                           mesh_resolution, accept_radius
    accept_count u32
    roi          4 x f64   xmin, ymin, xmax, ymax
    centers      N x 2 f64
    weights      N f64
    block index  N u32
    blocks       for b in 0..B-1: lower triangle (row-major) of the
                 inverse-information block over the centers of block b,
                 taken in ascending center order

An infinite cutoff (truncation disabled) is stored as ``inf``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .terrain import CenterSet, KernelParams, TerrainModel

MAGIC = b"RBFT"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_KERNEL = struct.Struct("<7dI4d")


class SnapshotError(ValueError):
    pass


def save_snapshot(model: TerrainModel, path: str | Path) -> None:
    k = model.kernel
    c = model.centers
    parts = [
        _HEADER.pack(MAGIC, VERSION, model.n_centers, len(model.blocks)),
        _KERNEL.pack(k.sigma, k.sigma_eps, k.lam, k.cutoff_radius, k.tile_size, c.mesh_resolution,
                     c.accept_radius, int(c.accept_count), *map(float, c.roi)),
        np.ascontiguousarray(c.centers, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.weights, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.block_index, dtype="<u4").tobytes(),
    ]
    for idx, p in zip(model.blocks, model.info_inverse):
        order = np.argsort(idx, kind="stable")
        q = p[np.ix_(order, order)]
        parts.append(np.ascontiguousarray(q[np.tril_indices(len(idx))], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_snapshot(path: str | Path, workers: int = 1) -> TerrainModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _KERNEL.size:
        raise SnapshotError("file too short for a terrain snapshot")
    magic, version, n, nb = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotError("not a terrain snapshot (bad magic)")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    off = _HEADER.size
    vals = _KERNEL.unpack_from(data, off)
    off += _KERNEL.size
    sigma, sigma_eps, lam, cutoff, tile, res, radius, count = vals[:8]
    roi = tuple(vals[8:12])

    def take(dtype, count_):
        nonlocal off
        size = np.dtype(dtype).itemsize * count_
        if off + size > len(data):
            raise SnapshotError("truncated terrain snapshot")
        arr = np.frombuffer(data, dtype=dtype, count=count_, offset=off)
        off += size
        return arr.astype(np.dtype(dtype).newbyteorder("="))

    centers = take("<f8", 2 * n).reshape(n, 2)
    weights = take("<f8", n)
    block_index = take("<u4", n).astype(np.int64)
    blocks, info = [], []
    for b in range(nb):
        idx = np.flatnonzero(block_index == b)
        m = len(idx)
        tri = take("<f8", m * (m + 1) // 2)
        p = np.zeros((m, m))
        p[np.tril_indices(m)] = tri
        p = p + np.tril(p, -1).T
        blocks.append(idx)
        info.append(p)
    if off != len(data):
        raise SnapshotError("trailing bytes after terrain snapshot")
    kernel = KernelParams(sigma, sigma_eps, lam, cutoff, tile)
    nodes = np.rint(centers / res).astype(np.int64)
    cs = CenterSet(nodes, res, radius, int(count), roi)
    return TerrainModel(kernel, cs, weights, blocks, info, block_index, workers)


def export_grid_csv(model: TerrainModel, path: str | Path, bounds, step: float, only_supported: bool = False) -> int:
    """Write ``x,y,z_pred`` on a regular grid; returns the number of rows."""
    xmin, ymin, xmax, ymax = bounds
    if not step > 0 or xmin > xmax or ymin > ymax:
        raise ValueError("invalid export grid")
    gx = np.arange(xmin, xmax + step / 2, step)
    gy = np.arange(ymin, ymax + step / 2, step)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    xy = np.column_stack([xx.ravel(), yy.ravel()])
    z, ok = model.predict(xy)
    if only_supported:
        xy, z = xy[ok], z[ok]
    lines = ["x,y,z_pred"] + [f"{a:.17g},{b:.17g},{c:.17g}" for (a, b), c in zip(xy, z)]
    Path(path).write_text("\n".join(lines) + "\n")
    return len(z)
