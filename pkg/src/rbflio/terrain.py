"""Gaussian RBF terrain height field with recursive ridge-regression updates.

The terrain is modelled as ``f(x) = sum_i w_i * exp(-|x - c_i|^2 / (2 sigma^2))``
over 2-D centers ``c_i`` picked from a regular mesh. Weights are estimated
with a ridge regression on errors-in-variables corrected features (the
"moment" features, which use the widened bandwidth ``sqrt(sigma^2 + sigma_eps^2)``)
and refined frame by frame with a Kalman-style recursion that only touches
the blocks of the information-matrix inverse reached by the new points.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# exp(-4.5): kernel value at three bandwidths, the minimum truncation point
_MIN_CUTOFF_SIGMAS = 3.0


class TerrainError(ValueError):
    """Raised on invalid terrain inputs (non-finite data, bad parameters)."""


class NoSupportedCenters(TerrainError):
    """Center selection accepted no mesh node."""


class TerrainSolveError(RuntimeError):
    """A ridge system could not be factorized."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class KernelParams:
    """Kernel and regression hyper-parameters.

    Attributes:
        sigma: kernel bandwidth in metres.
        sigma_eps: standard deviation of the point noise in metres.
        lam: ridge weight (dimensionless).
        cutoff_radius: kernel support radius in metres. ``None`` picks
            ``3 * sigma_tilde``; ``math.inf`` disables truncation.
        tile_size: side of the square tiles that partition the centers into
            blocks of the information inverse. ``None`` picks four cutoff
            radii; must be at least two.
    """

    sigma: float = 0.04
    sigma_eps: float = 0.1
    lam: float = 2.0
    cutoff_radius: float | None = None
    tile_size: float | None = None

    def __post_init__(self) -> None:
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise TerrainError(f"sigma must be positive, got {self.sigma}")
        if not (self.sigma_eps >= 0 and math.isfinite(self.sigma_eps)):
            raise TerrainError(f"sigma_eps must be >= 0, got {self.sigma_eps}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise TerrainError(f"lam must be positive, got {self.lam}")
        if self.cutoff_radius is None:
            object.__setattr__(self, "cutoff_radius", _MIN_CUTOFF_SIGMAS * self.sigma_tilde)
        elif self.cutoff_radius < _MIN_CUTOFF_SIGMAS * self.sigma_tilde * (1 - 1e-12):
            raise TerrainError(
                f"cutoff_radius {self.cutoff_radius} below 3*sigma_tilde={3 * self.sigma_tilde:.4f}"
            )
        if self.tile_size is None:
            object.__setattr__(self, "tile_size", 4.0 * self.cutoff_radius)
        elif not self.tile_size >= 2.0 * self.cutoff_radius:
            raise TerrainError("tile_size must be at least twice the cutoff radius")

    @property
    def sigma_tilde(self) -> float:
        return math.sqrt(self.sigma**2 + self.sigma_eps**2)

    @property
    def moment_scale(self) -> float:
        """sigma^2 / sigma_tilde^2, the 2-D Gaussian convolution factor."""
        return self.sigma**2 / self.sigma_tilde**2

    @property
    def truncated(self) -> bool:
        return math.isfinite(self.cutoff_radius)


@dataclass(frozen=True)
class TerrainObservation:
    """Ground points of one frame in the world frame."""

    xy: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        xy = np.ascontiguousarray(self.xy, dtype=float).reshape(-1, 2)
        z = np.ascontiguousarray(self.z, dtype=float).reshape(-1)
        if xy.shape[0] != z.shape[0]:
            raise TerrainError(f"xy has {xy.shape[0]} points but z has {z.shape[0]}")
        if xy.shape[0] == 0:
            raise TerrainError("observation is empty")
        if not (np.isfinite(xy).all() and np.isfinite(z).all()):
            raise TerrainError("observation contains non-finite coordinates")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "z", z)

    def __len__(self) -> int:
        return self.z.shape[0]

    @classmethod
    def from_points(cls, points: np.ndarray) -> TerrainObservation:
        points = np.asarray(points, dtype=float)
        return cls(points[:, :2], points[:, 2])


@dataclass
class CenterSet:
    """RBF centers picked from a regular mesh.

    ``nodes`` holds the integer mesh indices of each center, so that
    ``centers == nodes * mesh_resolution``; it is the identity used to tell
    whether a candidate node already has a center.
    """

    nodes: np.ndarray
    mesh_resolution: float
    accept_radius: float
    accept_count: int
    roi: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, 2)

    @property
    def centers(self) -> np.ndarray:
        return self.nodes * self.mesh_resolution

    def __len__(self) -> int:
        return self.nodes.shape[0]


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise TerrainError("non-finite input")


def kernel_eval(params: KernelParams, x, c, bandwidth: float) -> float:
    """Gaussian kernel between two 2-D points, zero beyond the cutoff."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    _check_finite(x, c)
    if not bandwidth > 0:
        raise TerrainError(f"bandwidth must be positive, got {bandwidth}")
    r2 = float(np.sum((x - c) ** 2))
    if r2 > params.cutoff_radius**2:
        return 0.0
    return math.exp(-r2 / (2.0 * bandwidth**2))


def mesh_nodes_in_roi(roi, mesh_resolution: float) -> np.ndarray:
    """All integer mesh nodes whose position lies inside ``roi``."""
    xmin, ymin, xmax, ymax = roi
    i = np.arange(math.ceil(xmin / mesh_resolution - 1e-9), math.floor(xmax / mesh_resolution + 1e-9) + 1)
    j = np.arange(math.ceil(ymin / mesh_resolution - 1e-9), math.floor(ymax / mesh_resolution + 1e-9) + 1)
    ii, jj = np.meshgrid(i, j, indexing="ij")
    return np.column_stack([ii.ravel(), jj.ravel()]).astype(np.int64)


def select_centers(
    points: TerrainObservation,
    roi,
    mesh_resolution: float,
    accept_radius: float,
    accept_count: int,
    exclude: np.ndarray | None = None,
) -> CenterSet:
    """Pick the mesh nodes supported by at least ``accept_count`` points.

    A node is supported when that many observation points lie within
    ``accept_radius`` of it (2-D distance). Only nodes inside ``roi`` and
    near the data are counted, using a k-d tree over the points. Nodes listed
    in ``exclude`` (integer mesh indices) are skipped.

    Raises:
        NoSupportedCenters: when no node qualifies.
    """
    if not mesh_resolution > 0:
        raise TerrainError("mesh_resolution must be positive")
    if accept_count < 1:
        raise TerrainError("accept_count must be >= 1")
    xy = points.xy
    lo = np.maximum(xy.min(axis=0) - accept_radius, [roi[0], roi[1]])
    hi = np.minimum(xy.max(axis=0) + accept_radius, [roi[2], roi[3]])
    empty = CenterSet(np.empty((0, 2)), mesh_resolution, accept_radius, accept_count, tuple(roi))
    if np.any(lo > hi):
        raise NoSupportedCenters("no mesh node near the observation inside the ROI")
    nodes = mesh_nodes_in_roi((lo[0], lo[1], hi[0], hi[1]), mesh_resolution)
    if exclude is not None and len(exclude) and len(nodes):
        nodes = nodes[~_rows_in(nodes, exclude)]
    if len(nodes) == 0:
        raise NoSupportedCenters("no candidate mesh node")
    tree = cKDTree(xy)
    counts = tree.query_ball_point(nodes * mesh_resolution, accept_radius, return_length=True)
    keep = nodes[np.asarray(counts) >= accept_count]
    if len(keep) == 0:
        raise NoSupportedCenters(f"no mesh node has {accept_count} points within {accept_radius} m")
    empty.nodes = keep
    return empty


def _rows_in(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Boolean mask of rows of integer array ``a`` present in ``b``."""
    if len(b) == 0:
        return np.zeros(len(a), dtype=bool)
    dtype = np.dtype((np.void, a.dtype.itemsize * 2))
    av = np.ascontiguousarray(a).view(dtype).ravel()
    bv = np.ascontiguousarray(b.astype(a.dtype)).view(dtype).ravel()
    return np.isin(av, bv)


def _pairs_within(xy: np.ndarray, tree: cKDTree, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(point index, center index, squared distance) for all pairs within radius.

    Pairs are sorted by point then center, which fixes the summation order
    of every per-point reduction.
    """
    if math.isfinite(radius):
        neighbors = tree.query_ball_point(xy, radius)
        lengths = np.fromiter((len(n) for n in neighbors), dtype=np.int64, count=len(neighbors))
        rows = np.repeat(np.arange(len(xy)), lengths)
        cols = np.fromiter((c for n in neighbors for c in sorted(n)), dtype=np.int64, count=int(lengths.sum()))
    else:
        n = tree.n
        rows = np.repeat(np.arange(len(xy)), n)
        cols = np.tile(np.arange(n), len(xy))
    d = xy[rows] - tree.data[cols]
    r2 = np.einsum("ij,ij->i", d, d)
    return rows, cols, r2


def _chunks(n: int, workers: int) -> list[slice]:
    if workers <= 1 or n < 2 * workers:
        return [slice(0, n)]
    step = math.ceil(n / workers)
    return [slice(s, min(n, s + step)) for s in range(0, n, step)]


def _parallel_map(fn, n: int, workers: int) -> list:
    parts = _chunks(n, workers)
    if len(parts) == 1:
        return [fn(parts[0])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))


def moment_features(
    params: KernelParams, xy: np.ndarray, centers: CenterSet | np.ndarray, workers: int = 1
) -> scipy.sparse.csr_matrix:
    """Moment feature rows ``m(x)`` for many points as an ``M x N`` sparse matrix.

    Entry ``(i, j)`` is ``(sigma^2 / sigma_tilde^2) * k_{sigma_tilde}(x_i; c_j)``.
    Pairs beyond the cutoff radius are not stored.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    _check_finite(xy)
    c = centers.centers if isinstance(centers, CenterSet) else np.asarray(centers, dtype=float)
    if len(c) == 0:
        raise TerrainError("center set is empty")
    tree = cKDTree(c)
    return _feature_matrix(params, xy, tree, workers)


def _feature_matrix(params: KernelParams, xy: np.ndarray, tree: cKDTree, workers: int) -> scipy.sparse.csr_matrix:
    inv = 1.0 / (2.0 * params.sigma_tilde**2)
    scale = params.moment_scale

    def block(s: slice):
        rows, cols, r2 = _pairs_within(xy[s], tree, params.cutoff_radius)
        return rows + s.start, cols, scale * np.exp(-r2 * inv)

    parts = _parallel_map(block, len(xy), workers)
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    indptr = np.zeros(len(xy) + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=len(xy)), out=indptr[1:])
    return scipy.sparse.csr_matrix((vals, cols, indptr), shape=(len(xy), tree.n))


def moment_feature(params: KernelParams, x, centers: CenterSet) -> scipy.sparse.csr_matrix:
    """Sparse ``1 x N`` moment feature of a single query point."""
    return moment_features(params, np.asarray(x, dtype=float).reshape(1, 2), centers)


def tile_keys(centers: np.ndarray, params: KernelParams) -> np.ndarray:
    """Spatial tile of each center (tiles are squares of side ``2 * cutoff``)."""
    if not params.truncated:
        return np.zeros((len(centers), 2), dtype=np.int64)
    return np.floor(centers / params.tile_size).astype(np.int64)


@dataclass
class TerrainModel:
    """Fitted RBF terrain.

    ``info_inverse[b]`` is the inverse regularized information matrix
    restricted to the centers ``blocks[b]`` (indices into the center set);
    ``block_index[i]`` gives the block of center ``i``. Only the weights and
    the block inverses are stored: the right-hand side ``b_k`` is implied by
    ``H_k w_k``.
    """

    kernel: KernelParams
    centers: CenterSet
    weights: np.ndarray
    blocks: list[np.ndarray]
    info_inverse: list[np.ndarray]
    block_index: np.ndarray
    workers: int = 1
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)
    _tiles: dict | None = field(default=None, repr=False, compare=False)

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.centers.centers)
        return self._tree

    def tile_map(self) -> dict:
        if self._tiles is None:
            keys = tile_keys(self.centers.centers, self.kernel)
            self._tiles = {}
            for b, idx in enumerate(self.blocks):
                self._tiles[tuple(keys[idx[0]])] = b
        return self._tiles

    def copy(self) -> TerrainModel:
        return TerrainModel(
            self.kernel,
            CenterSet(self.centers.nodes.copy(), self.centers.mesh_resolution, self.centers.accept_radius,
                      self.centers.accept_count, self.centers.roi),
            self.weights.copy(),
            [b.copy() for b in self.blocks],
            [p.copy() for p in self.info_inverse],
            self.block_index.copy(),
            self.workers,
        )

    def dense_info_inverse(self) -> np.ndarray:
        """Assemble the full block-diagonal inverse (for tests and small models)."""
        n = self.n_centers
        out = np.zeros((n, n))
        for idx, p in zip(self.blocks, self.info_inverse):
            out[np.ix_(idx, idx)] = p
        return out

    # queries ---------------------------------------------------------------

    def predict(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Heights at many query points plus a per-point support flag."""
        return _predict(self, np.asarray(xy, dtype=float).reshape(-1, 2), gradient=False)

    def predict_gradient_many(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _predict(self, np.asarray(xy, dtype=float).reshape(-1, 2), gradient=True)


def _predict(model: TerrainModel, xy: np.ndarray, gradient: bool):
    _check_finite(xy)
    n = len(xy)
    if model.n_centers == 0:
        out = np.zeros((n, 2)) if gradient else np.zeros(n)
        return out, np.zeros(n, dtype=bool)
    sigma2 = model.kernel.sigma**2
    w = model.weights
    tree = model.tree

    def block(s: slice):
        pts = xy[s]
        rows, cols, r2 = _pairs_within(pts, tree, model.kernel.cutoff_radius)
        k = w[cols] * np.exp(-r2 / (2.0 * sigma2))
        m = len(pts)
        supported = np.bincount(rows, minlength=m) > 0
        if not gradient:
            return np.bincount(rows, weights=k, minlength=m), supported
        d = pts[rows] - tree.data[cols]
        gx = np.bincount(rows, weights=-k * d[:, 0] / sigma2, minlength=m)
        gy = np.bincount(rows, weights=-k * d[:, 1] / sigma2, minlength=m)
        return np.column_stack([gx, gy]), supported

    parts = _parallel_map(block, n, model.workers)
    values = np.concatenate([p[0] for p in parts])
    supported = np.concatenate([p[1] for p in parts])
    return values, supported


def predict_height(model: TerrainModel, x) -> tuple[float, bool]:
    """Terrain height at ``x`` and whether any center supports the query.

    Unsupported queries return ``(0.0, False)``.
    """
    h, ok = model.predict(np.asarray(x, dtype=float).reshape(1, 2))
    return float(h[0]), bool(ok[0])


def predict_gradient(model: TerrainModel, x) -> np.ndarray:
    """Analytic spatial gradient ``(df/dx, df/dy)`` of the height at ``x``."""
    g, _ = model.predict_gradient_many(np.asarray(x, dtype=float).reshape(1, 2))
    return g[0]


# fitting -------------------------------------------------------------------


def _partition(centers: CenterSet, params: KernelParams) -> tuple[list[np.ndarray], np.ndarray]:
    keys = tile_keys(centers.centers, params)
    if len(keys) == 0:
        return [], np.empty(0, dtype=np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
    blocks = np.split(order, splits)
    return blocks, inverse.astype(np.int64)


def empty_model(params: KernelParams, centers: CenterSet, workers: int = 1) -> TerrainModel:
    """Prior model: zero weights and ``H_0 = lam * I``."""
    blocks, block_index = _partition(centers, params)
    info = [np.eye(len(b)) / params.lam for b in blocks]
    return TerrainModel(params, centers, np.zeros(len(centers)), blocks, info, block_index, workers)


def fit_batch_ridge(
    params: KernelParams, centers: CenterSet, obs: TerrainObservation, workers: int = 1
) -> TerrainModel:
    """Batch ridge fit ``w = (sum m m^T + lam I)^-1 sum m p_z``.

    The stored inverse is the block-diagonal part (per spatial tile) of
    ``(lam I + sum m m^T)^-1``.

    Raises:
        TerrainSolveError: if the regularized system cannot be factorized.
    """
    if len(centers) == 0:
        raise TerrainError("center set is empty")
    n = len(centers)
    F = moment_features(params, obs.xy, centers, workers)
    H = (F.T @ F).tocsc() + params.lam * scipy.sparse.identity(n, format="csc")
    rhs = F.T @ obs.z
    blocks, block_index = _partition(centers, params)
    try:
        lu = scipy.sparse.linalg.splu(H)
    except RuntimeError as exc:
        raise TerrainSolveError(f"ridge system is singular: {exc}", _condition_estimate(H)) from exc
    weights = lu.solve(rhs)
    if not np.all(np.isfinite(weights)):
        raise TerrainSolveError("ridge solve produced non-finite weights", _condition_estimate(H))
    info = []
    for idx in blocks:
        e = np.zeros((n, len(idx)))
        e[idx, np.arange(len(idx))] = 1.0
        p = lu.solve(e)[idx]
        info.append(0.5 * (p + p.T))
    return TerrainModel(params, centers, weights, blocks, info, block_index, workers)


def _condition_estimate(H) -> float:
    try:
        inv_norm = scipy.sparse.linalg.onenormest(scipy.sparse.linalg.inv(H.tocsc()))
        return float(scipy.sparse.linalg.onenormest(H) * inv_norm)
    except Exception:  # singular beyond repair
        return math.inf


# recursive update ------------------------------------------------------------


def woodbury_update(P: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``(P^-1 + A^T A)^-1`` by the Woodbury identity.

    ``P`` is an ``n x n`` SPD inverse-information block and ``A`` an
    ``m x n`` block of feature rows. Costs one ``m x m`` Cholesky
    factorization; raises ``numpy.linalg.LinAlgError`` if the inner system
    ``I + A P A^T`` is not positive definite.
    """
    U = P @ A.T
    S = np.eye(A.shape[0]) + A @ U
    cho = scipy.linalg.cho_factor(S, lower=True)
    out = P - U @ scipy.linalg.cho_solve(cho, U.T)
    return 0.5 * (out + out.T)


def _spd_inverse(S: np.ndarray) -> np.ndarray:
    c, info = scipy.linalg.lapack.dpotrf(S, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"inner matrix not positive definite (dpotrf info={info})")
    inv, info = scipy.linalg.lapack.dpotri(c, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"dpotri failed (info={info})")
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


@dataclass
class UpdateReport:
    born: int = 0
    active_blocks: int = 0
    active_centers: int = 0
    rejected: bool = False


def add_centers(model: TerrainModel, nodes: np.ndarray) -> TerrainModel:
    """Append centers with zero weight and prior ``lam * I`` on their block."""
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1, 2)
    if len(nodes) == 0:
        return model
    params = model.kernel
    start = model.n_centers
    centers = model.centers
    centers.nodes = np.vstack([centers.nodes, nodes])
    model.weights = np.concatenate([model.weights, np.zeros(len(nodes))])
    keys = tile_keys(nodes * centers.mesh_resolution, params)
    tiles = model.tile_map()
    new_index = np.empty(len(nodes), dtype=np.int64)
    grouped: dict[tuple, list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        grouped.setdefault(key, []).append(start + i)
    for key, members in grouped.items():
        members = np.asarray(members, dtype=np.int64)
        prior = np.eye(len(members)) / params.lam
        b = tiles.get(key)
        if b is None:
            b = len(model.blocks)
            tiles[key] = b
            model.blocks.append(members)
            model.info_inverse.append(prior)
        else:
            old = model.info_inverse[b]
            model.info_inverse[b] = scipy.linalg.block_diag(old, prior)
            model.blocks[b] = np.concatenate([model.blocks[b], members])
        new_index[members - start] = b
    model.block_index = np.concatenate([model.block_index, new_index])
    model._tree = None
    return model


def recursive_update(
    model: TerrainModel,
    obs: TerrainObservation,
    birth: bool = True,
    max_batch: int = 600,
    report: UpdateReport | None = None,
) -> TerrainModel:
    """Fuse one frame of ground points into the model and return the new model.

    Centers whose kernels reach the points ("active rows") determine the
    active blocks. For those blocks the Kalman-form update

        w <- w + P' m (p_z - m^T w),   P' = P - P m (I + m^T P m)^-1 m^T P

    is applied with all active blocks merged, so couplings between
    neighbouring tiles enter the gain; afterwards the updated inverse is
    split back onto the tiles. Blocks not reached by the frame are carried
    over untouched. With ``birth`` enabled, mesh nodes newly supported by the
    frame join first with zero weight and prior ``lam * I``.

    Frames larger than ``max_batch`` points are fused in consecutive chunks
    (identical in exact arithmetic when there is a single block).

    The input model is not modified.
    """
    rep = report if report is not None else UpdateReport()
    out = model.copy()
    if birth:
        try:
            fresh = select_centers(
                obs, out.centers.roi, out.centers.mesh_resolution, out.centers.accept_radius,
                out.centers.accept_count, exclude=out.centers.nodes,
            )
        except NoSupportedCenters:
            fresh = None
        if fresh is not None:
            rep.born += len(fresh)
            add_centers(out, fresh.nodes)
    if out.n_centers == 0:
        return out
    for s in range(0, len(obs), max_batch):
        chunk = slice(s, min(len(obs), s + max_batch))
        _fuse(out, obs.xy[chunk], obs.z[chunk], rep)
    return out


def _fuse(model: TerrainModel, xy: np.ndarray, z: np.ndarray, rep: UpdateReport) -> None:
    F = _feature_matrix(model.kernel, xy, model.tree, model.workers).tocsc()
    active_cols = np.flatnonzero(np.diff(F.indptr))
    if len(active_cols) == 0:
        return
    active_blocks = np.unique(model.block_index[active_cols])
    rep.active_blocks = max(rep.active_blocks, len(active_blocks))
    rep.active_centers = max(rep.active_centers, len(active_cols))
    m = len(z)
    residual = z - F @ model.weights
    S = np.eye(m)
    parts = []
    for b in active_blocks:
        idx = model.blocks[b]
        Fb = F[:, idx]
        rows = np.flatnonzero(np.diff(Fb.tocsr().indptr))
        A = Fb[rows].toarray()
        U = model.info_inverse[b] @ A.T
        S[np.ix_(rows, rows)] += A @ U
        parts.append((b, rows, U))
    try:
        S_inv = _spd_inverse(S)
    except np.linalg.LinAlgError as exc:
        log.warning("terrain update rejected: %s", exc)
        rep.rejected = True
        return
    g = S_inv @ residual
    for b, rows, U in parts:
        idx = model.blocks[b]
        model.weights[idx] = model.weights[idx] + U @ g[rows]
        p = model.info_inverse[b] - U @ S_inv[np.ix_(rows, rows)] @ U.T
        model.info_inverse[b] = 0.5 * (p + p.T)
