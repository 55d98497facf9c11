"""Feature-based scan matching with the wheel-terrain soft constraint.

Each frame's edge and planar features are matched against a sliding-window
map (point-to-line and point-to-plane residuals) and the pose is refined
with Levenberg-Marquardt. When a terrain model is available, the signed
heights of both wheel bottoms above the terrain enter the cost with weight
``lambda_manifold``.

State perturbations are ``[dtheta, dt]`` with ``R <- R exp(hat(dtheta))``.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .kinematics import LEFT, RIGHT, JointConfig, LegModel, RobotState, manifold_jacobian, manifold_residual
from .so3 import hat

log = logging.getLogger(__name__)

EDGE = "edge"
PLANE = "plane"


class NothingToOptimize(ValueError):
    """The cost has no residual at all."""


@dataclass(frozen=True)
class FeatureCloud:
    """Edge and planar feature points of one scan, in the sensor frame.

    The optional label arrays carry the simulator's surface ids and are only
    used for diagnostics.
    """

    timestamp: float
    edge_points: np.ndarray
    planar_points: np.ndarray
    edge_labels: np.ndarray | None = None
    planar_labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("edge_points", "planar_points"):
            pts = np.ascontiguousarray(getattr(self, name), dtype=float).reshape(-1, 3)
            if not np.isfinite(pts).all():
                raise ValueError(f"{name} contains non-finite coordinates")
            object.__setattr__(self, name, pts)

    def __len__(self) -> int:
        return len(self.edge_points) + len(self.planar_points)


@dataclass(frozen=True)
class SolverConfig:
    lambda_manifold: float = 1.0
    lambda_gravity: float = 100.0
    gravity_window: int = 20
    gravity_baseline: int = 6
    lm_init_damping: float = 1e-4
    lm_max_iters: int = 15
    lm_max_rejects: int = 8
    tol_cost: float = 1e-12
    tol_step: float = 1e-9
    gate: float = 1.0
    huber_delta: float | None = 0.1
    plane_fit_tol: float = 0.1
    line_fit_tol: float = 0.05
    plane_min_extent: float = 0.02
    max_residual: float | None = 0.08
    edge_eig_ratio: float = 3.0
    neighbors: int = 5
    min_correspondences: int = 20
    degeneracy_eig: float = 1e-3
    diag_floor: float = 1e-9

    def __post_init__(self) -> None:
        if self.lambda_manifold < 0 or self.lambda_gravity < 0:
            raise ValueError("lambda_manifold and lambda_gravity must be non-negative")
        if self.gravity_window < 1:
            raise ValueError("gravity_window must be >= 1")
        if self.gravity_baseline < 2 or self.gravity_baseline % 2:
            raise ValueError("gravity_baseline must be a positive even number")
        for name in ("lm_init_damping", "tol_cost", "tol_step", "gate", "plane_fit_tol", "line_fit_tol", "edge_eig_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_residual is not None and not self.max_residual > 0:
            raise ValueError("max_residual must be positive or None")
        if self.plane_min_extent < 0:
            raise ValueError("plane_min_extent must be non-negative")
        if self.huber_delta is not None and not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive or None")
        if self.lm_max_iters < 1 or self.lm_max_rejects < 1 or self.neighbors < 3:
            raise ValueError("iteration counts must be >= 1 and neighbors >= 3")


# residual primitives -----------------------------------------------------------


def point_to_line_residual(p, point, direction) -> tuple[np.ndarray, np.ndarray]:
    """Perpendicular displacement of ``p`` from a line and its position Jacobian."""
    d = np.asarray(direction, dtype=float)
    P = np.eye(3) - np.outer(d, d)
    return P @ (np.asarray(p, dtype=float) - np.asarray(point, dtype=float)), P


def point_to_plane_residual(p, normal, offset: float) -> tuple[float, np.ndarray]:
    """Signed distance ``n.p + c`` and its position Jacobian ``n``."""
    n = np.asarray(normal, dtype=float)
    return float(n @ np.asarray(p, dtype=float) + offset), n.copy()


# map -------------------------------------------------------------------------------


def voxel_downsample(points: np.ndarray, voxel: float, labels: np.ndarray | None = None):
    """Replace the points of each voxel by their centroid.

    Voxels are emitted in order of their first point; a voxel keeps the label
    of its first point.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if voxel <= 0 or len(points) == 0:
        return points, labels
    keys = np.floor(points / voxel).astype(np.int64)
    _, first, inverse, counts = np.unique(keys, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(first), 3))
    np.add.at(sums, inverse, points)
    order = np.argsort(first, kind="stable")
    centroids = (sums / counts[:, None])[order]
    return centroids, None if labels is None else np.asarray(labels)[first[order]]


class LocalMap:
    """World-frame edge and planar points of the last ``window`` frames."""

    def __init__(self, window: int = 10, voxel: float = 0.1):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.voxel = voxel
        self._frames: deque = deque(maxlen=window)
        self._index: dict[str, tuple] = {}

    def __len__(self) -> int:
        return sum(len(self._index[k][0]) for k in self._index)

    def add(self, edge_world: np.ndarray, plane_world: np.ndarray, edge_labels=None, plane_labels=None) -> None:
        e, el = voxel_downsample(edge_world, self.voxel, edge_labels)
        p, pl = voxel_downsample(plane_world, self.voxel, plane_labels)
        self._frames.append({EDGE: (e, el), PLANE: (p, pl)})
        self._rebuild()

    def _rebuild(self) -> None:
        self._index = {}
        for kind in (EDGE, PLANE):
            pts = [f[kind][0] for f in self._frames]
            labels = [f[kind][1] for f in self._frames]
            stacked = np.concatenate(pts) if pts else np.empty((0, 3))
            lab = None
            if labels and all(x is not None for x in labels):
                lab = np.concatenate(labels)
            tree = cKDTree(stacked) if len(stacked) else None
            self._index[kind] = (stacked, lab, tree)

    def points(self, kind: str) -> np.ndarray:
        return self._index.get(kind, (np.empty((0, 3)),))[0]

    def labels(self, kind: str) -> np.ndarray | None:
        return self._index.get(kind, (None, None))[1]

    def tree(self, kind: str) -> cKDTree | None:
        return self._index.get(kind, (None, None, None))[2]

    def transformed(self, R: np.ndarray, t: np.ndarray) -> LocalMap:
        """Copy with every stored point mapped by ``x -> R x + t``."""
        out = LocalMap(self.window, self.voxel)
        for f in self._frames:
            out._frames.append({k: (v[0] @ R.T + t, v[1]) for k, v in f.items()})
        out._rebuild()
        return out


# correspondences ---------------------------------------------------------------------


@dataclass(frozen=True)
class Correspondence:
    """A feature point paired with a map line or plane.

    Lines store ``(point, unit direction)`` in ``anchor``/``direction``;
    planes store the unit normal in ``direction`` and ``offset`` so that the
    signed distance is ``normal . p + offset``.
    """

    kind: str
    source: np.ndarray
    world: np.ndarray
    anchor: np.ndarray
    direction: np.ndarray
    offset: float = 0.0
    weight: float = 1.0
    label_match: bool | None = None


@dataclass
class CorrespondenceSet:
    """Vectorized correspondences; ``source`` points are in the base frame."""

    edge_src: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    edge_anchor: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    edge_dir: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    plane_src: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    plane_normal: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    plane_offset: np.ndarray = field(default_factory=lambda: np.empty(0))
    edge_label_match: np.ndarray | None = None
    plane_label_match: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.edge_src) + len(self.plane_src)

    def as_list(self, state: RobotState) -> list[Correspondence]:
        out = []
        for i in range(len(self.edge_src)):
            lm = None if self.edge_label_match is None else bool(self.edge_label_match[i])
            out.append(Correspondence(EDGE, self.edge_src[i], state.transform(self.edge_src[i]),
                                      self.edge_anchor[i], self.edge_dir[i], label_match=lm))
        for i in range(len(self.plane_src)):
            lm = None if self.plane_label_match is None else bool(self.plane_label_match[i])
            out.append(Correspondence(PLANE, self.plane_src[i], state.transform(self.plane_src[i]),
                                      self.plane_src[i] * 0.0, self.plane_normal[i], float(self.plane_offset[i]),
                                      label_match=lm))
        return out

    def label_accuracy(self) -> float | None:
        parts = [m for m in (self.edge_label_match, self.plane_label_match) if m is not None]
        if not parts:
            return None
        allm = np.concatenate(parts)
        return float(allm.mean()) if len(allm) else None


def _match_labels(src_labels, map_labels, idx):
    if src_labels is None or map_labels is None:
        return None
    return np.all(map_labels[idx] == np.asarray(src_labels)[:, None], axis=1)


def build_correspondences(
    features: FeatureCloud,
    state: RobotState,
    local_map: LocalMap,
    config: SolverConfig = SolverConfig(),
    sensor_offset=np.zeros(3),
) -> CorrespondenceSet:
    """Pair every feature with a line or plane fitted to its map neighbours.

    Edge features take the principal direction of their ``k`` nearest map
    edge points (kept when the largest scatter eigenvalue is at least
    ``edge_eig_ratio`` times the second and every neighbour lies within
    ``line_fit_tol`` of the line). Planar features take the
    least-squares plane of their nearest planar map points (kept when every
    neighbour lies within ``plane_fit_tol`` of it and the neighbours spread
    at least ``plane_min_extent`` (rms) along both in-plane axes). Matches
    whose farthest neighbour exceeds ``gate``, or whose residual at
    ``state`` exceeds ``max_residual``, are dropped.
    """
    off = np.asarray(sensor_offset, dtype=float)
    k = config.neighbors
    out = CorrespondenceSet()

    tree = local_map.tree(EDGE)
    if len(features.edge_points) and tree is not None and tree.n >= k:
        src = features.edge_points + off
        world = state.transform(src)
        dist, idx = tree.query(world, k=k)
        ok = dist[:, -1] <= config.gate
        nb = local_map.points(EDGE)[idx]
        mean = nb.mean(axis=1)
        cen = nb - mean[:, None, :]
        cov = np.einsum("nki,nkj->nij", cen, cen) / k
        evals, evecs = np.linalg.eigh(cov)
        ok &= evals[:, 2] >= config.edge_eig_ratio * evals[:, 1]
        ok &= evals[:, 2] > 0
        direction = evecs[:, :, 2]
        along = np.einsum("nki,ni->nk", cen, direction)
        perp = np.linalg.norm(cen - along[:, :, None] * direction[:, None, :], axis=2)
        ok &= perp.max(axis=1) <= config.line_fit_tol
        if config.max_residual is not None:
            d = world - mean
            r = d - np.einsum("ni,ni->n", d, direction)[:, None] * direction
            ok &= np.linalg.norm(r, axis=1) <= config.max_residual
        out.edge_src = src[ok]
        out.edge_anchor = mean[ok]
        out.edge_dir = direction[ok] / np.linalg.norm(direction[ok], axis=1, keepdims=True)
        m = _match_labels(features.edge_labels, local_map.labels(EDGE), idx)
        out.edge_label_match = None if m is None else m[ok]

    tree = local_map.tree(PLANE)
    if len(features.planar_points) and tree is not None and tree.n >= k:
        src = features.planar_points + off
        world = state.transform(src)
        dist, idx = tree.query(world, k=k)
        ok = dist[:, -1] <= config.gate
        nb = local_map.points(PLANE)[idx]
        mean = nb.mean(axis=1)
        cen = nb - mean[:, None, :]
        cov = np.einsum("nki,nkj->nij", cen, cen)
        evals, evecs = np.linalg.eigh(cov)
        normal = evecs[:, :, 0]
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        offset = -np.einsum("ni,ni->n", normal, mean)
        spread = np.abs(np.einsum("nki,ni->nk", nb, normal) + offset[:, None])
        ok &= spread.max(axis=1) <= config.plane_fit_tol
        ok &= evals[:, 1] >= k * config.plane_min_extent**2
        if config.max_residual is not None:
            ok &= np.abs(np.einsum("ni,ni->n", world, normal) + offset) <= config.max_residual
        out.plane_src = src[ok]
        out.plane_normal = normal[ok]
        out.plane_offset = offset[ok]
        m = _match_labels(features.planar_labels, local_map.labels(PLANE), idx)
        out.plane_label_match = None if m is None else m[ok]
    return out


# cost -------------------------------------------------------------------------------------


@dataclass
class CostSystem:
    """Stacked (weighted) residuals and their Jacobian at one state."""

    cost: float
    residuals: np.ndarray
    jacobian: np.ndarray | None
    n_edge: int
    n_plane: int
    manifold: dict = field(default_factory=dict)

    @property
    def n_feature_rows(self) -> int:
        return 3 * self.n_edge + self.n_plane


@dataclass
class ManifoldTerm:
    """Inputs of the wheel-terrain residuals for one frame."""

    joints: JointConfig
    leg: LegModel
    terrain: object


@dataclass
class GravityTerm:
    """IMU tilt residual ``R f - c`` for one frame.

    ``force`` is the specific force integrated over a trailing window,
    rotated into the current body frame with the gyro; ``target`` is the
    velocity change over that window minus gravity times its length, both
    from already estimated states. Roll and pitch errors rotate ``R f`` away
    from ``target``.
    """

    force: np.ndarray
    target: np.ndarray

    def residual(self, R: np.ndarray) -> np.ndarray:
        return R @ self.force - self.target

    def jacobian(self, R: np.ndarray) -> np.ndarray:
        return np.hstack([-R @ hat(self.force), np.zeros((3, 3))])


def _huber_weights(norms: np.ndarray, delta: float | None) -> np.ndarray:
    if delta is None:
        return np.ones_like(norms)
    w = np.ones_like(norms)
    big = norms > delta
    w[big] = delta / norms[big]
    return w


def _huber_cost(norms: np.ndarray, delta: float | None) -> float:
    if delta is None:
        return float(np.sum(norms**2))
    small = norms <= delta
    return float(np.sum(norms[small] ** 2) + np.sum(2 * delta * norms[~small] - delta**2))


def total_cost(
    state: RobotState,
    corr: CorrespondenceSet,
    manifold: ManifoldTerm | None,
    config: SolverConfig,
    jacobian: bool = True,
    gravity: GravityTerm | None = None,
) -> CostSystem:
    """Scan-matching cost plus the weighted wheel residuals.

    ``cost = sum rho(|d_e|) + sum rho(|d_p|) + lambda_M (r_L^2 + r_R^2) + lambda_G |r_G|^2``
    where ``rho`` is the Huber loss (plain square when ``huber_delta`` is
    None). Rows are scaled by the square-root IRLS weights so that, without
    the Huber loss, ``cost == residuals @ residuals``. Wheel residuals whose
    terrain query is unsupported are left out.

    Raises:
        NothingToOptimize: if no residual remains.
    """
    R, t = state.rotation, state.translation
    res_parts, jac_parts = [], []
    cost = 0.0

    if len(corr.edge_src):
        p = corr.edge_src @ R.T + t
        d = corr.edge_dir
        diff = p - corr.edge_anchor
        r = diff - np.einsum("ni,ni->n", diff, d)[:, None] * d
        norms = np.linalg.norm(r, axis=1)
        cost += _huber_cost(norms, config.huber_delta)
        sw = np.sqrt(_huber_weights(norms, config.huber_delta))
        res_parts.append((sw[:, None] * r).ravel())
        if jacobian:
            P = np.eye(3) - np.einsum("ni,nj->nij", d, d)
            dp = _point_jacobians(R, corr.edge_src)
            jac_parts.append((sw[:, None, None] * np.einsum("nij,njk->nik", P, dp)).reshape(-1, 6))

    if len(corr.plane_src):
        p = corr.plane_src @ R.T + t
        r = np.einsum("ni,ni->n", p, corr.plane_normal) + corr.plane_offset
        norms = np.abs(r)
        cost += _huber_cost(norms, config.huber_delta)
        sw = np.sqrt(_huber_weights(norms, config.huber_delta))
        res_parts.append(sw * r)
        if jacobian:
            dp = _point_jacobians(R, corr.plane_src)
            jac_parts.append(sw[:, None] * np.einsum("ni,nij->nj", corr.plane_normal, dp))

    info = {}
    if manifold is not None and config.lambda_manifold > 0:
        s = np.sqrt(config.lambda_manifold)
        for side in (LEFT, RIGHT):
            r, ok = manifold_residual(state, manifold.joints, manifold.leg, side, manifold.terrain)
            info[side] = (r, ok)
            if not ok:
                continue
            cost += config.lambda_manifold * r * r
            res_parts.append(np.array([s * r]))
            if jacobian:
                jac_parts.append(s * manifold_jacobian(state, manifold.joints, manifold.leg, side, manifold.terrain)[None, :])

    if gravity is not None and config.lambda_gravity > 0:
        s = np.sqrt(config.lambda_gravity)
        r = gravity.residual(R)
        cost += config.lambda_gravity * float(r @ r)
        res_parts.append(s * r)
        if jacobian:
            jac_parts.append(s * gravity.jacobian(R))

    if not res_parts:
        raise NothingToOptimize("nothing to optimize: no correspondences and no supported wheel residual")
    residuals = np.concatenate(res_parts)
    J = np.vstack(jac_parts) if jacobian else None
    return CostSystem(cost, residuals, J, len(corr.edge_src), len(corr.plane_src), info)


def _point_jacobians(R: np.ndarray, src: np.ndarray) -> np.ndarray:
    """``d(R s + t)/d[dtheta, dt] = [-R hat(s), I]`` for every source point."""
    n = len(src)
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -src[:, 2], src[:, 1]
    S[:, 1, 0], S[:, 1, 2] = src[:, 2], -src[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -src[:, 1], src[:, 0]
    out = np.empty((n, 3, 6))
    out[:, :, :3] = -np.einsum("ij,njk->nik", R, S)
    out[:, :, 3:] = np.eye(3)
    return out


# solver --------------------------------------------------------------------------------------


@dataclass
class LMReport:
    iterations: int = 0
    converged: bool = False
    failed: bool = False
    degenerate: bool = False
    cost_trace: list = field(default_factory=list)
    n_edge: int = 0
    n_plane: int = 0
    manifold: dict = field(default_factory=dict)
    min_feature_eig: float = float("nan")
    label_accuracy: float | None = None

    def as_record(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "failed": self.failed,
            "degenerate": self.degenerate,
            "cost_trace": [float(c) for c in self.cost_trace],
            "n_edge": self.n_edge,
            "n_plane": self.n_plane,
            "manifold": {k: [float(v[0]), bool(v[1])] for k, v in self.manifold.items()},
            "min_feature_eig": float(self.min_feature_eig),
            "label_accuracy": self.label_accuracy,
        }


class ScanProblem:
    """Cost provider for one frame: re-associates on demand and evaluates the cost."""

    def __init__(
        self,
        features: FeatureCloud,
        local_map: LocalMap | None,
        manifold: ManifoldTerm | None,
        config: SolverConfig,
        sensor_offset=np.zeros(3),
        gravity: GravityTerm | None = None,
    ):
        self.features = features
        self.gravity = gravity
        self.local_map = local_map
        self.manifold = manifold
        self.config = config
        self.sensor_offset = np.asarray(sensor_offset, dtype=float)
        self.corr = CorrespondenceSet()

    def associate(self, state: RobotState) -> CorrespondenceSet:
        if self.local_map is not None and len(self.features):
            self.corr = build_correspondences(self.features, state, self.local_map, self.config, self.sensor_offset)
        return self.corr

    def evaluate(self, state: RobotState, jacobian: bool = True) -> CostSystem:
        return total_cost(state, self.corr, self.manifold, self.config, jacobian, self.gravity)


def lm_solve(initial: RobotState, problem: ScanProblem, config: SolverConfig | None = None,
             reassociate: bool = True) -> tuple[RobotState, LMReport]:
    """Levenberg-Marquardt over the 6-DoF pose.

    Every outer iteration re-associates the features at the current pose,
    then solves ``(J^T J + mu diag(J^T J)) delta = -J^T r``, accepting the step
    only if the cost (under the same association) drops; ``mu`` is divided by
    10 on acceptance and multiplied by 10 on rejection. The diagonal is
    floored at ``diag_floor`` times its largest entry so that directions no
    residual constrains receive a zero step instead of a singular solve.

    If no step is ever accepted while the gradient is not negligible, the
    initial state is returned with ``report.failed`` set.
    """
    config = config or problem.config
    report = LMReport()
    state = initial
    mu = config.lm_init_damping
    accepted_any = False
    for it in range(config.lm_max_iters):
        if reassociate or it == 0:
            problem.associate(state)
        sys = problem.evaluate(state)
        report.cost_trace.append(sys.cost)
        report.n_edge, report.n_plane, report.manifold = sys.n_edge, sys.n_plane, sys.manifold
        J, r = sys.jacobian, sys.residuals
        H = J.T @ J
        g = J.T @ r
        if it == 0:
            Hf = J[: sys.n_feature_rows].T @ J[: sys.n_feature_rows]
            report.min_feature_eig = float(np.linalg.eigvalsh(Hf)[0]) if sys.n_feature_rows else 0.0
            report.degenerate = report.min_feature_eig < config.degeneracy_eig
        diag = np.maximum(np.diag(H), config.diag_floor * max(np.diag(H).max(), 1.0))
        step = None
        for _ in range(config.lm_max_rejects):
            try:
                delta = np.linalg.solve(H + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = state.retract(delta)
            new_cost = problem.evaluate(cand, jacobian=False).cost
            if new_cost < sys.cost:
                mu = max(mu / 10.0, 1e-12)
                step = (cand, delta, new_cost)
                break
            mu *= 10.0
        report.iterations = it + 1
        if step is None:
            if not accepted_any and sys.cost > 0 and np.linalg.norm(g) > np.sqrt(config.tol_cost):
                report.failed = True
                report.label_accuracy = problem.corr.label_accuracy()
                return initial, report
            report.converged = True
            break
        accepted_any = True
        state, delta, new_cost = step
        if sys.cost - new_cost < config.tol_cost or np.linalg.norm(delta) < config.tol_step:
            report.cost_trace.append(new_cost)
            report.converged = True
            break
    report.label_accuracy = problem.corr.label_accuracy()
    return state, report
