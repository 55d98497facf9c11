"""Scene primitives, vectorized ray casting and labelled feature scans."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..kinematics import RobotState
from ..scanmatch import FeatureCloud
from .terrain import TerrainSpec

TERRAIN_LABEL = 0
MISS = -1

KIND_EDGE = "edge"
KIND_PLANE = "plane"
KIND_RAW = "raw"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; walls and poles are thin boxes."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self) -> None:
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self.lo} {self.hi}")

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def wall(x0, y0, x1, y1, height, thickness=0.3, base=-1.0) -> Box:
    """Axis-aligned wall between two points (one coordinate must match)."""
    if x0 != x1 and y0 != y1:
        raise ValueError("walls must be axis aligned")
    h = thickness / 2
    if y0 == y1:
        return Box((min(x0, x1), y0 - h, base), (max(x0, x1), y0 + h, height))
    return Box((x0 - h, min(y0, y1), base), (x0 + h, max(y0, y1), height))


def pole(x, y, height, width=0.3, base=-1.0) -> Box:
    h = width / 2
    return Box((x - h, y - h, base), (x + h, y + h, height))


@dataclass(frozen=True)
class ScanConfig:
    """Ray pattern and feature extraction settings.

    Elevation rings are spread uniformly over ``[elev_min_deg, elev_max_deg]``;
    each frame draws a random azimuth offset so that successive scans sample
    different points. With ``non_repetitive`` every ray also draws its
    elevation uniformly within its ring's band, mimicking sensors whose
    pattern does not repeat from scan to scan.
    """

    n_rings: int = 16
    n_azimuth: int = 180
    elev_min_deg: float = -40.0
    elev_max_deg: float = 20.0
    max_range: float = 15.0
    march_step: float = 0.08
    edge_margin: float = 0.06
    plane_margin: float = 0.15
    ground_plane_fraction: float = 0.3
    max_edges: int = 400
    max_planes: int = 1200
    max_raw: int = 4000
    non_repetitive: bool = True

    def directions(self, rng: np.random.Generator | None = None) -> np.ndarray:
        elev = np.radians(np.linspace(self.elev_min_deg, self.elev_max_deg, self.n_rings))
        az = np.linspace(0, 2 * np.pi, self.n_azimuth, endpoint=False)
        if rng is not None:
            az = az + rng.uniform(0, 2 * np.pi / self.n_azimuth)
        E, A = np.meshgrid(elev, az, indexing="ij")
        if rng is not None and self.non_repetitive and self.n_rings > 1:
            band = (elev[1] - elev[0]) / 2
            E = E + rng.uniform(-band, band, E.shape)
        return np.column_stack([np.cos(E.ravel()) * np.cos(A.ravel()), np.cos(E.ravel()) * np.sin(A.ravel()), np.sin(E.ravel())])

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Scene:
    terrain: TerrainSpec
    boxes: list[Box] = field(default_factory=list)
    _bounds: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def bounds(self) -> tuple[float, float]:
        if self._bounds is None:
            lo, hi = self.terrain.height_bounds()
            self._bounds = (lo - 0.05, hi + 0.05)
        return self._bounds

    def to_dict(self) -> dict:
        return {"terrain": self.terrain.to_dict(), "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        return cls(TerrainSpec.from_dict(d["terrain"]), [Box(tuple(b["lo"]), tuple(b["hi"])) for b in d.get("boxes", [])])


@dataclass
class RayHits:
    """First hit of every ray; misses carry ``t = inf`` and label ``MISS``."""

    t: np.ndarray
    points: np.ndarray
    label: np.ndarray
    face_axis: np.ndarray


def _cast_boxes(boxes: list[Box], o: np.ndarray, d: np.ndarray, t_max: np.ndarray):
    n = len(d)
    best = t_max.copy()
    label = np.full(n, MISS)
    axis = np.full(n, -1)
    with np.errstate(all="ignore"):
        inv = 1.0 / d
    for i, box in enumerate(boxes):
        t1 = (np.asarray(box.lo) - o) * inv
        t2 = (np.asarray(box.hi) - o) * inv
        tnear = np.fmin(t1, t2)
        tfar = np.fmax(t1, t2)
        t_in = np.nanmax(tnear, axis=1)
        t_out = np.nanmin(tfar, axis=1)
        hit = (t_out >= t_in) & (t_in > 0) & (t_in < best)
        best[hit] = t_in[hit]
        label[hit] = i + 1
        axis[hit] = np.nanargmax(tnear[hit], axis=1)
    return best, label, axis


def _cast_terrain(scene: Scene, o: np.ndarray, d: np.ndarray, t_max: np.ndarray, step: float):
    """First crossing of the height field by marching plus bisection."""
    spec = scene.terrain
    zlo, zhi = scene.bounds
    n = len(d)
    # parameter window where the ray lies within the height bounds
    with np.errstate(all="ignore"):
        ta = (zhi - o[:, 2]) / d[:, 2]
        tb = (zlo - o[:, 2]) / d[:, 2]
    t0 = np.where(d[:, 2] < 0, np.maximum(ta, 0), 0.0)
    t1 = np.where(d[:, 2] < 0, tb, np.where(o[:, 2] <= zhi, np.where(d[:, 2] > 0, ta, t_max), -1.0))
    t1 = np.minimum(t1, t_max)
    # stay inside the extent
    xmin, ymin, xmax, ymax = spec.extent
    with np.errstate(all="ignore"):
        for k, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
            ex = np.where(d[:, k] > 0, (hi - o[:, k]) / d[:, k], np.where(d[:, k] < 0, (lo - o[:, k]) / d[:, k], np.inf))
            t1 = np.minimum(t1, ex)
    out = np.full(n, np.inf)
    live = np.flatnonzero(t1 > t0)
    if len(live) == 0:
        return out
    o, d, t0, t1 = o[live], d[live], t0[live], t1[live]
    steps = int(np.ceil((t1 - t0).max() / step)) + 1
    ts = t0[:, None] + step * np.arange(steps + 1)[None, :]
    ts = np.minimum(ts, t1[:, None])
    pts = o[:, None, :] + ts[..., None] * d[:, None, :]
    g = pts[..., 2] - spec._eval(pts[..., :2].reshape(-1, 2))[0].reshape(ts.shape)
    below = g <= 0
    first = np.argmax(below, axis=1)
    found = below[np.arange(len(live)), first] & (first > 0)
    if not found.any():
        return out
    rows = np.flatnonzero(found)
    lo = ts[rows, first[rows] - 1]
    hi = ts[rows, first[rows]]
    oo, dd = o[rows], d[rows]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        p = oo + mid[:, None] * dd
        above = p[:, 2] - spec._eval(p[:, :2])[0] > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out[live[rows]] = hi
    return out


def cast_rays(scene: Scene, origin, directions: np.ndarray, max_range: float, step: float = 0.08) -> RayHits:
    """Cast rays from ``origin`` (``(3,)`` or ``(n, 3)``) against boxes and terrain.

    Terrain hits are projected vertically onto the surface, so a ray hitting
    flat ground returns that ground height exactly; box hits are snapped onto
    the face they enter.
    """
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    o = np.broadcast_to(np.asarray(origin, dtype=float), d.shape).copy()
    t_max = np.full(len(d), float(max_range))
    t_box, label, axis = _cast_boxes(scene.boxes, o, d, t_max)
    t_ter = _cast_terrain(scene, o, d, np.minimum(t_box, t_max), step)
    terrain_first = t_ter < t_box
    t = np.where(terrain_first, t_ter, t_box)
    label = np.where(terrain_first, TERRAIN_LABEL, label)
    axis = np.where(terrain_first, -1, axis)
    pts = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    ground = label == TERRAIN_LABEL
    if ground.any():
        pts[ground, 2] = scene.terrain._eval(pts[ground, :2])[0]
    for i, box in enumerate(scene.boxes):
        sel = np.flatnonzero(label == i + 1)
        if len(sel):
            ax = axis[sel]
            face = np.where(o[sel, ax] < np.asarray(box.lo)[ax], np.asarray(box.lo)[ax], np.asarray(box.hi)[ax])
            pts[sel, ax] = face
    t = np.where(label == MISS, np.inf, t)
    return RayHits(t, pts, label, axis)


def _ground_planar(spec: TerrainSpec, xy: np.ndarray, margin: float, tol: float = 0.003) -> np.ndarray:
    """Points whose neighbourhood of radius ``margin`` is a plane within ``tol``."""
    h0, g0 = spec._eval(xy)
    ok = np.ones(len(xy), dtype=bool)
    for dx, dy in ((margin, 0), (-margin, 0), (0, margin), (0, -margin)):
        q = xy + [dx, dy]
        inside = spec.contains(q)
        qh = spec._eval(q)[0]
        ok &= inside & (np.abs(qh - h0 - g0 @ np.array([dx, dy])) < tol)
    return ok


def _footprint_distance(boxes: list[Box], xy: np.ndarray) -> np.ndarray:
    """2-D distance from each point to the nearest box footprint."""
    out = np.full(len(xy), np.inf)
    for box in boxes:
        dx = np.maximum(np.maximum(box.lo[0] - xy[:, 0], xy[:, 0] - box.hi[0]), 0.0)
        dy = np.maximum(np.maximum(box.lo[1] - xy[:, 1], xy[:, 1] - box.hi[1]), 0.0)
        out = np.minimum(out, np.hypot(dx, dy))
    return out


def classify_hits(scene: Scene, hits: RayHits, config: ScanConfig, rng: np.random.Generator):
    """Assign ``edge``/``plane``/``raw`` kinds; edge points are snapped onto vertical box edges.

    Returns ``(points, kind, label)`` for all hits, noise-free.
    """
    valid = np.flatnonzero(hits.label != MISS)
    pts = hits.points[valid].copy()
    label = hits.label[valid]
    axis = hits.face_axis[valid]
    kind = np.full(len(valid), KIND_RAW, dtype=object)

    ground = label == TERRAIN_LABEL
    if ground.any():
        idx = np.flatnonzero(ground)
        planar = _ground_planar(scene.terrain, pts[idx, :2], config.plane_margin)
        planar &= _footprint_distance(scene.boxes, pts[idx, :2]) > config.plane_margin
        keep = rng.random(len(idx)) < config.ground_plane_fraction
        kind[idx[planar & keep]] = KIND_PLANE

    for i, box in enumerate(scene.boxes):
        sel = np.flatnonzero(label == i + 1)
        if not len(sel):
            continue
        lo, hi = np.asarray(box.lo), np.asarray(box.hi)
        p = pts[sel]
        ax = axis[sel]
        vertical = ax < 2
        # horizontal in-face coordinate of vertical faces: y for x-faces and vice versa
        h_axis = 1 - np.minimum(ax, 1)
        u = p[np.arange(len(sel)), h_axis]
        d_lo = u - lo[h_axis]
        d_hi = hi[h_axis] - u
        d_vert = np.minimum(d_lo, d_hi)
        edge = vertical & (d_vert < config.edge_margin)
        snap = np.where(d_lo <= d_hi, lo[h_axis], hi[h_axis])
        e = np.flatnonzero(edge)
        pts[sel[e], h_axis[e]] = snap[e]
        # distance to every border of the face for planar selection
        d_border = np.full(len(sel), np.inf)
        for k in range(3):
            in_face = ax != k
            dk = np.minimum(p[:, k] - lo[k], hi[k] - p[:, k])
            d_border = np.where(in_face, np.minimum(d_border, dk), d_border)
        clearance = p[:, 2] - scene.terrain._eval(p[:, :2])[0]
        plane = ~edge & (d_border > config.plane_margin) & (clearance > config.plane_margin)
        kind[sel[edge]] = KIND_EDGE
        kind[sel[plane]] = KIND_PLANE
    return pts, kind, label


def _cap(idx: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= n:
        return idx
    return np.sort(rng.choice(idx, n, replace=False))


@dataclass
class Scan:
    """One rendered scan in the sensor frame."""

    t: float
    points: np.ndarray
    kind: np.ndarray
    label: np.ndarray

    def features(self) -> FeatureCloud:
        e = self.kind == KIND_EDGE
        p = self.kind == KIND_PLANE
        return FeatureCloud(self.t, self.points[e], self.points[p], self.label[e], self.label[p])

    def ground_points(self) -> np.ndarray:
        return self.points[self.label == TERRAIN_LABEL]


def render_scan(
    scene: Scene,
    state: RobotState,
    t: float,
    config: ScanConfig,
    lidar_sigma: float,
    rng: np.random.Generator,
    lidar_offset=np.zeros(3),
) -> Scan:
    """Ray-cast one scan from the LiDAR mounted at ``lidar_offset`` on the base.

    Isotropic Gaussian noise of standard deviation ``lidar_sigma`` is added
    to every returned point after classification; labels keep the true
    surface id (0 for terrain).
    """
    R = state.rotation
    origin = R @ np.asarray(lidar_offset, dtype=float) + state.translation
    dirs = config.directions(rng) @ R.T
    hits = cast_rays(scene, origin, dirs, config.max_range, config.march_step)
    pts, kind, label = classify_hits(scene, hits, config, rng)
    e = _cap(np.flatnonzero(kind == KIND_EDGE), config.max_edges, rng)
    p = _cap(np.flatnonzero(kind == KIND_PLANE), config.max_planes, rng)
    r = _cap(np.flatnonzero(kind == KIND_RAW), config.max_raw, rng)
    keep = np.concatenate([e, p, r])
    pts, kind, label = pts[keep], kind[keep], label[keep]
    if lidar_sigma > 0:
        pts = pts + rng.normal(0.0, lidar_sigma, pts.shape)
    sensor = (pts - origin) @ R
    return Scan(t, sensor, kind.astype(str), label.astype(np.int64))
