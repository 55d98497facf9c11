"""Trajectory error metrics and terrain error histograms."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryEstimate:
    t: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray | None = None

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=float).reshape(-1)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(t) != len(p):
            raise EvaluationError("timestamps and positions differ in length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise EvaluationError("timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "positions", p)


@dataclass
class Pairs:
    """Time-associated positions; ``dropped`` counts unpaired estimate samples."""

    t: np.ndarray
    est: np.ndarray
    gt: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.t)


def associate(est: TrajectoryEstimate, gt: TrajectoryEstimate, max_dt: float = 0.02) -> Pairs:
    """Pair each estimate sample with the nearest ground-truth stamp within ``max_dt``."""
    if len(est.t) == 0 or len(gt.t) == 0:
        raise EvaluationError("cannot associate empty trajectories")
    j = np.searchsorted(gt.t, est.t)
    lo = np.clip(j - 1, 0, len(gt.t) - 1)
    hi = np.clip(j, 0, len(gt.t) - 1)
    nearest = np.where(np.abs(gt.t[lo] - est.t) <= np.abs(gt.t[hi] - est.t), lo, hi)
    ok = np.abs(gt.t[nearest] - est.t) <= max_dt
    if not ok.any():
        raise EvaluationError(f"no sample pairs within {max_dt} s")
    dropped = int((~ok).sum())
    if dropped:
        log.info("associate: %d estimate samples left unpaired", dropped)
    return Pairs(est.t[ok], est.positions[ok], gt.positions[nearest[ok]], dropped)


def rigid_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation (no scale) mapping ``src`` onto ``dst``.

    Falls back to a translation-only alignment with a warning when the
    points are (nearly) collinear. Identical inputs give the exact identity,
    so that metrics of a perfect estimate are exactly zero.
    """
    if np.array_equal(src, dst):
        return np.eye(3), np.zeros(3)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - mu_s, dst - mu_d
    spread = np.linalg.svd(A, compute_uv=False)
    if len(src) < 3 or spread[1] <= 1e-9 * max(spread[0], 1e-300):
        log.warning("degenerate trajectory for rigid alignment, using translation only")
        return np.eye(3), mu_d - mu_s
    U, _, Vt = np.linalg.svd(B.T @ A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def _aligned(pairs: Pairs, align: str) -> np.ndarray:
    if align == "none":
        return pairs.est
    if align == "rigid":
        R, t = rigid_alignment(pairs.est, pairs.gt)
        return pairs.est @ R.T + t
    raise EvaluationError(f"unknown alignment {align!r}")


def _rmse_max(err: np.ndarray) -> tuple[float, float]:
    if len(err) == 0:
        raise EvaluationError("no errors to summarize")
    return float(np.sqrt(np.mean(err**2))), float(np.max(err))


def ate_errors(pairs: Pairs, align: str = "rigid") -> np.ndarray:
    """Per-sample position error vectors after alignment."""
    return _aligned(pairs, align) - pairs.gt


def ate(pairs: Pairs, align: str = "rigid") -> tuple[float, float]:
    """Absolute trajectory error ``(rmse, max)`` of the position norms."""
    return _rmse_max(np.linalg.norm(ate_errors(pairs, align), axis=1))


def _windows(t: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, j)`` with ``t_j`` the first stamp at or after ``t_i + delta``."""
    j = np.searchsorted(t, t + delta - 1e-9)
    ok = j < len(t)
    return np.flatnonzero(ok), j[ok]


def rte_errors(pairs: Pairs, delta: float = 1.0) -> np.ndarray:
    """Relative displacement error vectors over windows of ``delta`` seconds."""
    i, j = _windows(pairs.t, delta)
    if len(i) == 0:
        raise EvaluationError(f"trajectory shorter than the {delta} s window")
    return (pairs.est[j] - pairs.est[i]) - (pairs.gt[j] - pairs.gt[i])


def rte(pairs: Pairs, delta: float = 1.0) -> tuple[float, float]:
    """Relative trajectory error ``(rmse, max)`` of the displacement-error norms."""
    return _rmse_max(np.linalg.norm(rte_errors(pairs, delta), axis=1))


def z_metrics(pairs: Pairs, align: str = "rigid", delta: float = 1.0) -> dict:
    """ATE and RTE restricted to z; the alignment still uses all three axes."""
    za = _rmse_max(np.abs(ate_errors(pairs, align)[:, 2]))
    zr = _rmse_max(np.abs(rte_errors(pairs, delta)[:, 2]))
    return {"z_ate_rmse": za[0], "z_ate_max": za[1], "z_rte_rmse": zr[0], "z_rte_max": zr[1]}


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    kept: int
    total: int

    def fraction_below(self, threshold: float) -> float:
        """Fraction of kept samples in bins whose upper edge is at most ``threshold``."""
        upper = self.edges[1:]
        return float(self.counts[upper <= threshold + 1e-12].sum() / max(self.kept, 1))

    def rows(self) -> list[tuple[float, float, int]]:
        return [(float(a), float(b), int(c)) for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def error_histogram(errors: np.ndarray, trim_fraction: float = 0.1, upper: float = 0.25, bins: int = 25) -> Histogram:
    """Histogram of absolute errors after discarding the largest ``trim_fraction``.

    Bins are ``bins`` equal widths over ``[0, upper]``; kept errors beyond
    ``upper`` are counted in the last bin.
    """
    if not 0 <= trim_fraction < 1:
        raise EvaluationError("trim_fraction must lie in [0, 1)")
    e = np.sort(np.abs(np.asarray(errors, dtype=float).ravel()))
    if len(e) == 0:
        raise EvaluationError("no errors")
    keep = len(e) - int(np.floor(trim_fraction * len(e)))
    e = e[:keep]
    edges = np.linspace(0.0, upper, bins + 1)
    idx = np.minimum(np.floor(e / (upper / bins)).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(edges, counts, keep, len(errors))


def terrain_error_histogram(model, xy: np.ndarray, z: np.ndarray, trim_fraction: float = 0.1, **kw) -> Histogram:
    """``|z - f(xy)|`` histogram for a terrain model over observation points.

    Unsupported queries are scored against a zero prediction, as the model
    reports them.
    """
    pred, _ = model.predict(np.asarray(xy, dtype=float))
    return error_histogram(np.asarray(z, dtype=float) - pred, trim_fraction, **kw)


@dataclass
class ErrorReport:
    ate_rmse: float
    ate_max: float
    rte_rmse: float
    rte_max: float
    z_ate_rmse: float
    z_ate_max: float
    z_rte_rmse: float
    z_rte_max: float
    ate_rmse_raw: float
    ate_max_raw: float
    z_ate_rmse_raw: float
    z_ate_max_raw: float
    n_pairs: int
    dropped: int
    align: str = "rigid"
    rte_window: float = 1.0
    histogram: Histogram | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("histogram")
        return d


def evaluate(est: TrajectoryEstimate, gt: TrajectoryEstimate, max_dt: float = 0.02, align: str = "rigid",
             delta: float = 1.0) -> ErrorReport:
    """Aligned and raw ATE, RTE and their z-only variants."""
    pairs = associate(est, gt, max_dt)
    a = ate(pairs, align)
    r = rte(pairs, delta)
    z = z_metrics(pairs, align, delta)
    a_raw = ate(pairs, "none")
    z_raw = _rmse_max(np.abs(ate_errors(pairs, "none")[:, 2]))
    return ErrorReport(a[0], a[1], r[0], r[1], z["z_ate_rmse"], z["z_ate_max"], z["z_rte_rmse"], z["z_rte_max"],
                       a_raw[0], a_raw[1], z_raw[0], z_raw[1], len(pairs), pairs.dropped, align, delta)
