"""Analytic ground-truth height fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("flat", "ramp", "staircase", "hill", "composite")


class TerrainDomainError(ValueError):
    """Query outside the terrain extent."""


def _smooth_step(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """C1 step on ``[0, 1]`` and its derivative."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u)


@dataclass(frozen=True)
class TerrainSpec:
    """Height field ``z = h(x, y)``.

    Kinds and their parameters:

    * ``flat``: ``height`` (default 0).
    * ``ramp``: ``slope``, ``start_x`` (default 0); ``h = slope * (x - start_x)``.
    * ``staircase``: ``step_height``, ``step_depth``, ``n_steps``, ``start_x``
      (default 0), ``descending`` (default False), ``edge_width`` (default 0).
      The height is ``clip(floor((x - start_x) / step_depth), 0, n_steps) * step_height``
      (negated when descending). A positive ``edge_width`` replaces each riser
      by a C1 blend of that width centred on the riser.
    * ``hill``: ``amplitude``, ``wavelength``, ``start_x`` (default 0),
      ``cycles`` (default 1); a raised-cosine bump along x, modulated in y.
    * ``composite``: ``children``, heights summed.

    ``extent`` is ``(xmin, ymin, xmax, ymax)``; children of a composite
    inherit the parent's extent.
    """

    kind: str
    params: dict = field(default_factory=dict)
    extent: tuple[float, float, float, float] = (-10.0, -10.0, 40.0, 10.0)
    children: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        p = self.params
        if self.kind == "staircase":
            for key in ("step_height", "step_depth"):
                if not p.get(key, 0) > 0:
                    raise ValueError(f"staircase {key} must be positive")
            if int(p.get("n_steps", 0)) < 1:
                raise ValueError("staircase n_steps must be >= 1")
            if p.get("edge_width", 0.0) < 0 or p.get("edge_width", 0.0) >= p["step_depth"]:
                raise ValueError("edge_width must lie in [0, step_depth)")
        if self.kind == "hill":
            if not (p.get("amplitude", 0) > 0 and p.get("wavelength", 0) > 0):
                raise ValueError("hill amplitude and wavelength must be positive")
        if self.kind == "ramp" and "slope" not in p:
            raise ValueError("ramp needs a slope")
        if self.kind == "composite" and not self.children:
            raise ValueError("composite terrain needs children")
        xmin, ymin, xmax, ymax = self.extent
        if not (xmin < xmax and ymin < ymax):
            raise ValueError("empty terrain extent")

    # evaluation --------------------------------------------------------------

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        xmin, ymin, xmax, ymax = self.extent
        return (xy[:, 0] >= xmin) & (xy[:, 0] <= xmax) & (xy[:, 1] >= ymin) & (xy[:, 1] <= ymax)

    def _check(self, xy: np.ndarray) -> None:
        if not np.isfinite(xy).all():
            raise TerrainDomainError("non-finite terrain query")
        if not self.contains(xy).all():
            raise TerrainDomainError(f"terrain query outside extent {self.extent}")

    def height(self, xy) -> np.ndarray:
        """Heights at ``(n, 2)`` query points (a single point gives shape ``(1,)``)."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self._check(xy)
        return self._eval(xy)[0]

    def gradient(self, xy) -> np.ndarray:
        """Analytic ``(dh/dx, dh/dy)`` at ``(n, 2)`` query points."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self._check(xy)
        return self._eval(xy)[1]

    def _eval(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, y = xy[:, 0], xy[:, 1]
        p = self.params
        grad = np.zeros_like(xy)
        if self.kind == "flat":
            return np.full(len(xy), float(p.get("height", 0.0))), grad
        if self.kind == "ramp":
            s = float(p["slope"])
            grad[:, 0] = s
            return s * (x - p.get("start_x", 0.0)), grad
        if self.kind == "staircase":
            return self._staircase(x, grad)
        if self.kind == "hill":
            a, lam = float(p["amplitude"]), float(p["wavelength"])
            x0 = p.get("start_x", 0.0)
            u = (x - x0) / lam
            inside = (u >= 0) & (u <= p.get("cycles", 1))
            k = 2 * np.pi / lam
            bump = 0.5 * (1 - np.cos(2 * np.pi * u))
            dbump = 0.5 * k * np.sin(2 * np.pi * u)
            lat = 0.75 + 0.25 * np.cos(k * y)
            dlat = -0.25 * k * np.sin(k * y)
            h = np.where(inside, a * bump * lat, 0.0)
            grad[:, 0] = np.where(inside, a * dbump * lat, 0.0)
            grad[:, 1] = np.where(inside, a * bump * dlat, 0.0)
            return h, grad
        h = np.zeros(len(xy))
        for child in self.children:
            hc, gc = child._eval(xy)
            h += hc
            grad += gc
        return h, grad

    def _staircase(self, x: np.ndarray, grad: np.ndarray):
        p = self.params
        rise, depth, n = float(p["step_height"]), float(p["step_depth"]), int(p["n_steps"])
        sign = -1.0 if p.get("descending", False) else 1.0
        u = x - p.get("start_x", 0.0)
        width = float(p.get("edge_width", 0.0))
        if width == 0.0:
            return sign * rise * np.clip(np.floor(u / depth), 0, n), grad
        # only the nearest riser can be mid-blend because edge_width < step_depth
        full = np.clip(np.floor((u - width / 2) / depth), 0, n)
        k = np.clip(np.rint(u / depth), 1, n)
        off = u - k * depth
        blending = np.abs(off) < width / 2
        s, ds = _smooth_step(off / width + 0.5)
        h = full + np.where(blending, s, 0.0)
        grad[:, 0] += sign * rise * np.where(blending, ds / width, 0.0)
        return sign * rise * h, grad

    def step_edges(self) -> np.ndarray:
        """x positions of every riser (staircases only, also inside composites)."""
        if self.kind == "staircase":
            p = self.params
            return p.get("start_x", 0.0) + p["step_depth"] * np.arange(1, int(p["n_steps"]) + 1)
        if self.kind == "composite":
            parts = [c.step_edges() for c in self.children]
            return np.sort(np.concatenate(parts)) if parts else np.empty(0)
        return np.empty(0)

    def height_bounds(self, resolution: float = 0.05) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.extent
        gx = np.arange(xmin, xmax + resolution, resolution).clip(xmin, xmax)
        gy = np.arange(ymin, ymax + resolution, resolution).clip(ymin, ymax)
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        h = self._eval(np.column_stack([xx.ravel(), yy.ravel()]))[0]
        return float(h.min()), float(h.max())

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "params": dict(self.params), "extent": list(self.extent)}
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
        return out

    @classmethod
    def from_dict(cls, d: dict, extent=None) -> TerrainSpec:
        ext = tuple(d.get("extent", extent or (-10.0, -10.0, 40.0, 10.0)))
        children = tuple(cls.from_dict(c, ext) for c in d.get("children", ()))
        return cls(d["kind"], dict(d.get("params", {})), ext, children)


def terrain_height(spec: TerrainSpec, xy) -> float | np.ndarray:
    """Ground-truth height; a single 2-D point gives a float."""
    arr = np.asarray(xy, dtype=float)
    h = spec.height(arr)
    return float(h[0]) if arr.ndim == 1 else h
