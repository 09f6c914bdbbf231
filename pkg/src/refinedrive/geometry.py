"""Planar geometry shared by the simulator, sensors and the BEV grid.

Frame convention (ego and world): x points forward, y points to the vehicle's
right and yaw rotates x toward y. This matches the camera rig layout where the
left camera sits at negative y. All formulas are the usual 2D rigid-motion ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely

# BEV extent in ego metres and grid size
BEV_FRONT = 30.4
BEV_BACK = -8.0
BEV_LEFT = -19.2
BEV_RIGHT = 19.2
BEV_SIZE = 21
BEV_RES_X = (BEV_FRONT - BEV_BACK) / BEV_SIZE
BEV_RES_Y = (BEV_RIGHT - BEV_LEFT) / BEV_SIZE


def wrap_angle(a):
    """Wrap into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 transform local -> parent."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def to_local(self, pts) -> np.ndarray:
        """Express parent-frame points (..., 2) in this pose's local frame."""
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def to_parent(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack(
            [self.x + c * pts[..., 0] - s * pts[..., 1], self.y + s * pts[..., 0] + c * pts[..., 1]],
            axis=-1,
        )

    def relative_to(self, other: "Pose2D") -> "Pose2D":
        """This pose expressed in ``other``'s frame."""
        p = other.to_local(np.array([self.x, self.y]))
        return Pose2D(float(p[0]), float(p[1]), self.yaw - other.yaw)


def compose(a: Pose2D, b: Pose2D) -> Pose2D:
    """a ∘ b: ``b`` given in a's frame, returned in a's parent frame."""
    p = a.to_parent(np.array([b.x, b.y]))
    return Pose2D(float(p[0]), float(p[1]), a.yaw + b.yaw)


def invert(a: Pose2D) -> Pose2D:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2D(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.yaw)


# ---------------------------------------------------------------------------
# BEV grid <-> metric map. Row 0 is the front edge, column 0 the left edge.


def cell_to_metric(i, j):
    """Metric (x, y) centre of BEV cell (row i, column j)."""
    i = np.asarray(i, dtype=float)
    j = np.asarray(j, dtype=float)
    return BEV_FRONT - (i + 0.5) * BEV_RES_X, BEV_LEFT + (j + 0.5) * BEV_RES_Y


def metric_to_cell_float(x, y):
    """Continuous cell coordinates; integers land on cell centres."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (BEV_FRONT - x) / BEV_RES_X - 0.5, (y - BEV_LEFT) / BEV_RES_Y - 0.5


def metric_to_cell(x, y):
    """Integer cell indices (row, col); -1 marks out-of-range points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    i = np.floor((BEV_FRONT - x) / BEV_RES_X).astype(np.int64)
    j = np.floor((y - BEV_LEFT) / BEV_RES_Y).astype(np.int64)
    ok = (i >= 0) & (i < BEV_SIZE) & (j >= 0) & (j < BEV_SIZE)
    return np.where(ok, i, -1), np.where(ok, j, -1)


def bev_cell_polygons() -> np.ndarray:
    """(21, 21, 4, 2) corners of every cell in ego metres."""
    ii, jj = np.meshgrid(np.arange(BEV_SIZE), np.arange(BEV_SIZE), indexing="ij")
    cx, cy = cell_to_metric(ii, jj)
    hx, hy = BEV_RES_X / 2, BEV_RES_Y / 2
    offs = np.array([[hx, -hy], [hx, hy], [-hx, hy], [-hx, -hy]])
    return np.stack([cx, cy], axis=-1)[:, :, None, :] + offs


# ---------------------------------------------------------------------------
# footprints and overlap tests


def box_corners(pose: Pose2D, length: float, width: float) -> np.ndarray:
    hl, hw = length / 2, width / 2
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    return pose.to_parent(local)


def _project(poly: np.ndarray, axis: np.ndarray):
    d = poly @ axis
    return d.min(), d.max()


def polygons_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for convex polygons given as (N, 2) corner arrays."""
    for poly in (a, b):
        n = len(poly)
        for k in range(n):
            edge = poly[(k + 1) % n] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            amin, amax = _project(a, axis)
            bmin, bmax = _project(b, axis)
            if amax < bmin or bmax < amin:
                return False
    return True


def point_box_distance(pt, pose: Pose2D, length: float, width: float) -> float:
    local = pose.to_local(np.asarray(pt, dtype=float))
    dx = max(abs(local[0]) - length / 2, 0.0)
    dy = max(abs(local[1]) - width / 2, 0.0)
    return math.hypot(dx, dy)


def disc_box_overlap(center, radius: float, pose: Pose2D, length: float, width: float) -> bool:
    return point_box_distance(center, pose, length, width) <= radius


def segments_intersect(p1, p2, q1, q2) -> bool:
    """Closed-segment intersection test."""
    p1, p2, q1, q2 = (np.asarray(v, dtype=float) for v in (p1, p2, q1, q2))

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and min(a[1], b[1]) - 1e-12 <= c[1] <= max(
            a[1], b[1]
        ) + 1e-12

    return (
        (d1 == 0 and on_seg(q1, q2, p1))
        or (d2 == 0 and on_seg(q1, q2, p2))
        or (d3 == 0 and on_seg(p1, p2, q1))
        or (d4 == 0 and on_seg(p1, p2, q2))
    )


# ---------------------------------------------------------------------------
# polylines


class Polyline:
    """Piecewise-linear path with arc-length parametrisation."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)[:, :2]
        if len(pts) < 2:
            raise ValueError("polyline needs at least 2 points")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])
        self._geom = None
        self._offsets = {}

    def point_at(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        k = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1)
        t = (s - self.cum[k]) / np.maximum(self.seg_len[k], 1e-12)
        return self.points[k] + t[..., None] * (self.points[k + 1] - self.points[k])

    def heading_at(self, s) -> float:
        s = float(np.clip(s, 0.0, self.length))
        k = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1))
        d = self.points[k + 1] - self.points[k]
        return math.atan2(d[1], d[0])

    def project(self, pt, s_lo: float = 0.0, s_hi: float | None = None):
        """Closest arc length (within [s_lo, s_hi]) and distance to ``pt``."""
        s_hi = self.length if s_hi is None else s_hi
        pt = np.asarray(pt, dtype=float)
        a = self.points[:-1]
        d = self.points[1:] - a
        L2 = np.maximum((d * d).sum(1), 1e-12)
        t = np.clip(((pt - a) * d).sum(1) / L2, 0.0, 1.0)
        s = self.cum[:-1] + t * self.seg_len
        keep = (s >= s_lo - 1e-9) & (s <= s_hi + 1e-9)
        if not keep.any():
            keep = np.ones_like(keep)
        proj = a + t[:, None] * d
        dist = np.hypot(*(proj - pt).T)
        dist = np.where(keep, dist, np.inf)
        k = int(np.argmin(dist))
        return float(np.clip(s[k], s_lo, s_hi)), float(dist[k])

    def distance(self, pts) -> np.ndarray:
        """Vectorised distance from (N, 2) points to the polyline."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if self._geom is None:
            self._geom = shapely.LineString(self.points)
            shapely.prepare(self._geom)
        return shapely.distance(shapely.points(pts), self._geom)

    def offset(self, lateral: float) -> "Polyline":
        """Parallel copy shifted to the right (positive y side) by ``lateral``."""
        if lateral in self._offsets:
            return self._offsets[lateral]
        pts = self.points
        tang = np.gradient(pts, axis=0)
        tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-12)
        normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
        self._offsets[lateral] = Polyline(pts + lateral * normal)
        return self._offsets[lateral]
