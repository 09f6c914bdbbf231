"""Emulated sensor rig: pinhole cameras, a sparse LiDAR and BEV rasters.

Cameras use the optical convention (X right, Y down, Z forward) and the
pixel-edge convention: pixel ``u`` covers ``[u, u + 1)`` so the principal point
of a ``W``-wide image is ``W / 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import torch

from .config import SimConfig
from .geometry import (
    BEV_BACK,
    BEV_FRONT,
    BEV_LEFT,
    BEV_RIGHT,
    BEV_SIZE,
    Polyline,
    Pose2D,
    bev_cell_polygons,
    box_corners,
    cell_to_metric,
    metric_to_cell_float,
    polygons_overlap,
)
from .simulator import AGENT_HEIGHT, COMMANDS, POLE_HEIGHT, POLE_RADIUS, WorldState

# semantic classes; 0 is background / no surface
CLASSES = ("background", "road", "marking", "vehicle", "pedestrian", "static", "light-red", "light-green")
N_CLASSES = len(CLASSES)
RASTER_CHANNELS = ("drivable", "route", "vehicles", "vehicles-prev", "pedestrians", "red-stop-lines", "ego")
LIDAR_POS = (0.0, 0.0, 2.5)
LIDAR_AZIMUTHS = 16
LIDAR_ELEVATIONS = (-15.0, -8.0, -3.0, 2.0)
LIDAR_RANGE = 40.0


@dataclass(frozen=True)
class Camera:
    name: str
    x: float
    y: float
    z: float
    yaw: float  # degrees in the ego frame
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 64.0

    @property
    def fov(self) -> float:
        return math.degrees(2 * math.atan(self.width / (2 * self.fx)))

    def axes(self) -> np.ndarray:
        """Rows: camera right, down and forward axes in ego coordinates."""
        c, s = math.cos(math.radians(self.yaw)), math.sin(math.radians(self.yaw))
        return np.array([[-s, c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])

    def scaled(self, stride: float) -> "Camera":
        """The same camera seen at a feature map ``stride`` times smaller."""
        return replace(
            self, fx=self.fx / stride, fy=self.fy / stride, cx=self.cx / stride, cy=self.cy / stride,
            width=int(round(self.width / stride)), height=int(round(self.height / stride)),
        )

    def cropped(self, ox: int, oy: int, width: int, height: int) -> "Camera":
        """Camera whose image is the window starting at pixel (ox, oy)."""
        return replace(self, cx=self.cx - ox, cy=self.cy - oy, width=width, height=height)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple

    def __iter__(self):
        return iter(self.cameras)

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, k):
        return self.cameras[k]


def default_rig(img_h: int = 64, img_w: int = 128, fov: float = 150.0) -> CameraRig:
    fx = img_w / (2 * math.tan(math.radians(fov) / 2))
    layout = [("front", 1.5, 0.0, 0.0), ("left", 0.0, -0.3, -90.0), ("right", 0.0, 0.3, 90.0), ("back", -1.6, 0.0, 180.0)]
    return CameraRig(tuple(Camera(n, x, y, 2.5, yaw, fx, fx, img_w / 2, img_h / 2, img_w, img_h) for n, x, y, yaw in layout))


# ---------------------------------------------------------------------------
# projection


def project_points(points, camera: Camera):
    """Project ego-frame points (K, 3) to pixels.

    Works on numpy arrays and torch tensors alike (torch keeps gradients).
    Returns ``(uv, valid)`` where ``valid`` requires the point to lie between
    the near and far planes and inside the image.
    """
    ax = camera.axes()
    if isinstance(points, torch.Tensor):
        ax = torch.as_tensor(ax, dtype=points.dtype)
        t = torch.tensor([camera.x, camera.y, camera.z], dtype=points.dtype)
        pc = (points - t) @ ax.T
        z = pc[..., 2]
        zs = torch.where(z.abs() > 1e-9, z, torch.full_like(z, 1e-9))
        u = camera.fx * pc[..., 0] / zs + camera.cx
        v = camera.fy * pc[..., 1] / zs + camera.cy
        uv = torch.stack([u, v], dim=-1)
    else:
        points = np.asarray(points, dtype=float)
        pc = (points - np.array([camera.x, camera.y, camera.z])) @ ax.T
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            zs = np.where(np.abs(z) > 1e-9, z, 1e-9)
            u = camera.fx * pc[..., 0] / zs + camera.cx
            v = camera.fy * pc[..., 1] / zs + camera.cy
        uv = np.stack([u, v], axis=-1)
    valid = (z > camera.near) & (z <= camera.far) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return uv, valid


def unproject_pixels(camera: Camera, depth_bins, feat_h: int, feat_w: int) -> np.ndarray:
    """Frustum template (D, H_f, W_f, 3): ego points at each bin depth along every feature-pixel ray."""
    bins = tuple(float(d) for d in np.asarray(depth_bins).ravel())
    if len(bins) == 0 or any(b <= 0 for b in bins) or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
        raise ValueError("depth bins must be positive and strictly increasing")
    return _frustum(camera, bins, int(feat_h), int(feat_w))


@lru_cache(maxsize=512)
def _frustum(camera: Camera, bins: tuple, feat_h: int, feat_w: int) -> np.ndarray:
    sx = camera.width / feat_w
    sy = camera.height / feat_h
    u = (np.arange(feat_w) + 0.5) * sx
    v = (np.arange(feat_h) + 0.5) * sy
    xn = (u - camera.cx) / camera.fx
    yn = (v - camera.cy) / camera.fy
    d = np.asarray(bins)[:, None, None]
    X = d * xn[None, None, :] * np.ones((1, feat_h, 1))
    Y = d * yn[None, :, None] * np.ones((1, 1, feat_w))
    Z = d * np.ones((1, feat_h, feat_w))
    cam = np.stack([X, Y, Z], axis=-1)
    pts = cam @ camera.axes() + np.array([camera.x, camera.y, camera.z])
    pts.setflags(write=False)
    return pts


def depth_bin_centers(n: int = 24, lo: float = 1.0, hi: float = 32.0) -> np.ndarray:
    edges = np.linspace(lo, hi, n + 1)
    return 0.5 * (edges[:-1] + edges[1:])


# ---------------------------------------------------------------------------
# frames


@dataclass
class SensorFrame:
    images: np.ndarray  # (4, C_in, H, W)
    depth_gt: np.ndarray  # (4, H, W), 0 where nothing is hit
    seg_gt: np.ndarray  # (4, H, W) class ids
    lidar: np.ndarray  # (N, 4): x, y, z, frame age
    speed: float
    target_point: np.ndarray  # (2,)
    command: np.ndarray  # (6,) one-hot
    gt_control: np.ndarray = field(default_factory=lambda: np.zeros(2))
    gt_trajectory: np.ndarray = field(default_factory=lambda: np.zeros((4, 2)))
    pose: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world ego pose (metadata)


@dataclass
class _Scene:
    boxes: list  # (corners (4, 2), height, class)
    discs: list  # (center (2,), radius, height, class)


def _scene_in_ego(state: WorldState) -> _Scene:
    ego = state.ego.pose
    boxes, discs = [], []
    for a in state.agents:
        local = Pose2D(*ego.to_local(np.array([a.pose.x, a.pose.y])), a.pose.yaw - ego.yaw)
        if a.kind == "pedestrian":
            discs.append((np.array([local.x, local.y]), a.radius, AGENT_HEIGHT["pedestrian"], CLASSES.index("pedestrian")))
        else:
            cls = CLASSES.index("vehicle" if a.kind == "vehicle" else "static")
            boxes.append((box_corners(local, a.length, a.width), AGENT_HEIGHT[a.kind], cls))
    for light in state.lights:
        c = ego.to_local(np.array(light.pole, dtype=float))
        cls = CLASSES.index("light-red" if light.state == "red" else "light-green")
        discs.append((c, POLE_RADIUS, POLE_HEIGHT, cls))
    return _Scene(boxes, discs)


def _ray_box(ox, oy, dx, dy, corners):
    """Entry/exit ray parameters (arrays over rays) against a convex quad; inf when missed."""
    t_in = np.full(dx.shape, -np.inf)
    t_out = np.full(dx.shape, np.inf)
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        e = b - a
        n = np.array([e[1], -e[0]])  # outward for clockwise, fixed below
        inside_ref = corners.mean(0)
        if np.dot(n, inside_ref - a) > 0:
            n = -n
        denom = n[0] * dx + n[1] * dy
        num = np.dot(n, a) - (n[0] * ox + n[1] * oy)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        entering = denom < 0
        leaving = denom > 0
        parallel_out = (denom == 0) & (num < 0)
        t_in = np.where(entering, np.maximum(t_in, t), t_in)
        t_out = np.where(leaving, np.minimum(t_out, t), t_out)
        t_out = np.where(parallel_out, -np.inf, t_out)
    hit = t_in <= t_out
    return np.where(hit, t_in, np.inf), np.where(hit, t_out, np.inf)


def _ray_disc(ox, oy, dx, dy, center, radius):
    fx, fy = ox - center[0], oy - center[1]
    a = dx * dx + dy * dy
    b = 2 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - radius * radius
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    return np.where(ok, t0, np.inf), np.where(ok, t1, np.inf)


def _surface_hits(ox, oy, oz, dx, dy, slope, scene: _Scene, near: float, far: float):
    """First object hit along rays ``o + t (dx, dy, -slope)``; returns (t, class, height)."""
    best_t = np.full(np.broadcast(dx, slope).shape, np.inf)
    best_c = np.zeros(best_t.shape, dtype=np.int64)
    best_h = np.zeros(best_t.shape)
    items = [(_ray_box(ox, oy, dx, dy, c), h, cls) for c, h, cls in scene.boxes]
    items += [(_ray_disc(ox, oy, dx, dy, c, r), h, cls) for c, r, h, cls in scene.discs]
    for (t_in, t_out), h, cls in items:
        t_in = np.broadcast_to(t_in, best_t.shape)
        t_out = np.broadcast_to(t_out, best_t.shape)
        z_in = oz - t_in * slope
        side = (t_in > near) & (z_in >= 0) & (z_in <= h)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_roof = np.where(slope > 0, (oz - h) / slope, np.inf)
        roof = ~side & (slope > 0) & (t_roof >= np.maximum(t_in, near)) & (t_roof <= t_out)
        t = np.where(side, t_in, np.where(roof, t_roof, np.inf))
        t = np.where(t <= far, t, np.inf)
        better = t < best_t
        best_t = np.where(better, t, best_t)
        best_c = np.where(better, cls, best_c)
        best_h = np.where(better, oz - t * slope, best_h)
    return best_t, best_c, best_h


def _ground_classes(pts: np.ndarray, state: WorldState, cfg: SimConfig) -> np.ndarray:
    """Classes (0 background, 1 road, 2 marking) of ego-frame ground points."""
    out = np.zeros(len(pts), dtype=np.int64)
    if len(pts) == 0 or not state.world_map.lanes:
        return out
    world = state.ego.pose.to_parent(pts)
    drivable = state.world_map.drivable(world)
    out[drivable] = CLASSES.index("road")
    idx = np.nonzero(drivable)[0]
    if len(idx):
        wp = world[idx]
        route_line = state.route.polyline
        mark = np.zeros(len(idx), dtype=bool)
        for lat in (-cfg.lane_half_width, cfg.lane_half_width):
            mark |= np.abs(route_line.offset(lat).distance(wp)) < 0.15
        for light in state.lights:
            seg = Polyline(np.array(light.stop_line))
            mark |= seg.distance(wp) < 0.3
        out[idx[mark]] = CLASSES.index("marking")
    return out


def render_frame(state: WorldState, rig: CameraRig | None = None, cfg: SimConfig | None = None) -> SensorFrame:
    """Ray-cast every camera column and LiDAR beam against the 2.5D scene."""
    rig = rig or default_rig()
    cfg = cfg or SimConfig()
    scene = _scene_in_ego(state)
    n_cam = len(rig)
    H, W = rig[0].height, rig[0].width
    images = np.zeros((n_cam, N_CLASSES, H, W), dtype=np.float32)
    depth = np.zeros((n_cam, H, W), dtype=np.float32)
    seg = np.zeros((n_cam, H, W), dtype=np.int64)
    for k, cam in enumerate(rig):
        ax = cam.axes()
        xn = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
        yn = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
        # horizontal direction per unit camera depth
        dx = ax[2, 0] + xn * ax[0, 0]
        dy = ax[2, 1] + xn * ax[0, 1]
        t_obj, c_obj, h_obj = _surface_hits(
            cam.x, cam.y, cam.z, dx[None, :], dy[None, :], yn[:, None], scene, cam.near, cam.far
        )
        with np.errstate(divide="ignore"):
            t_ground = np.where(yn[:, None] > 0, cam.z / yn[:, None], np.inf) * np.ones((1, cam.width))
        t_ground = np.where(t_ground <= cam.far, t_ground, np.inf)
        ground_first = t_ground < t_obj
        gi = np.nonzero(ground_first & np.isfinite(t_ground))
        gpts = np.stack([cam.x + t_ground[gi] * dx[gi[1]], cam.y + t_ground[gi] * dy[gi[1]]], axis=-1)
        gcls = _ground_classes(gpts, state, cfg)
        cls = np.where(ground_first, 0, c_obj)
        cls[gi] = gcls
        t = np.where(ground_first, t_ground, t_obj)
        surf = (cls > 0) & np.isfinite(t)
        depth[k] = np.where(surf, t, 0.0)
        seg[k] = np.where(surf, cls, 0)
        height = np.where(surf & ~ground_first, h_obj, 0.0)
        for c in range(1, N_CLASSES):
            images[k, c - 1] = seg[k] == c
        images[k, N_CLASSES - 1] = height / POLE_HEIGHT
    lidar = lidar_scan(scene)
    ego = state.ego.pose
    line = state.route.polyline
    s_target = min(state.route_progress + 20.0, line.length)
    target = ego.to_local(line.point_at(s_target))
    command = np.zeros(len(COMMANDS), dtype=np.float32)
    command[COMMANDS.index(state.route.command_at(state.route_progress + 10.0))] = 1.0
    return SensorFrame(
        images=images,
        depth_gt=depth,
        seg_gt=seg,
        lidar=lidar,
        speed=float(state.ego.speed),
        target_point=np.asarray(target, dtype=np.float32),
        command=command,
        pose=ego.as_array(),
    )


def lidar_scan(scene: _Scene) -> np.ndarray:
    """Object returns of the fixed beam pattern; ground returns are removed."""
    az = np.arange(LIDAR_AZIMUTHS) * (2 * np.pi / LIDAR_AZIMUTHS)
    el = np.radians(np.asarray(LIDAR_ELEVATIONS))
    dx = np.cos(az)[None, :] * np.ones((len(el), 1))
    dy = np.sin(az)[None, :] * np.ones((len(el), 1))
    slope = -np.tan(el)[:, None] * np.ones((1, len(az)))
    t, cls, h = _surface_hits(LIDAR_POS[0], LIDAR_POS[1], LIDAR_POS[2], dx, dy, slope, scene, 0.5, LIDAR_RANGE)
    hit = np.isfinite(t)
    pts = np.stack([LIDAR_POS[0] + t[hit] * dx[hit], LIDAR_POS[1] + t[hit] * dy[hit], h[hit], np.zeros(hit.sum())], axis=-1)
    return pts.astype(np.float32).reshape(-1, 4)


def stack_lidar(current: np.ndarray, previous: np.ndarray, motion: Pose2D) -> np.ndarray:
    """Concatenate the previous sweep, moved into the current ego frame, with age 1."""
    prev = np.asarray(previous, dtype=np.float64).reshape(-1, 4).copy()
    if len(prev):
        prev[:, :2] = motion.to_parent(prev[:, :2])
        prev[:, 3] = 1.0
    return np.concatenate([np.asarray(current, dtype=np.float64).reshape(-1, 4), prev], axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# BEV grids


@dataclass
class BEVGrid:
    data: object  # (C, 21, 21) numpy array or torch tensor
    extent: tuple = (BEV_FRONT, BEV_BACK, BEV_LEFT, BEV_RIGHT)

    @property
    def shape(self):
        return tuple(self.data.shape)


def raster_privileged_bev(state: WorldState, cfg: SimConfig | None = None) -> BEVGrid:
    """Binary occupancy raster of the privileged scene on the 21x21 grid."""
    cfg = cfg or SimConfig()
    ego = state.ego.pose
    out = np.zeros((len(RASTER_CHANNELS), BEV_SIZE, BEV_SIZE), dtype=np.float32)
    ii, jj = np.meshgrid(np.arange(BEV_SIZE), np.arange(BEV_SIZE), indexing="ij")
    cx, cy = cell_to_metric(ii, jj)
    centers = np.stack([cx.ravel(), cy.ravel()], axis=-1)
    world = ego.to_parent(centers)
    if state.world_map.lanes:
        out[0] = state.world_map.drivable(world).reshape(BEV_SIZE, BEV_SIZE)
        line = state.route.polyline
        s0 = state.route_progress
        ahead = line.points[line.cum >= s0 - 1e-9]
        ahead = np.vstack([line.point_at(s0)[None], ahead])
        if len(ahead) >= 2:
            out[1] = (Polyline(ahead).distance(world) <= cfg.lane_half_width).reshape(BEV_SIZE, BEV_SIZE)
    cells = bev_cell_polygons()

    def fill_box(ch, pose_world, length, width):
        local = Pose2D(*ego.to_local(np.array([pose_world.x, pose_world.y])), pose_world.yaw - ego.yaw)
        corners = box_corners(local, length, width)
        _fill_polygon(out[ch], corners, cells)

    def fill_disc(ch, center_world, radius):
        c = ego.to_local(np.asarray(center_world, dtype=float))
        # distance from disc centre to each cell square
        d = np.abs(centers - c) - np.array([cells[0, 0, 0, 0] - cells[0, 0, 2, 0], cells[0, 0, 1, 1] - cells[0, 0, 0, 1]]) / 2
        dist = np.hypot(np.maximum(d[:, 0], 0), np.maximum(d[:, 1], 0)).reshape(BEV_SIZE, BEV_SIZE)
        out[ch][dist <= radius] = 1.0

    for a in state.agents:
        if a.kind == "pedestrian":
            fill_disc(4, (a.pose.x, a.pose.y), a.radius)
        else:
            fill_box(2, a.pose, a.length, a.width)
    for a in state.prev_agents:
        if a.kind != "pedestrian":
            fill_box(3, a.pose, a.length, a.width)
    for light in state.lights:
        if light.state == "red":
            p = ego.to_local(np.array(light.stop_line, dtype=float))
            thin = np.array([p[0], p[1], p[1] + 1e-3 * np.array([1.0, 0.0]), p[0] + 1e-3 * np.array([1.0, 0.0])])
            _fill_polygon(out[5], thin, cells)
    fill_box(6, ego, cfg.ego_length, cfg.ego_width)
    return BEVGrid(out)


def _fill_polygon(channel: np.ndarray, corners: np.ndarray, cells: np.ndarray) -> None:
    center = corners.mean(0)
    rad = np.linalg.norm(corners - center, axis=1).max() + np.linalg.norm(cells[0, 0, 0] - cells[0, 0, 2]) / 2
    cc = cells.mean(axis=2)
    near = np.linalg.norm(cc - center, axis=-1) <= rad
    for i, j in zip(*np.nonzero(near)):
        if polygons_overlap(corners, cells[i, j]):
            channel[i, j] = 1.0


def warp_matrix(motion: Pose2D) -> np.ndarray:
    """(441, 441) bilinear resampling matrix for ``ego_warp_bev``.

    ``motion`` is the previous ego pose expressed in the current ego frame.
    Row ``m`` of the matrix holds the weights that output cell ``m`` draws from
    the flattened previous grid.
    """
    ii, jj = np.meshgrid(np.arange(BEV_SIZE), np.arange(BEV_SIZE), indexing="ij")
    cx, cy = cell_to_metric(ii.ravel(), jj.ravel())
    prev = motion.to_local(np.stack([cx, cy], axis=-1))
    fi, fj = metric_to_cell_float(prev[:, 0], prev[:, 1])
    # snap round-off so an identity warp is exact
    fi = np.where(np.abs(fi - np.round(fi)) < 1e-9, np.round(fi), fi)
    fj = np.where(np.abs(fj - np.round(fj)) < 1e-9, np.round(fj), fj)
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    wi = fi - i0
    wj = fj - j0
    mat = np.zeros((BEV_SIZE * BEV_SIZE, BEV_SIZE * BEV_SIZE))
    rows = np.arange(BEV_SIZE * BEV_SIZE)
    for di, dj, w in ((0, 0, (1 - wi) * (1 - wj)), (0, 1, (1 - wi) * wj), (1, 0, wi * (1 - wj)), (1, 1, wi * wj)):
        ti, tj = i0 + di, j0 + dj
        ok = (ti >= 0) & (ti < BEV_SIZE) & (tj >= 0) & (tj < BEV_SIZE) & (w != 0)
        np.add.at(mat, (rows[ok], ti[ok] * BEV_SIZE + tj[ok]), w[ok])
    return mat


def ego_warp_bev(prev, motion: Pose2D):
    """Resample a previous-frame BEV grid into the current ego frame.

    Accepts a ``BEVGrid``, a (C, 21, 21) array or a (B, C, 21, 21) tensor
    (with one shared motion). Samples falling outside the previous grid read zero.
    """
    data = prev.data if isinstance(prev, BEVGrid) else prev
    mat = warp_matrix(motion)
    if isinstance(data, torch.Tensor):
        m = torch.as_tensor(mat, dtype=data.dtype)
        flat = data.reshape(*data.shape[:-2], -1)
        out = (flat @ m.T).reshape(data.shape)
    else:
        flat = np.asarray(data).reshape(*np.shape(data)[:-2], -1)
        out = (flat @ mat.T).reshape(np.shape(data)).astype(np.asarray(data).dtype)
    return BEVGrid(out) if isinstance(prev, BEVGrid) else out


def image_height_channel(images: np.ndarray) -> np.ndarray:
    return np.asarray(images)[..., N_CLASSES - 1, :, :]


def images_from_parts(seg: np.ndarray, height: np.ndarray) -> np.ndarray:
    """Rebuild camera images from class ids and the height channel (inverse of the render encoding)."""
    seg = np.asarray(seg)
    out = np.zeros(seg.shape[:-2] + (N_CLASSES,) + seg.shape[-2:], dtype=np.float32)
    for c in range(1, N_CLASSES):
        out[..., c - 1, :, :] = seg == c
    out[..., N_CLASSES - 1, :, :] = height
    return out
