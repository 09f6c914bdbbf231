"""Student perception stack.

Per-camera CNN features at two scales, a discrete depth distribution and
semantic scores per feature pixel, frustum pooling of both into the ego BEV
grid, a voxel LiDAR branch, fusion of current camera BEV, warped previous
camera BEV and LiDAR BEV, and finally the environment / measurement vectors
consumed by the decoder.

Tensors are batch-first. Camera tensors carry a camera axis after the batch
axis: ``(B, N_cam, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .geometry import BEV_SIZE, Pose2D, metric_to_cell
from .sensors import CameraRig, default_rig, depth_bin_centers, unproject_pixels, warp_matrix
from .teacher import MEAS_DIM, VALUE_SCALE
from .validation import ShapeError, check_shape

STRIDES = (8, 16)
N_CELLS = BEV_SIZE * BEV_SIZE
LIDAR_SLAB_EDGES = (1.0, 2.0, 3.0)  # metres; four height slabs
LIDAR_FEATS = 5  # mean x, y, z, age and point count
SPEED_SCALE = 10.0


# ---------------------------------------------------------------------------
# image branch


class Backbone(nn.Module):
    """Four strided conv layers; returns feature maps at strides 8 and 16."""

    def __init__(self, in_channels: int = 8, channels: int = 64, img_h: int = 64, img_w: int = 128):
        super().__init__()
        self.in_channels = in_channels
        self.img_hw = (img_h, img_w)
        mid = max(channels // 2, 4)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(mid, channels, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.down = nn.Sequential(nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.SiLU())

    def forward(self, images):
        check_shape(images, (None, self.in_channels, *self.img_hw), "images")
        f8 = self.stem(images)
        return [f8, self.down(f8)]


class DepthSegHead(nn.Module):
    """1x1 conv producing depth-bin logits and class logits on the stride-8 map."""

    def __init__(self, channels: int, depth_bins: int = 24, n_cls: int = 8):
        super().__init__()
        self.depth_bins = depth_bins
        self.n_cls = n_cls
        self.proj = nn.Conv2d(channels, depth_bins + n_cls, 1)

    def forward(self, feat):
        logits = self.proj(feat)
        depth_logits, seg_logits = logits.split([self.depth_bins, self.n_cls], dim=1)
        return {
            "depth_logits": depth_logits,
            "seg_logits": seg_logits,
            "depth": depth_logits.softmax(dim=1),
            "seg": seg_logits.softmax(dim=1),
        }


@lru_cache(maxsize=1024)
def _cells(camera, bins: tuple, feat_h: int, feat_w: int) -> np.ndarray:
    pts = unproject_pixels(camera, bins, feat_h, feat_w)
    i, j = metric_to_cell(pts[..., 0], pts[..., 1])
    out = np.where(i >= 0, i * BEV_SIZE + j, -1)
    out.setflags(write=False)
    return out


def frustum_cells(frustums) -> np.ndarray:
    """Flat BEV cell index of every frustum point (-1 outside the grid)."""
    fr = np.asarray(frustums)
    i, j = metric_to_cell(fr[..., 0], fr[..., 1])
    return np.where(i >= 0, i * BEV_SIZE + j, -1)


def lift_splat_bev(feat, depth, seg, frustums=None, cells=None):
    """Frustum pooling of depth-weighted pixel features into the BEV grid.

    feat: (B, N, C, Hf, Wf) pixel features; depth: (B, N, D, Hf, Wf) bin
    probabilities; seg: (B, N, K, Hf, Wf) class scores or ``None``.
    ``frustums`` holds ego-frame points (N, D, Hf, Wf, 3), optionally with a
    leading batch axis; ``cells`` may be given instead as precomputed flat
    cell indices of the same layout. Returns (B, C + K, 21, 21); each frustum
    point adds ``depth[d, p] * concat(feat[:, p], seg[:, p])`` to its cell.
    """
    B, N, C, Hf, Wf = feat.shape
    D = depth.shape[2]
    if depth.shape != (B, N, D, Hf, Wf):
        raise ShapeError(f"depth distribution shape {tuple(depth.shape)} does not match features {tuple(feat.shape)}")
    pix = feat if seg is None else torch.cat([feat, seg], dim=2)
    P = Hf * Wf
    if cells is None:
        cells = frustum_cells(frustums)
    cells = np.asarray(cells)
    if cells.shape[-3:] != (D, Hf, Wf):
        raise ShapeError(f"frustum template {cells.shape} does not match depth/feature dims {(D, Hf, Wf)}")
    cells = np.broadcast_to(cells, (B, N, D, Hf, Wf)).reshape(B * N, D * P)
    valid = cells >= 0
    pixel = np.broadcast_to(np.tile(np.arange(P), D), cells.shape)
    target = torch.as_tensor(np.where(valid, cells * P + pixel, 0))
    # W[m, cell, p] = sum over bins d landing in cell of depth[m, d, p]
    vals = depth.reshape(B * N, D * P) * torch.as_tensor(valid, dtype=depth.dtype)
    weights = torch.zeros(B * N, N_CELLS * P, dtype=depth.dtype).scatter_add(1, target, vals)
    weights = weights.view(B, N, N_CELLS, P)
    out = torch.einsum("bnkp,bncp->bck", weights, pix.reshape(B, N, pix.shape[2], P))
    return out.reshape(B, pix.shape[2], BEV_SIZE, BEV_SIZE)


def rig_cells(rig: CameraRig, bins, feat_h: int, feat_w: int, crops=None) -> np.ndarray:
    """Cell indices (B, N, D, Hf, Wf) for a rig whose images were shifted by ``crops`` (B, N, 2)."""
    bins = tuple(float(b) for b in bins)
    if crops is None:
        return np.stack([_cells(cam, bins, feat_h, feat_w) for cam in rig])[None]
    crops = np.asarray(crops, dtype=np.int64)
    return np.stack(
        [
            np.stack([_cells(cam.cropped(int(ox), int(oy), cam.width, cam.height), bins, feat_h, feat_w)
                      for cam, (ox, oy) in zip(rig, crop)])
            for crop in crops
        ]
    )


# ---------------------------------------------------------------------------
# LiDAR branch


def voxelize(points, mask=None):
    """Per-voxel mean of (x, y, z, age) plus point count.

    points: (B, P, 4); mask: (B, P) bool marking real points in a padded batch.
    Returns (B, 4 slabs * 5, 21, 21) with channel ``slab * 5 + feature``.
    """
    B, P, _ = points.shape
    dtype = points.dtype
    if mask is None:
        mask = torch.ones(B, P, dtype=torch.bool)
    n_slab = len(LIDAR_SLAB_EDGES) + 1
    out_len = B * n_slab * N_CELLS
    if P == 0:
        return torch.zeros(B, n_slab * LIDAR_FEATS, BEV_SIZE, BEV_SIZE, dtype=dtype)
    with torch.no_grad():
        i, j = metric_to_cell(points[..., 0].detach().numpy(), points[..., 1].detach().numpy())
        slab = np.searchsorted(np.asarray(LIDAR_SLAB_EDGES), points[..., 2].detach().numpy(), side="right")
    ok = torch.as_tensor(i >= 0) & mask
    flat = torch.as_tensor(((np.arange(B)[:, None] * n_slab + slab) * BEV_SIZE + i) * BEV_SIZE + j)
    flat = flat[ok]
    pts = points[ok]
    sums = torch.zeros(out_len, 4, dtype=dtype).index_add(0, flat, pts)
    counts = torch.zeros(out_len, dtype=dtype).index_add(0, flat, torch.ones(len(flat), dtype=dtype))
    mean = sums / counts.clamp(min=1.0)[:, None]
    feats = torch.cat([mean, counts[:, None]], dim=1).view(B, n_slab, BEV_SIZE, BEV_SIZE, LIDAR_FEATS)
    return feats.permute(0, 1, 4, 2, 3).reshape(B, n_slab * LIDAR_FEATS, BEV_SIZE, BEV_SIZE)


def pad_clouds(clouds) -> tuple:
    """Stack a list of (P_i, 4) clouds into a zero-padded (B, P_max, 4) array and mask."""
    n = max([len(c) for c in clouds] + [1])
    pts = np.zeros((len(clouds), n, 4), dtype=np.float32)
    mask = np.zeros((len(clouds), n), dtype=bool)
    for b, c in enumerate(clouds):
        pts[b, : len(c)] = c
        mask[b, : len(c)] = True
    return pts, mask


class LidarBEV(nn.Module):
    """Voxel statistics followed by two bias-free convs, so an empty cloud maps to zeros."""

    def __init__(self, channels: int = 64):
        super().__init__()
        n_in = (len(LIDAR_SLAB_EDGES) + 1) * LIDAR_FEATS
        self.net = nn.Sequential(
            nn.Conv2d(n_in, channels, 3, padding=1, bias=False),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
        )

    def forward(self, points, mask=None):
        return self.net(voxelize(points, mask))


# ---------------------------------------------------------------------------
# fusion and state vectors


class FuseBEV(nn.Module):
    def __init__(self, cam_channels: int, lidar_channels: int, hidden: int = 256, two_frames: bool = True):
        super().__init__()
        self.cam_channels = cam_channels
        self.lidar_channels = lidar_channels
        self.two_frames = two_frames
        n_in = cam_channels * (2 if two_frames else 1) + lidar_channels
        self.net = nn.Sequential(
            nn.Conv2d(n_in, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
        )

    def forward(self, cam_now, cam_prev, lidar):
        check_shape(cam_now, (None, self.cam_channels, BEV_SIZE, BEV_SIZE), "camera BEV")
        check_shape(lidar, (None, self.lidar_channels, BEV_SIZE, BEV_SIZE), "LiDAR BEV")
        parts = [cam_now]
        if self.two_frames:
            check_shape(cam_prev, (None, self.cam_channels, BEV_SIZE, BEV_SIZE), "previous camera BEV")
            parts.append(cam_prev)
        parts.append(lidar)
        return self.net(torch.cat(parts, dim=1))


class StateEncoder(nn.Module):
    """H_env from the fused BEV map, H_mst from the measurement vector, plus speed/value heads."""

    def __init__(self, hidden: int = 256, meas_dim: int = MEAS_DIM, down_channels: int = 16):
        super().__init__()
        side = (BEV_SIZE + 1) // 2
        self.down = nn.Sequential(nn.Conv2d(hidden, down_channels, 3, stride=2, padding=1), nn.SiLU())
        self.env = nn.Linear(down_channels * side * side, hidden)
        self.mst = nn.Sequential(nn.Linear(meas_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.speed_head = nn.Linear(hidden, 1)
        self.value_head = nn.Linear(2 * hidden, 1)

    def env_vector(self, bev):
        return self.env(self.down(bev).flatten(1))

    def heads(self, h_env, h_mst):
        speed = self.speed_head(h_env).squeeze(-1) * SPEED_SCALE
        value = self.value_head(torch.cat([h_env, h_mst], dim=-1)).squeeze(-1) * VALUE_SCALE
        return speed, value

    def forward(self, bev, meas):
        h_env = self.env_vector(bev)
        h_mst = self.mst(meas)
        speed, value = self.heads(h_env, h_mst)
        return h_env, h_mst, speed, value


@dataclass
class EncoderOutput:
    feats: list  # per scale (B, N, C, H_s, W_s)
    depth_logits: torch.Tensor  # (B, N, D, Hf, Wf)
    seg_logits: torch.Tensor  # (B, N, K, Hf, Wf)
    depth: torch.Tensor
    seg: torch.Tensor
    cam_bev: torch.Tensor
    lidar_bev: torch.Tensor
    bev: torch.Tensor  # fused H_BEV (B, hidden, 21, 21)
    distill: torch.Tensor  # H_BEV projected to teacher channels
    h_env: torch.Tensor
    h_mst: torch.Tensor
    speed: torch.Tensor
    value: torch.Tensor


def batch_warp(motions, dtype=torch.float32) -> torch.Tensor:
    """(B, 441, 441) resampling matrices for previous poses (B, 3) in the current frame."""
    return torch.as_tensor(np.stack([warp_matrix(Pose2D(*map(float, m))) for m in np.asarray(motions)]), dtype=dtype)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, rig: CameraRig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.rig = rig or default_rig(cfg.img_h, cfg.img_w)
        self.bins = tuple(float(b) for b in depth_bin_centers(cfg.depth_bins, cfg.depth_min, cfg.depth_max))
        self.feat_hw = (cfg.img_h // STRIDES[0], cfg.img_w // STRIDES[0])
        self.backbone = Backbone(cfg.c_in, cfg.img_channels, cfg.img_h, cfg.img_w)
        self.depth_seg = DepthSegHead(cfg.img_channels, cfg.depth_bins, cfg.n_cls)
        self.lidar = LidarBEV(cfg.lidar_channels)
        self.fuse = FuseBEV(cfg.img_channels + cfg.n_cls, cfg.lidar_channels, cfg.hidden, cfg.two_frames)
        self.distill = nn.Conv2d(cfg.hidden, cfg.teacher_channels, 1)
        self.state = StateEncoder(cfg.hidden)

    def image_branch(self, images, crops=None):
        """images (B, N, C_in, H, W) -> (per-scale features, head outputs, camera BEV)."""
        B, N = images.shape[:2]
        feats = self.backbone(images.flatten(0, 1))
        ds = self.depth_seg(feats[0])
        feats = [f.view(B, N, *f.shape[1:]) for f in feats]
        ds = {k: v.view(B, N, *v.shape[1:]) for k, v in ds.items()}
        seg = ds["seg"].detach() if self.cfg.detach_seg_scatter else ds["seg"]
        cells = rig_cells(self.rig, self.bins, *self.feat_hw, crops)
        cam_bev = lift_splat_bev(feats[0], ds["depth"], seg, cells=cells)
        return feats, ds, cam_bev

    def forward(self, batch: dict) -> EncoderOutput:
        """``batch`` keys: images, crops, meas, lidar, lidar_mask and, for two-frame
        models, prev_images, prev_crops and motion (previous ego pose in the current frame)."""
        feats, ds, cam_bev = self.image_branch(batch["images"], batch.get("crops"))
        cam_prev = None
        if self.cfg.two_frames:
            _, _, prev_bev = self.image_branch(batch["prev_images"], batch.get("prev_crops"))
            warp = batch_warp(batch["motion"], prev_bev.dtype)
            flat = prev_bev.flatten(2)
            cam_prev = torch.einsum("bkm,bcm->bck", warp, flat).reshape(prev_bev.shape)
        lidar_bev = self.lidar(batch["lidar"], batch.get("lidar_mask"))
        bev = self.fuse(cam_bev, cam_prev, lidar_bev)
        h_env, h_mst, speed, value = self.state(bev, batch["meas"])
        return EncoderOutput(
            feats=feats,
            depth_logits=ds["depth_logits"],
            seg_logits=ds["seg_logits"],
            depth=ds["depth"],
            seg=ds["seg"],
            cam_bev=cam_bev,
            lidar_bev=lidar_bev,
            bev=bev,
            distill=self.distill(bev),
            h_env=h_env,
            h_mst=h_mst,
            speed=speed,
            value=value,
        )
