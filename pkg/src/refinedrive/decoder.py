"""Cascaded coarse-to-fine decoder.

A coarse head turns the state vectors into a first trajectory and control.
Each of the K stacked layers then

* looks: projects the current trajectory points into every camera, samples
  the multi-scale image features around them with learned offsets, and gathers
  the LiDAR BEV neighbourhood under each point;
* predicts: unrolls a convolutional GRU from the fused BEV map, driven by the
  current control and trajectory, to get one future feature map per step;
* refines: regresses additive offsets for trajectory and control.

Layers do not share parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .geometry import BEV_FRONT, BEV_LEFT, BEV_RES_X, BEV_RES_Y, BEV_SIZE
from .sensors import Camera, CameraRig, default_rig, project_points
from .validation import check_shape

STRIDES = (8, 16)
TRAJ_NORM = 10.0  # metres; scales trajectory inputs to network-friendly magnitudes


@dataclass
class TeacherForcingBundle:
    predict_feature_gt: torch.Tensor  # (B, T, hidden, 21, 21)
    future_targets: dict


@dataclass
class DecoderLayerOutput:
    traj: torch.Tensor  # (B, T, 2)
    ctrl: torch.Tensor  # (B, 2)
    look_feature: torch.Tensor | None = None
    predict_feature: torch.Tensor | None = None
    ctrl_offset: torch.Tensor | None = None
    traj_offset: torch.Tensor | None = None
    tf: TeacherForcingBundle | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# coarse head


class CoarseHead(nn.Module):
    def __init__(self, hidden: int = 256, horizon: int = 4):
        super().__init__()
        self.horizon = horizon
        self.mlp = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.SiLU(), nn.Linear(hidden, 2 + 2 * horizon))

    def forward(self, h_env, h_mst):
        out = self.mlp(torch.cat([h_env, h_mst], dim=-1))
        return out[:, 2:].reshape(-1, self.horizon, 2), torch.tanh(out[:, :2])


# ---------------------------------------------------------------------------
# deformable sampling


def bilinear_zero(feat, xy):
    """Bilinear lookup with zero outside the map.

    feat: (M, C, H, W); xy: (M, Q, 2) continuous (column, row) sample indices
    where integer values hit pixel centres. Returns (M, Q, C).
    """
    M, C, H, W = feat.shape
    x, y = xy[..., 0], xy[..., 1]
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    wx = x - x0
    wy = y - y0
    flat = feat.flatten(2)
    out = feat.new_zeros(M, C, xy.shape[1])
    for dx, dy, w in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)), (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).long()
        vals = flat.gather(2, idx[:, None, :].expand(-1, C, -1))
        out = out + vals * torch.where(inside, w, torch.zeros_like(w))[:, None, :]
    return out.transpose(1, 2)


class DeformableSampler(nn.Module):
    """Single-head multi-scale deformable sampling.

    From each query it predicts ``n_points`` pixel offsets and attention logits
    per scale; logits are normalised jointly over scales and points.
    """

    def __init__(self, channels: int, hidden: int = 256, n_levels: int = 2, n_points: int = 4):
        super().__init__()
        self.n_levels = n_levels
        self.n_points = n_points
        self.offsets = nn.Linear(hidden, n_levels * n_points * 2)
        self.attn = nn.Linear(hidden, n_levels * n_points)
        self.out = nn.Linear(channels, hidden)
        nn.init.zeros_(self.offsets.weight)
        nn.init.zeros_(self.attn.weight)
        nn.init.zeros_(self.attn.bias)
        # start from a small ring of points around the reference
        ang = torch.arange(n_points, dtype=torch.float32) * (2 * np.pi / n_points)
        ring = torch.stack([ang.cos(), ang.sin()], dim=-1) * 0.5
        with torch.no_grad():
            self.offsets.bias.copy_(ring.repeat(n_levels, 1).flatten())

    def sample(self, feats, ref, query):
        """Pre-projection output (M, Q, C).

        feats: list over scales of (M, C, H_l, W_l); ref: (M, Q, L, 2) reference
        points in each scale's pixel units (pixel-edge convention, so the
        centre of pixel k is k + 0.5); query: (M, Q, hidden).
        """
        M, Q = query.shape[:2]
        L, P = self.n_levels, self.n_points
        off = self.offsets(query).view(M, Q, L, P, 2)
        w = self.attn(query).view(M, Q, L * P).softmax(dim=-1).view(M, Q, L, P)
        acc = 0.0
        for lvl in range(L):
            loc = ref[:, :, lvl, None, :] + off[:, :, lvl] - 0.5
            vals = bilinear_zero(feats[lvl], loc.reshape(M, Q * P, 2)).view(M, Q, P, -1)
            acc = acc + (vals * w[:, :, lvl, :, None]).sum(dim=2)
        return acc

    def forward(self, feats, ref, query):
        return self.out(self.sample(feats, ref, query))


def deformable_sample(sampler: DeformableSampler, feats, ref_px, query):
    """Single-query convenience wrapper: feats per scale (C, H, W), ref_px (L, 2), query (hidden,)."""
    out = sampler([f[None] for f in feats], ref_px[None, None], query[None, None])
    return out[0, 0]


# ---------------------------------------------------------------------------
# look


def project_batch(points, camera: Camera, offsets=None):
    """Project (B, T, 3) ego points through ``camera`` whose image was shifted by ``offsets`` (B, 2)."""
    uv, _ = project_points(points, camera)
    if offsets is not None:
        uv = uv - torch.as_tensor(offsets, dtype=uv.dtype)[:, None, :]
    ax = torch.as_tensor(camera.axes()[2], dtype=points.dtype)
    z = (points - torch.tensor([camera.x, camera.y, camera.z], dtype=points.dtype)) @ ax
    u, v = uv[..., 0], uv[..., 1]
    valid = (z > camera.near) & (z <= camera.far) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return uv, valid


def bev_neighbourhood(grid, traj):
    """3x3 cell neighbourhood of ``grid`` (B, C, 21, 21) under each point of ``traj`` (B, T, 2).

    Returns (B, T, 9 * C); cells beyond the border read zero.
    """
    B, C = grid.shape[:2]
    with torch.no_grad():
        i = torch.floor((BEV_FRONT - traj[..., 0]) / BEV_RES_X).long()
        j = torch.floor((traj[..., 1] - BEV_LEFT) / BEV_RES_Y).long()
    padded = F.pad(grid, (1, 1, 1, 1)).flatten(2)  # (B, C, 23 * 23)
    side = BEV_SIZE + 2
    parts = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ii = i + di + 1
            jj = j + dj + 1
            ok = (ii >= 0) & (ii < side) & (jj >= 0) & (jj < side)
            idx = (ii.clamp(0, side - 1) * side + jj.clamp(0, side - 1))
            vals = padded.gather(2, idx[:, None, :].expand(-1, C, -1))
            parts.append(vals * ok[:, None, :].to(grid.dtype))
    return torch.stack(parts, dim=1).permute(0, 3, 1, 2).reshape(B, traj.shape[1], 9 * C)


class LookModule(nn.Module):
    def __init__(self, hidden: int, img_channels: int, lidar_channels: int, horizon: int = 4,
                 n_points: int = 4, rig: CameraRig | None = None):
        super().__init__()
        self.rig = rig or default_rig()
        self.horizon = horizon
        self.query = nn.Linear(2 * hidden, hidden)
        self.step_embed = nn.Parameter(torch.zeros(horizon, hidden))
        self.sampler = DeformableSampler(img_channels, hidden, len(STRIDES), n_points)
        self.grid = nn.Linear(9 * lidar_channels, hidden, bias=False)
        self.mlp = nn.Sequential(nn.Linear(2 * hidden * horizon, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.env_update = nn.Linear(hidden, hidden)

    def point_features(self, feats, lidar_bev, traj, h_env, h_mst, crops=None):
        """Per-point (image, grid) features, each (B, T, hidden)."""
        B, T, _ = traj.shape
        pts = torch.cat([traj, traj.new_zeros(B, T, 1)], dim=-1)
        q = self.query(torch.cat([h_env, h_mst], dim=-1))[:, None, :] + self.step_embed[:T]
        img = traj.new_zeros(B, T, q.shape[-1])
        n_valid = traj.new_zeros(B, T)
        for n, cam in enumerate(self.rig):
            uv, valid = project_batch(pts, cam, None if crops is None else np.asarray(crops)[:, n])
            ref = torch.stack([uv / s for s in STRIDES], dim=2)
            ref = torch.where(valid[..., None, None], ref, torch.zeros_like(ref))
            samp = self.sampler([f[:, n] for f in feats], ref, q)
            img = img + samp * valid[..., None].to(samp.dtype)
            n_valid = n_valid + valid.to(samp.dtype)
        img = img / n_valid.clamp(min=1.0)[..., None]
        grid = self.grid(bev_neighbourhood(lidar_bev, traj))
        return img, grid

    def forward(self, feats, lidar_bev, traj, h_env, h_mst, crops=None):
        img, grid = self.point_features(feats, lidar_bev, traj, h_env, h_mst, crops)
        h_look = self.mlp(torch.cat([img, grid], dim=-1).flatten(1))
        return h_look, h_env + self.env_update(h_look)


# ---------------------------------------------------------------------------
# predict


class SpatialGRUCell(nn.Module):
    """GRU whose affine maps are 3x3 convolutions. The update gate ``z`` mixes
    ``(1 - z) * hidden + z * candidate``."""

    def __init__(self, hidden: int, in_channels: int = 16):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(hidden + in_channels, 2 * hidden, 3, padding=1)
        self.cand = nn.Conv2d(hidden + in_channels, hidden, 3, padding=1)

    def forward(self, h, x):
        zr = torch.sigmoid(self.gates(torch.cat([h, x], dim=1)))
        z, r = zr.split(self.hidden, dim=1)
        n = torch.tanh(self.cand(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * n


def spatial_gru_step(cell: SpatialGRUCell, hidden, inp):
    return cell(hidden, inp)


class PredictionModule(nn.Module):
    def __init__(self, hidden: int, horizon: int = 4, action_channels: int = 16):
        super().__init__()
        self.horizon = horizon
        self.encode = nn.Linear(4, action_channels)
        self.cell = SpatialGRUCell(hidden, action_channels)

    def unroll(self, bev, ctrl, traj):
        h = bev
        out = []
        for t in range(self.horizon):
            a = self.encode(torch.cat([ctrl, traj[:, t] / TRAJ_NORM], dim=-1))
            h = self.cell(h, a[:, :, None, None].expand(-1, -1, *bev.shape[-2:]))
            out.append(h)
        return torch.stack(out, dim=1)

    def forward(self, bev, ctrl, traj, gt=None, targets=None):
        """Free-running unroll, plus a teacher-forced one when ``gt = (ctrl, traj)`` is given."""
        pred = self.unroll(bev, ctrl, traj)
        if gt is None:
            return pred, None
        if targets is None:
            raise ValueError("teacher forcing requested but no future targets were supplied")
        gt_ctrl, gt_traj = gt
        return pred, TeacherForcingBundle(self.unroll(bev, gt_ctrl, gt_traj), targets)


# ---------------------------------------------------------------------------
# refine


class RefineStep(nn.Module):
    def __init__(self, hidden: int, horizon: int = 4):
        super().__init__()
        self.horizon = horizon
        self.pool = nn.Linear(horizon * hidden, hidden)
        n_in = 2 * hidden + 2 + 2 * horizon + 2 * hidden
        self.mlp = nn.Sequential(nn.Linear(n_in, hidden), nn.SiLU(), nn.Linear(hidden, 2 + 2 * horizon))
        with torch.no_grad():
            self.mlp[-1].weight.mul_(0.1)
            self.mlp[-1].bias.zero_()

    def pooled(self, h_predict):
        """Spatial mean, flattened over time, then a linear map to ``hidden``."""
        return self.pool(h_predict.mean(dim=(-2, -1)).flatten(1))

    def forward(self, traj, ctrl, h_look, h_predict, h_env, h_mst):
        B = traj.shape[0]
        hidden = h_env.shape[-1]
        look = h_look if h_look is not None else h_env.new_zeros(B, hidden)
        pred = self.pooled(h_predict) if h_predict is not None else h_env.new_zeros(B, hidden)
        x = torch.cat([look, pred, ctrl, traj.flatten(1) / TRAJ_NORM, h_env, h_mst], dim=-1)
        off = self.mlp(x)
        ctrl_off = off[:, :2]
        traj_off = off[:, 2:].reshape(B, self.horizon, 2)
        new_traj = traj + traj_off
        new_ctrl = torch.clamp(ctrl + ctrl_off, -1.0, 1.0)
        return new_traj, new_ctrl, ctrl_off, traj_off


# ---------------------------------------------------------------------------
# stack


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, rig: CameraRig):
        super().__init__()
        self.use_look = cfg.use_look
        self.use_predict = cfg.use_predict
        self.use_tf = cfg.use_tf
        if cfg.use_look:
            self.look = LookModule(cfg.hidden, cfg.img_channels, cfg.lidar_channels, cfg.horizon, cfg.n_points, rig)
        if cfg.use_predict:
            self.predict = PredictionModule(cfg.hidden, cfg.horizon, cfg.action_channels)
        self.refine = RefineStep(cfg.hidden, cfg.horizon)

    def forward(self, enc, prev: DecoderLayerOutput, h_env, h_mst, crops=None, gt=None, targets=None):
        h_look = None
        if self.use_look:
            h_look, h_env = self.look(enc.feats, enc.lidar_bev, prev.traj, h_env, h_mst, crops)
        h_pred, bundle = None, None
        if self.use_predict:
            h_pred, bundle = self.predict(enc.bev, prev.ctrl, prev.traj, gt if self.use_tf else None, targets)
        traj, ctrl, ctrl_off, traj_off = self.refine(prev.traj, prev.ctrl, h_look, h_pred, h_env, h_mst)
        out = DecoderLayerOutput(traj, ctrl, h_look, h_pred, ctrl_off, traj_off, bundle)
        return out, h_env


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, rig: CameraRig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        if cfg.n_layers < 0:
            raise ValueError("decoder layer count must be >= 0")
        self.cfg = cfg
        rig = rig or default_rig(cfg.img_h, cfg.img_w)
        self.coarse = CoarseHead(cfg.hidden, cfg.horizon)
        self.layers = nn.ModuleList(DecoderLayer(cfg, rig) for _ in range(cfg.n_layers))

    def forward(self, enc, crops=None, gt=None, targets=None):
        """List of K + 1 layer outputs; ``gt``/``targets`` only feed the teacher-forced branch."""
        check_shape(enc.h_env, (None, self.cfg.hidden), "H_env")
        traj, ctrl = self.coarse(enc.h_env, enc.h_mst)
        outs = [DecoderLayerOutput(traj, ctrl)]
        h_env = enc.h_env
        for layer in self.layers:
            out, h_env = layer(enc, outs[-1], h_env, enc.h_mst, crops, gt, targets)
            outs.append(out)
        return outs


def decoder_stack(decoder: Decoder, enc, crops=None, gt=None, targets=None):
    return decoder(enc, crops, gt, targets)
