"""Privileged teacher: a rule-based expert for driving and a small raster network
whose mid-level BEV map, value and action outputs serve as distillation targets."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import container
from .config import Config, SimConfig
from .geometry import Pose2D, box_corners, polygons_overlap
from .sensors import RASTER_CHANNELS, raster_privileged_bev
from .simulator import COMMANDS, Control, WorldState, kinematic_update, make_route, reset, step

log = logging.getLogger(__name__)

GAMMA = 0.99
VALUE_SCALE = 100.0
MEAS_DIM = 3 + len(COMMANDS)
TEACHER_VERSION = "teacher-1"

CONE_HALF_ANGLE = math.radians(15.0)
IDM_MIN_GAP = 4.0
IDM_HEADWAY = 1.8
IDM_COMFORT_BRAKE = 3.0


# ---------------------------------------------------------------------------
# scripted expert


def forward_cone(state: WorldState, cfg: SimConfig) -> np.ndarray:
    """Emergency-stop cone in world coordinates: apex at the front bumper."""
    ego = state.ego.pose
    length = state.ego.speed * 1.5 + 3.0
    half = length * math.tan(CONE_HALF_ANGLE)
    x0 = cfg.ego_length / 2
    local = np.array([[x0, 0.0], [x0 + length, -half], [x0 + length, half]])
    return ego.to_parent(local)


def _octagon(center, radius):
    ang = np.arange(8) * (np.pi / 4) + np.pi / 8
    r = radius / math.cos(np.pi / 8)
    return np.asarray(center, dtype=float) + r * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def cone_blocked(state: WorldState, cfg: SimConfig) -> bool:
    cone = forward_cone(state, cfg)
    for a in state.agents:
        poly = _octagon((a.pose.x, a.pose.y), a.radius) if a.kind == "pedestrian" else box_corners(a.pose, a.length, a.width)
        if polygons_overlap(cone, poly):
            return True
    return False


def _obstacle_gaps(state: WorldState, cfg: SimConfig, reckless: bool = False):
    """(gap, obstacle speed) pairs for everything the expert should queue behind."""
    line = state.route.polyline
    s0 = state.route_progress
    v = state.ego.speed
    half = cfg.ego_length / 2
    out = []
    for a in state.agents:
        s_a, lat = line.project((a.pose.x, a.pose.y), s0 - 5.0, s0 + 60.0)
        if s_a <= s0:
            continue
        if a.kind == "pedestrian":
            if reckless:
                continue
            # sweep the next 3 s of the walk, not just its end point
            lat_min = lat
            for tau in (0.5, 1.0, 1.5, 2.0, 2.5, 3.0):
                d = min(a.speed * tau, a.walk_left)
                fut = (a.pose.x + d * math.cos(a.walk_heading), a.pose.y + d * math.sin(a.walk_heading))
                lat_min = min(lat_min, line.project(fut, s0 - 5.0, s0 + 60.0)[1])
            if lat_min < 2.0:
                out.append((s_a - s0 - half - 1.3, 0.0))
        elif lat < 2.2:
            out.append((s_a - s0 - half - a.length / 2, a.speed if a.kind == "vehicle" else 0.0))
    if not reckless:
        for light in state.lights:
            gap = light.s - s0 - half
            if gap < -0.5:
                continue
            if light.state == "red":
                stop = True
            else:
                cycle = light.green_time + light.red_time
                remaining = light.green_time - (state.time + light.offset) % cycle
                t_reach = (gap + cfg.ego_length) / max(v, 1.0)
                stop = t_reach >= remaining and gap >= v * v / (2 * 2.5)
            if stop and gap >= v * v / (2 * cfg.a_max) - 1.0:
                out.append((max(gap, 0.0), 0.0))
    return out


def expert_control(state: WorldState, cfg: SimConfig | None = None, reckless: bool = False) -> Control:
    """Pure-pursuit steering plus IDM-style longitudinal control and an emergency cone."""
    cfg = cfg or SimConfig()
    ego = state.ego
    line = state.route.polyline
    s0 = state.route_progress
    v = ego.speed
    look = float(np.clip(0.8 * v + 4.0, 4.0, 12.0))
    tgt = ego.pose.to_local(line.point_at(min(s0 + look, line.length)))
    dist = max(float(np.hypot(*tgt)), 1e-3)
    alpha = math.atan2(tgt[1], tgt[0])
    delta = math.atan(2.0 * ego.wheelbase * math.sin(alpha) / dist)
    steer = delta / cfg.delta_max

    turning = any(state.route.command_at(s0 + d) in ("left", "right") for d in (0.0, 5.0, 10.0, 15.0, 20.0))
    v0 = 5.0 if turning else 8.0
    acc = cfg.a_max * (1.0 - (v / v0) ** 4)
    gaps = _obstacle_gaps(state, cfg, reckless)
    if gaps:
        gap, v_obs = min(gaps, key=lambda g: g[0])
        s_star = IDM_MIN_GAP + v * IDM_HEADWAY + v * (v - v_obs) / (2 * math.sqrt(cfg.a_max * IDM_COMFORT_BRAKE))
        acc -= cfg.a_max * (max(s_star, 0.0) / max(gap, 0.1)) ** 2
    accel = acc / cfg.a_max
    if not reckless and cone_blocked(state, cfg):
        accel = -1.0
    return Control(steer, accel)


def scripted_expert_act(state: WorldState, cfg: SimConfig | None = None, horizon: int = 4, reckless: bool = False):
    """Expert control now plus the ego-frame positions of the next ``horizon`` steps under the expert."""
    cfg = cfg or SimConfig()
    ctrl = expert_control(state, cfg, reckless)
    traj = np.zeros((horizon, 2))
    s, c = state, ctrl
    ego = state.ego
    for t in range(horizon):
        if not s.done:
            s, _, _, _ = step(s, c, cfg)
            ego = s.ego
            if not s.done:
                c = expert_control(s, cfg, reckless)
        else:
            ego = kinematic_update(ego, c, cfg.dt, cfg)
        traj[t] = state.ego.pose.to_local(np.array([ego.pose.x, ego.pose.y]))
    return ctrl, traj


def discounted_returns(rewards, gamma: float = GAMMA) -> np.ndarray:
    """value_t = r_t + gamma * value_{t+1}, with zero beyond the last recorded step."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        acc = rewards[k] + gamma * acc
        out[k] = acc
    return out


def measurement_vector(speed: float, target_point, command) -> np.ndarray:
    return np.concatenate([[speed / 10.0], np.asarray(target_point, dtype=np.float64) / 20.0, np.asarray(command, dtype=np.float64)]).astype(np.float32)


def state_measurements(state: WorldState) -> np.ndarray:
    line = state.route.polyline
    target = state.ego.pose.to_local(line.point_at(min(state.route_progress + 20.0, line.length)))
    cmd = np.zeros(len(COMMANDS))
    cmd[COMMANDS.index(state.route.command_at(state.route_progress + 10.0))] = 1.0
    return measurement_vector(state.ego.speed, target, cmd)


# ---------------------------------------------------------------------------
# privileged network


class TeacherNet(nn.Module):
    def __init__(self, channels: int = 64, flat_dim: int = 256, in_channels: int = len(RASTER_CHANNELS)):
        super().__init__()
        self.channels = channels
        self.block1 = nn.Sequential(nn.Conv2d(in_channels, 32, 3, padding=1), nn.SiLU(), nn.Conv2d(32, 32, 3, padding=1), nn.SiLU())
        self.block2 = nn.Sequential(nn.Conv2d(32, channels, 3, padding=1), nn.SiLU(), nn.Conv2d(channels, channels, 3, padding=1))
        self.pool = nn.AdaptiveAvgPool2d(5)
        self.flat = nn.Sequential(nn.Linear(channels * 25, flat_dim), nn.SiLU())
        self.meas = nn.Sequential(nn.Linear(MEAS_DIM, 64), nn.SiLU())
        self.control_head = nn.Sequential(nn.Linear(flat_dim + 64, 128), nn.SiLU(), nn.Linear(128, 2))
        self.value_head = nn.Sequential(nn.Linear(flat_dim + 64, 128), nn.SiLU(), nn.Linear(128, 1))
        self.speed_head = nn.Linear(flat_dim + 64, 1)

    def forward(self, raster, meas):
        bev = self.block2(self.block1(raster))
        flat = self.flat(self.pool(F.silu(bev)).flatten(1))
        h = torch.cat([flat, self.meas(meas)], dim=1)
        return {
            "bev_feature": bev,
            "flat_feature": flat,
            "control": torch.tanh(self.control_head(h)),
            "value": self.value_head(h).squeeze(1) * VALUE_SCALE,
            "speed": self.speed_head(h).squeeze(1) * 10.0,
        }


@dataclass
class TeacherParams:
    net: TeacherNet
    channels: int
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.net.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        meta = {"version": TEACHER_VERSION, "channels": self.channels, "metrics": self.metrics, "config_hash": self.config_hash}
        container.save(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "TeacherParams":
        arrays, meta = container.load(path)
        if meta.get("version") != TEACHER_VERSION:
            raise container.ContainerError(f"expected a {TEACHER_VERSION} checkpoint, got {meta.get('version')!r}")
        net = TeacherNet(meta["channels"])
        net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return cls(net, meta["channels"], meta.get("metrics", {}), meta.get("config_hash", ""))


@dataclass
class TeacherOutput:
    bev_feature: np.ndarray
    flat_feature: np.ndarray
    control: Control
    value: float
    speed_pred: float


def teacher_features(params: TeacherParams, raster, meas=None) -> TeacherOutput:
    """Deterministic teacher forward pass on one privileged raster."""
    data = raster.data if hasattr(raster, "data") else raster
    x = torch.as_tensor(np.asarray(data), dtype=torch.float32)[None]
    m = torch.zeros(1, MEAS_DIM) if meas is None else torch.as_tensor(np.asarray(meas), dtype=torch.float32)[None]
    params.net.eval()
    with torch.no_grad():
        out = params.net(x, m)
    ctrl = out["control"][0].numpy()
    return TeacherOutput(
        bev_feature=out["bev_feature"][0].numpy(),
        flat_feature=out["flat_feature"][0].numpy(),
        control=Control(float(ctrl[0]), float(ctrl[1])),
        value=float(out["value"][0]),
        speed_pred=float(out["speed"][0]),
    )


def teacher_batch(params: TeacherParams, rasters: np.ndarray, meas: np.ndarray) -> dict:
    with torch.no_grad():
        out = params.net(torch.as_tensor(rasters, dtype=torch.float32), torch.as_tensor(meas, dtype=torch.float32))
    return {k: v.numpy() for k, v in out.items()}


# ---------------------------------------------------------------------------
# privileged data and training


def collect_privileged(n_frames: int, seed: int = 0, cfg: SimConfig | None = None, reckless_every: int = 4, max_steps: int = 400) -> dict:
    """Run the expert (every ``reckless_every``-th episode ignoring hazards) and record
    rasters, measurements, expert actions, speeds and discounted returns."""
    cfg = cfg or SimConfig()
    rasters, meas, ctrls, speeds, values, episode = [], [], [], [], [], []
    ep = 0
    while len(rasters) < n_frames:
        route = make_route(seed * 7919 + ep, cfg)
        state = reset(seed * 7919 + ep, route, cfg)
        reckless = reckless_every > 0 and ep % reckless_every == reckless_every - 1
        rewards = []
        for _ in range(max_steps):
            ctrl = expert_control(state, cfg, reckless)
            rasters.append(raster_privileged_bev(state, cfg).data)
            meas.append(state_measurements(state))
            # the label is always the careful expert's action
            ctrls.append((expert_control(state, cfg) if reckless else ctrl).as_array())
            speeds.append(state.ego.speed)
            episode.append(ep)
            state, r, _, done = step(state, ctrl, cfg)
            rewards.append(r)
            if done:
                break
        values.extend(discounted_returns(rewards))
        ep += 1
    n = n_frames
    return {
        "raster": np.stack(rasters[:n]).astype(np.float32),
        "meas": np.stack(meas[:n]).astype(np.float32),
        "control": np.stack(ctrls[:n]).astype(np.float32),
        "speed": np.asarray(speeds[:n], dtype=np.float32),
        "value": np.asarray(values[:n], dtype=np.float32),
        "episode": np.asarray(episode[:n], dtype=np.int64),
    }


class TeacherTrainingError(RuntimeError):
    pass


def _split(episode: np.ndarray, val_fraction: float):
    eps = np.unique(episode)
    n_val = max(1, int(round(len(eps) * val_fraction))) if len(eps) > 1 else 0
    val_eps = set(eps[len(eps) - n_val :].tolist())
    is_val = np.array([e in val_eps for e in episode])
    return np.nonzero(~is_val)[0], np.nonzero(is_val)[0]


def train_teacher(dataset: dict, config: Config | None = None, epochs: int | None = None, lr: float | None = None,
                  threshold: float | None = None, seed: int = 0, batch_size: int = 64) -> TeacherParams:
    """Behaviour cloning of the expert plus value and speed regression."""
    config = config or Config()
    if dataset is None or len(dataset.get("raster", ())) == 0:
        raise ValueError("teacher dataset is empty")
    epochs = epochs if epochs is not None else config.data.teacher_epochs
    lr = lr if lr is not None else config.data.teacher_lr
    threshold = threshold if threshold is not None else config.data.teacher_threshold
    torch.manual_seed(seed)
    net = TeacherNet(config.model.teacher_channels)
    tr, va = _split(dataset["episode"], config.train.val_fraction)
    if len(va) == 0:
        va = tr
    tensors = {k: torch.as_tensor(v) for k, v in dataset.items()}
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)

    def losses(idx):
        out = net(tensors["raster"][idx], tensors["meas"][idx])
        return {
            "control": F.smooth_l1_loss(out["control"], tensors["control"][idx]),
            "value": F.smooth_l1_loss(out["value"] / VALUE_SCALE, tensors["value"][idx] / VALUE_SCALE),
            "speed": F.smooth_l1_loss(out["speed"], tensors["speed"][idx]),
        }

    def evaluate(idx):
        net.eval()
        with torch.no_grad():
            ls = losses(torch.as_tensor(idx))
            out = net(tensors["raster"][idx], tensors["meas"][idx])
            steer_err = (out["control"][:, 0] - tensors["control"][idx][:, 0]).abs().mean()
            value_mae = (out["value"] - tensors["value"][idx]).abs().mean()
        net.train()
        return {**{k: float(v) for k, v in ls.items()}, "steer_mae": float(steer_err), "value_mae": float(value_mae)}

    curve = [sum(evaluate(tr).get(k) for k in ("control", "value", "speed"))]
    tr_t = torch.as_tensor(tr)
    for epoch in range(epochs):
        perm = tr_t[torch.randperm(len(tr_t), generator=gen)]
        for b in range(0, len(perm), batch_size):
            ls = losses(perm[b : b + batch_size])
            total = ls["control"] + ls["value"] + ls["speed"]
            opt.zero_grad()
            total.backward()
            opt.step()
        ev = evaluate(tr)
        curve.append(ev["control"] + ev["value"] + ev["speed"])
        log.info("teacher epoch %d train loss %.4f", epoch, curve[-1])
    val = evaluate(va)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    metrics = {"curve": curve, "val": val}
    if val["control"] >= threshold:
        raise TeacherTrainingError(f"teacher validation control loss {val['control']:.4f} >= threshold {threshold}")
    return TeacherParams(net, config.model.teacher_channels, metrics, config.hash())
