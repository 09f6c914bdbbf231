"""Deterministic 2D closed-loop driving world.

The world is a single route lane (plus an opposite lane and cross streets at
intersections), a handful of scripted agents and fixed-phase traffic lights.
``reset`` and ``step`` are pure: they return fresh ``WorldState`` values and
never mutate their inputs.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .config import SimConfig
from .geometry import (
    Polyline,
    Pose2D,
    box_corners,
    disc_box_overlap,
    polygons_overlap,
    segments_intersect,
    wrap_angle,
)

COMMANDS = ("follow", "left", "right", "straight", "change-left", "change-right")
INFRACTION_KINDS = (
    "collision-pedestrian",
    "collision-vehicle",
    "collision-static",
    "red-light",
    "route-deviation",
    "blocked",
)
AGENT_KINDS = ("vehicle", "pedestrian", "static")
TERMINAL_KINDS = {"collision-pedestrian", "collision-vehicle", "route-deviation", "blocked"}
AGENT_HEIGHT = {"vehicle": 1.5, "pedestrian": 1.8, "static": 1.5}
POLE_RADIUS = 0.25
POLE_HEIGHT = 4.0


class RouteError(ValueError):
    pass


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class Control:
    steer: float = 0.0
    accel: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", float(np.clip(self.steer, -1.0, 1.0)))
        object.__setattr__(self, "accel", float(np.clip(self.accel, -1.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.accel])


@dataclass(frozen=True)
class EgoState:
    pose: Pose2D
    speed: float = 0.0
    wheelbase: float = 2.7


@dataclass(frozen=True)
class RouteSpec:
    waypoints: tuple
    commands: tuple

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        object.__setattr__(self, "commands", tuple(self.commands))

    def validate(self) -> None:
        if len(self.waypoints) < 2:
            raise RouteError(f"route needs at least 2 waypoints, got {len(self.waypoints)}")
        if len(self.commands) != len(self.waypoints) - 1:
            raise RouteError(
                f"route has {len(self.waypoints) - 1} segments but {len(self.commands)} commands"
            )
        bad = [c for c in self.commands if c not in COMMANDS]
        if bad:
            raise RouteError(f"unknown route commands: {sorted(set(bad))}")
        if self.total_length <= 0:
            raise RouteError("route has zero length")

    @cached_property
    def polyline(self) -> Polyline:
        return Polyline([[w.x, w.y] for w in self.waypoints])

    @property
    def total_length(self) -> float:
        pts = np.array([[w.x, w.y] for w in self.waypoints])
        return float(np.hypot(*np.diff(pts, axis=0).T).sum()) if len(pts) > 1 else 0.0

    def command_at(self, s: float) -> str:
        line = self.polyline
        k = int(np.clip(np.searchsorted(line.cum, s, side="right") - 1, 0, len(self.commands) - 1))
        return self.commands[k]


@dataclass(frozen=True)
class Agent:
    id: int
    pose: Pose2D
    speed: float
    length: float
    width: float
    kind: str
    # scripted behaviour
    s: float = 0.0
    target_speed: float = 0.0
    brake_start: float = math.inf
    brake_hold: float = 3.0
    trigger_s: float = math.inf
    walk_heading: float = 0.0
    walk_left: float = 0.0
    s_walk_total: float = 0.0
    active: bool = False

    @property
    def radius(self) -> float:
        return self.width / 2


@dataclass(frozen=True)
class TrafficLight:
    id: int
    s: float  # stop line position along the route
    pole: tuple
    stop_line: tuple  # ((x1, y1), (x2, y2))
    offset: float
    green_time: float
    red_time: float
    state: str = "green"

    def state_at(self, t: float) -> str:
        cycle = self.green_time + self.red_time
        phase = (t + self.offset) % cycle
        return "green" if phase < self.green_time else "red"


@dataclass(frozen=True)
class InfractionEvent:
    kind: str
    time: float

    def __post_init__(self):
        if self.kind not in INFRACTION_KINDS:
            raise ValueError(f"unknown infraction kind {self.kind!r}")


@dataclass
class Lane:
    line: Polyline
    half_width: float
    kind: str = "lane"


@dataclass
class WorldMap:
    lanes: list

    def drivable(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out = np.zeros(len(pts), dtype=bool)
        for lane in self.lanes:
            out |= lane.line.distance(pts) <= lane.half_width
        return out


@dataclass(frozen=True)
class WorldState:
    time: float
    ego: EgoState
    agents: tuple
    lights: tuple
    route: RouteSpec
    route_progress: float
    rng_state: dict
    world_map: WorldMap = field(compare=False, repr=False)
    last_ctrl: Control = Control()
    blocked_time: float = 0.0
    overlaps: frozenset = frozenset()
    prev_agents: tuple = ()
    done: bool = False
    terminal_reason: str = ""
    step_index: int = 0

    def to_dict(self) -> dict:
        d = {
            "time": self.time,
            "ego": dataclasses.asdict(self.ego),
            "agents": [dataclasses.asdict(a) for a in self.agents],
            "lights": [dataclasses.asdict(l) for l in self.lights],
            "route": {
                "waypoints": [dataclasses.asdict(w) for w in self.route.waypoints],
                "commands": list(self.route.commands),
            },
            "route_progress": self.route_progress,
            "rng_state": self.rng_state,
            "last_ctrl": dataclasses.asdict(self.last_ctrl),
            "blocked_time": self.blocked_time,
            "overlaps": sorted(self.overlaps),
            "prev_agents": [dataclasses.asdict(a) for a in self.prev_agents],
            "done": self.done,
            "terminal_reason": self.terminal_reason,
            "step_index": self.step_index,
        }
        return d

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, default=_json_default).encode()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    raise TypeError(type(obj))


# ---------------------------------------------------------------------------
# routes and maps


def make_route(seed: int, cfg: SimConfig | None = None, spacing: float = 5.0) -> RouteSpec:
    """Procedural route: straight stretches joined by intersections (turns or crossings)."""
    cfg = cfg or SimConfig()
    rng = np.random.default_rng(_seed64(seed) ^ 0x5EED)
    target = rng.uniform(cfg.route_min_length, cfg.route_max_length)
    x, y, yaw = 0.0, 0.0, 0.0
    pts = [(x, y, yaw)]
    cmds = []
    length = 0.0

    def straight(dist, cmd):
        nonlocal x, y, length
        n = max(1, int(math.ceil(dist / spacing)))
        for _ in range(n):
            step = dist / n
            x += step * math.cos(yaw)
            y += step * math.sin(yaw)
            pts.append((x, y, yaw))
            cmds.append(cmd)
            length += step

    def turn(direction, radius=12.0):
        nonlocal x, y, yaw, length
        sign = 1.0 if direction == "right" else -1.0
        n = 5
        cx = x - sign * radius * math.sin(yaw)
        cy = y + sign * radius * math.cos(yaw)
        for k in range(1, n + 1):
            ang = yaw + sign * (math.pi / 2) * k / n
            px = cx + sign * radius * math.sin(ang)
            py = cy - sign * radius * math.cos(ang)
            pts.append((px, py, ang))
            cmds.append(direction)
        length += radius * math.pi / 2
        x, y = pts[-1][0], pts[-1][1]
        yaw = float(wrap_angle(yaw + sign * math.pi / 2))

    straight(rng.uniform(30, 50), "follow")
    while length < target:
        kind = str(rng.choice(["left", "right", "straight"]))
        if kind == "straight":
            straight(12.0, "straight")
        else:
            turn(kind)
        straight(rng.uniform(25, 45), "follow")
    return RouteSpec(tuple(Pose2D(px, py, pyaw) for px, py, pyaw in pts), tuple(cmds))


def straight_route(length: float = 100.0, spacing: float = 5.0) -> RouteSpec:
    n = max(1, int(math.ceil(length / spacing)))
    wps = tuple(Pose2D(length * k / n, 0.0, 0.0) for k in range(n + 1))
    return RouteSpec(wps, ("follow",) * n)


def intersections(route: RouteSpec) -> list:
    """(waypoint index, kind) at every entry into a turn or crossing segment."""
    out = []
    prev = "follow"
    for k, c in enumerate(route.commands):
        if c in ("left", "right", "straight") and c != prev:
            out.append((k, c))
        prev = c
    return out


def build_map(route: RouteSpec, cfg: SimConfig | None = None) -> WorldMap:
    cfg = cfg or SimConfig()
    line = route.polyline
    lanes = [
        Lane(line, cfg.lane_half_width, "route"),
        Lane(line.offset(-2 * cfg.lane_half_width), cfg.lane_half_width, "opposite"),
    ]
    for k, kind in intersections(route):
        wp = route.waypoints[k]
        fwd = np.array([math.cos(wp.yaw), math.sin(wp.yaw)])
        right = np.array([-math.sin(wp.yaw), math.cos(wp.yaw)])
        center = np.array([wp.x, wp.y]) + (12.0 if kind != "straight" else 6.0) * fwd
        lanes.append(Lane(Polyline([center - 25 * right, center + 25 * right]), 2 * cfg.lane_half_width, "cross"))
    return WorldMap(lanes)


def read_route_file(path) -> RouteSpec:
    """Waypoint file: one ``x y yaw [command]`` per line, '#' starts a comment.

    The optional command names the segment that starts at that waypoint.
    """
    wps, cmds = [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        wps.append(Pose2D(float(tok[0]), float(tok[1]), float(tok[2])))
        cmds.append(tok[3] if len(tok) > 3 else "follow")
    route = RouteSpec(tuple(wps), tuple(cmds[:-1]))
    route.validate()
    return route


def write_route_file(route: RouteSpec, path) -> None:
    lines = ["# x y yaw [command of the segment starting here]"]
    for k, w in enumerate(route.waypoints):
        cmd = route.commands[k] if k < len(route.commands) else ""
        lines.append(f"{float(w.x)!r} {float(w.y)!r} {float(w.yaw)!r} {cmd}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def read_map_file(path) -> WorldMap:
    """Lane file: ``lane <half_width> [kind]`` header then ``x y yaw`` lines."""
    lanes, pts, hw, kind = [], [], None, "lane"
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "lane":
            if pts:
                lanes.append(Lane(Polyline(pts), hw, kind))
            pts, hw = [], float(tok[1])
            kind = tok[2] if len(tok) > 2 else "lane"
        else:
            if hw is None:
                raise ValueError(f"{path}: point before any 'lane' header")
            pts.append((float(tok[0]), float(tok[1])))
    if pts:
        lanes.append(Lane(Polyline(pts), hw, kind))
    return WorldMap(lanes)


def write_map_file(world_map: WorldMap, path) -> None:
    lines = ["# lane <half_width> <kind>, then one 'x y yaw' per line"]
    for lane in world_map.lanes:
        lines.append(f"lane {float(lane.half_width)!r} {lane.kind}")
        pts = lane.line.points
        for k, p in enumerate(pts):
            d = pts[min(k + 1, len(pts) - 1)] - pts[max(k - 1, 0)]
            lines.append(f"{float(p[0])!r} {float(p[1])!r} {math.atan2(d[1], d[0])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# dynamics


def kinematic_update(ego: EgoState, ctrl: Control, dt: float, cfg: SimConfig | None = None) -> EgoState:
    """Kinematic bicycle step with zero-order-hold control.

    Position is integrated exactly along the arc driven at the pre-step speed and
    yaw rate, so a held steering input traces a true circle.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or SimConfig()
    v = ego.speed
    p = ego.pose
    omega = v / ego.wheelbase * math.tan(cfg.delta_max * ctrl.steer)
    if abs(omega) * dt < 1e-9:
        x = p.x + v * math.cos(p.yaw) * dt
        y = p.y + v * math.sin(p.yaw) * dt
    else:
        r = v / omega
        x = p.x + r * (math.sin(p.yaw + omega * dt) - math.sin(p.yaw))
        y = p.y - r * (math.cos(p.yaw + omega * dt) - math.cos(p.yaw))
    yaw = p.yaw + omega * dt
    speed = min(max(v + cfg.a_max * ctrl.accel * dt, 0.0), cfg.v_max)
    return EgoState(Pose2D(x, y, yaw), speed, ego.wheelbase)


def _seed64(seed: int) -> int:
    return int(seed) % (1 << 64)


def reset(seed: int, route: RouteSpec, scenario_mix: SimConfig | None = None, world_map: WorldMap | None = None) -> WorldState:
    """Start an episode: ego at the first waypoint, scripted agents from ``seed``."""
    cfg = scenario_mix or SimConfig()
    route.validate()
    rng = np.random.default_rng(_seed64(seed))
    line = route.polyline
    L = line.length
    world_map = world_map or build_map(route, cfg)
    agents = []
    next_id = 1

    def pose_at(s, lateral=0.0):
        pt = line.point_at(s)
        h = line.heading_at(s)
        return Pose2D(float(pt[0] - lateral * math.sin(h)), float(pt[1] + lateral * math.cos(h)), h)

    if L > 40 and rng.uniform() < cfg.lead_vehicle_prob:
        s0 = rng.uniform(18.0, 30.0)
        n_brakes = rng.poisson(cfg.sudden_brake_rate * L / 100.0)
        brake = float(np.min(rng.uniform(5.0, 40.0, size=n_brakes))) if n_brakes else math.inf
        agents.append(
            Agent(next_id, pose_at(s0), 0.0, 4.5, 2.0, "vehicle", s=s0,
                  target_speed=float(rng.uniform(5.0, 7.0)), brake_start=brake)
        )
        next_id += 1
    for _ in range(rng.poisson(cfg.jaywalker_rate * L / 100.0)):
        s = rng.uniform(30.0, max(L - 10.0, 31.0))
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        lateral = 6.0 if side > 0 else -10.0
        p = pose_at(s, lateral)
        agents.append(
            Agent(next_id, Pose2D(p.x, p.y, p.yaw - side * math.pi / 2), 0.0, 0.6, 0.6, "pedestrian", s=s,
                  target_speed=float(rng.uniform(1.2, 1.8)), trigger_s=s - float(rng.uniform(18.0, 28.0)),
                  walk_heading=float(wrap_angle(p.yaw - side * math.pi / 2)), walk_left=abs(lateral) + 8.0,
                  s_walk_total=abs(lateral) + 8.0)
        )
        next_id += 1
    for _ in range(rng.poisson(cfg.parked_rate * L / 100.0)):
        s = rng.uniform(20.0, max(L - 5.0, 21.0))
        agents.append(Agent(next_id, pose_at(s, 6.5), 0.0, 4.5, 2.0, "static", s=s))
        next_id += 1
    lights = []
    for k, _kind in intersections(route):
        if rng.uniform() >= cfg.light_prob:
            continue
        s_int = float(line.cum[k])
        s_stop = max(s_int - 2.0, 1.0)
        left, right = pose_at(s_stop, -cfg.lane_half_width), pose_at(s_stop, cfg.lane_half_width)
        pole = pose_at(s_stop, cfg.lane_half_width + 1.0)
        offset = float(rng.uniform(0.0, cfg.green_time + cfg.red_time))
        light = TrafficLight(len(lights), s_stop, (float(pole.x), float(pole.y)),
                             ((float(left.x), float(left.y)), (float(right.x), float(right.y))),
                             offset, cfg.green_time, cfg.red_time)
        lights.append(dataclasses.replace(light, state=light.state_at(0.0)))
    start = route.waypoints[0]
    ego = EgoState(Pose2D(start.x, start.y, start.yaw), 0.0, cfg.wheelbase)
    state = WorldState(
        time=0.0,
        ego=ego,
        agents=tuple(agents),
        lights=tuple(lights),
        route=route,
        route_progress=0.0,
        rng_state=_rng_state(rng),
        world_map=world_map,
        prev_agents=tuple(agents),
    )
    return state


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": int(st["state"]["state"]), "inc": int(st["state"]["inc"])}


def ego_corners(ego: EgoState, cfg: SimConfig) -> np.ndarray:
    return box_corners(ego.pose, cfg.ego_length, cfg.ego_width)


def agent_overlaps_ego(agent: Agent, ego: EgoState, cfg: SimConfig) -> bool:
    if agent.kind == "pedestrian":
        return disc_box_overlap((agent.pose.x, agent.pose.y), agent.radius, ego.pose, cfg.ego_length, cfg.ego_width)
    return polygons_overlap(ego_corners(ego, cfg), box_corners(agent.pose, agent.length, agent.width))


def _advance_vehicle(a: Agent, state: WorldState, cfg: SimConfig, t: float) -> Agent | None:
    line = state.route.polyline
    dt = cfg.dt
    gaps = []
    if state.route_progress > a.s:
        gaps.append(state.route_progress - a.s - 4.5)
    for other in state.agents:
        if other.kind == "vehicle" and other.id != a.id and other.s > a.s:
            gaps.append(other.s - a.s - 4.5)
    for light in state.lights:
        if light.state == "red" and light.s > a.s + 2.25:
            gaps.append(light.s - a.s - 2.25)
    if a.brake_start <= t < a.brake_start + a.brake_hold + a.target_speed / 6.0:
        acc = -6.0
    else:
        acc = 2.0 * (1.0 - (a.speed / max(a.target_speed, 0.1)) ** 4)
        if gaps:
            gap = max(min(gaps), 0.1)
            s_star = 2.0 + a.speed * 1.5
            acc -= 2.0 * (s_star / gap) ** 2
        acc = max(acc, -6.0)
    speed = min(max(a.speed + acc * dt, 0.0), cfg.v_max)
    s = a.s + a.speed * dt
    if s > line.length - 5.0:
        return None
    pt = line.point_at(s)
    return dataclasses.replace(a, pose=Pose2D(float(pt[0]), float(pt[1]), line.heading_at(s)), speed=speed, s=s)


def _advance_pedestrian(a: Agent, state: WorldState, cfg: SimConfig) -> Agent:
    active = a.active or state.route_progress >= a.trigger_s
    if not active or a.walk_left <= 0:
        return dataclasses.replace(a, active=active, speed=0.0)
    d = min(a.target_speed * cfg.dt, a.walk_left)
    p = a.pose
    pose = Pose2D(p.x + d * math.cos(a.walk_heading), p.y + d * math.sin(a.walk_heading), a.walk_heading)
    if disc_box_overlap((pose.x, pose.y), a.radius + 0.5, state.ego.pose, cfg.ego_length, cfg.ego_width):
        # blocked by the ego: turn back toward the curb instead of walking into it
        walked = a.s_walk_total - a.walk_left
        return dataclasses.replace(a, active=True, speed=0.0, walk_heading=float(wrap_angle(a.walk_heading + math.pi)),
                                   walk_left=walked, s_walk_total=walked)
    return dataclasses.replace(a, pose=pose, speed=a.target_speed, walk_left=a.walk_left - d, active=True)


def step(state: WorldState, ctrl: Control, cfg: SimConfig | None = None):
    """Advance one tick. Returns ``(state, reward, infractions, done)``."""
    cfg = cfg or SimConfig()
    if state.done:
        raise EpisodeDone("cannot step a finished episode")
    ego = kinematic_update(state.ego, ctrl, cfg.dt, cfg)
    t_new = state.time + cfg.dt

    agents = []
    for a in state.agents:
        if a.kind == "vehicle":
            nxt = _advance_vehicle(a, state, cfg, state.time)
            if nxt is not None:
                agents.append(nxt)
        elif a.kind == "pedestrian":
            agents.append(_advance_pedestrian(a, state, cfg))
        else:
            agents.append(a)
    lights = tuple(dataclasses.replace(l, state=l.state_at(t_new)) for l in state.lights)

    # progress: projection onto the route, capped by the distance actually driven
    line = state.route.polyline
    disp = math.hypot(ego.pose.x - state.ego.pose.x, ego.pose.y - state.ego.pose.y)
    prev = state.route_progress
    s_proj, dist = line.project((ego.pose.x, ego.pose.y), prev - 2.0, prev + disp + 2.0)
    progress = min(max(prev, s_proj), prev + disp, line.length)

    events = []
    overlaps = set()
    for a in agents:
        if agent_overlaps_ego(a, ego, cfg):
            overlaps.add(a.id)
            if a.id not in state.overlaps:
                events.append(InfractionEvent(f"collision-{a.kind}", t_new))
    half = cfg.ego_length / 2
    front_prev = state.ego.pose.to_parent(np.array([half, 0.0]))
    front_new = ego.pose.to_parent(np.array([half, 0.0]))
    for light in state.lights:
        if light.state == "red" and segments_intersect(front_prev, front_new, *light.stop_line):
            events.append(InfractionEvent("red-light", t_new))
    if dist > cfg.deviation_distance:
        events.append(InfractionEvent("route-deviation", t_new))
    blocked_time = state.blocked_time + cfg.dt if ego.speed < cfg.blocked_speed else 0.0
    if blocked_time > cfg.blocked_timeout - 1e-9:
        events.append(InfractionEvent("blocked", t_new))

    penalty = 0.0
    for e in events:
        if e.kind.startswith("collision"):
            penalty += cfg.penalty_collision
        elif e.kind in ("red-light", "route-deviation"):
            penalty += cfg.penalty_red_light
    reward = cfg.reward_progress * (progress - prev) - penalty - cfg.reward_jerk * abs(ctrl.steer - state.last_ctrl.steer)

    reason = ""
    if progress >= line.length - 0.5:
        reason = "completed"
    for e in events:
        if e.kind in TERMINAL_KINDS:
            reason = e.kind
            break
    new_state = dataclasses.replace(
        state,
        time=t_new,
        ego=ego,
        agents=tuple(agents),
        lights=lights,
        route_progress=progress,
        last_ctrl=ctrl,
        blocked_time=blocked_time,
        overlaps=frozenset(overlaps),
        prev_agents=state.agents,
        done=bool(reason),
        terminal_reason=reason,
        step_index=state.step_index + 1,
    )
    return new_state, float(reward), events, bool(reason)
