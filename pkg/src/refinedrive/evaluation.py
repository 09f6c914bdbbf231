"""Closed-loop rollouts, route metrics, the ablation harness and trajectory plots."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .config import Config
from .geometry import Pose2D, box_corners
from .model import StudentModel, collate_inputs, frame_inputs
from .sensors import render_frame
from .simulator import INFRACTION_KINDS, Control, RouteSpec, make_route, reset, step
from .teacher import scripted_expert_act

log = logging.getLogger(__name__)

# multiplicative penalty per event; route-deviation and blocked end the episode instead
DEFAULT_PENALTIES = {
    "collision-pedestrian": 0.50,
    "collision-vehicle": 0.60,
    "collision-static": 0.65,
    "red-light": 0.70,
    "route-deviation": 1.0,
    "blocked": 1.0,
    "model-failure": 0.0,
}
LOG_VERSION = "episode-log-1"

REFERENCE_DS = {"K0": 59.3, "K1": 61.6, "K5": 65.0}
REFERENCE_NO_PREDICT = {"DS": 61.7, "RC": 96.2, "IS": 0.63}

# variant name -> model overrides
ABLATION_VARIANTS = {
    "K0": {"n_layers": 0},
    "K1": {"n_layers": 1},
    "K5": {"n_layers": 5},
    "K5-no-look": {"n_layers": 5, "use_look": False},
    "K5-no-predict": {"n_layers": 5, "use_predict": False},
    "K5-no-tf": {"n_layers": 5, "use_tf": False},
}
# (better, worse): expected ordering of mean driving score
ABLATION_CLAIMS = (("K1", "K0"), ("K5", "K1"), ("K5", "K0"), ("K5", "K5-no-predict"), ("K5", "K5-no-tf"), ("K5", "K5-no-look"))


class ModelFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# logs


@dataclass
class EpisodeLog:
    """Per-step record of one closed-loop episode."""

    times: list = field(default_factory=list)
    ego: list = field(default_factory=list)  # (x, y, yaw, speed)
    controls: list = field(default_factory=list)  # (steer, accel)
    trajectories: list = field(default_factory=list)  # per step: (L, T, 2) ego-frame, one row per decoder layer
    progress: list = field(default_factory=list)
    agents: list = field(default_factory=list)  # per step: [kind, x, y, yaw, length, width]
    infractions: list = field(default_factory=list)  # (step, kind, time)
    terminal_reason: str = ""
    route_length: float = 0.0
    route: list = field(default_factory=list)  # polyline points
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def final_progress(self) -> float:
        return float(self.progress[-1]) if self.progress else 0.0

    def validate(self, dt: float) -> None:
        t = np.asarray(self.times)
        if len(t) > 1 and not np.allclose(np.diff(t), dt, atol=1e-9):
            raise ValueError("episode timestamps must advance by dt")
        for _, kind, _ in self.infractions:
            if kind not in INFRACTION_KINDS and kind != "model-failure":
                raise ValueError(f"unknown infraction kind {kind!r}")

    def to_bytes(self) -> bytes:
        n = len(self.times)
        L = max((len(tr) for tr in self.trajectories), default=0)
        T = max((np.shape(tr)[1] for tr in self.trajectories if len(tr)), default=0)
        trajs = np.full((n, L, T, 2), np.nan)
        for k, tr in enumerate(self.trajectories):
            if len(tr):
                trajs[k, : len(tr)] = tr
        arrays = {
            "times": np.asarray(self.times, dtype=np.float64).reshape(n),
            "ego": np.asarray(self.ego, dtype=np.float64).reshape(n, 4),
            "controls": np.asarray(self.controls, dtype=np.float64).reshape(n, 2),
            "trajectories": trajs,
            "progress": np.asarray(self.progress, dtype=np.float64).reshape(n),
            "route": np.asarray(self.route, dtype=np.float64).reshape(-1, 2),
        }
        meta = {
            "version": LOG_VERSION,
            "agents": self.agents,
            "infractions": [list(i) for i in self.infractions],
            "terminal_reason": self.terminal_reason,
            "route_length": self.route_length,
            "meta": self.meta,
        }
        return container.dumps(arrays, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EpisodeLog":
        arrays, meta = container.loads(data)
        if meta.get("version") != LOG_VERSION:
            raise container.ContainerError("not an episode log")
        trajs = []
        for tr in arrays["trajectories"]:
            keep = ~np.isnan(tr).any(axis=(1, 2)) if tr.size else np.zeros(0, dtype=bool)
            trajs.append(tr[keep])
        return cls(
            times=arrays["times"].tolist(),
            ego=arrays["ego"].tolist(),
            controls=arrays["controls"].tolist(),
            trajectories=trajs,
            progress=arrays["progress"].tolist(),
            agents=meta["agents"],
            infractions=[tuple(i) for i in meta["infractions"]],
            terminal_reason=meta["terminal_reason"],
            route_length=meta["route_length"],
            route=arrays["route"].tolist(),
            meta=meta.get("meta", {}),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# agents


class ExpertAgent:
    """The scripted planner wrapped as an agent."""

    def __init__(self, config: Config | None = None):
        self.config = config or Config()

    def reset(self):
        pass

    def act(self, state):
        ctrl, traj = scripted_expert_act(state, self.config.sim, self.config.model.horizon)
        return ctrl, np.asarray(traj)[None]


class ConstantAgent:
    def __init__(self, steer: float = 0.0, accel: float = 0.0):
        self.ctrl = Control(steer, accel)

    def reset(self):
        pass

    def act(self, state):
        return self.ctrl, np.zeros((0, 0, 2))


class StudentAgent:
    """Renders sensors, runs the model without ground truth and drives with the last layer's control."""

    def __init__(self, model: StudentModel):
        self.model = model.eval()
        self.prev = None

    def reset(self):
        self.prev = None

    def act(self, state):
        frame = render_frame(state, self.model.rig, self.model.config.sim)
        batch = collate_inputs([frame_inputs(frame, self.prev)])
        self.prev = frame
        with torch.no_grad():
            out = self.model(batch)
        trajs = torch.stack([o.traj[0] for o in out["layers"]]).numpy().astype(np.float64)
        ctrl = out["layers"][-1].ctrl[0].numpy().astype(np.float64)
        if not (np.isfinite(trajs).all() and np.isfinite(ctrl).all()):
            raise ModelFailure("non-finite model output")
        return Control(float(ctrl[0]), float(ctrl[1])), trajs


def _agent_rows(state) -> list:
    return [[a.kind, float(a.pose.x), float(a.pose.y), float(a.pose.yaw), float(a.length), float(a.width)] for a in state.agents]


def run_episode(agent, route: RouteSpec, seed: int, config: Config | None = None, max_steps: int | None = None) -> EpisodeLog:
    """Closed loop at the simulator rate until the episode ends or ``max_steps`` pass."""
    config = config or Config()
    sim = config.sim
    max_steps = max_steps or config.eval.max_steps
    state = reset(seed, route, sim)
    agent.reset()
    line = route.polyline
    log_ = EpisodeLog(route_length=float(route.total_length), route=line.points.tolist(), meta={"seed": int(seed)})
    for _ in range(max_steps):
        try:
            ctrl, trajs = agent.act(state)
        except ModelFailure:
            log_.infractions.append((len(log_.times), "model-failure", float(state.time)))
            log_.terminal_reason = "model-failure"
            break
        log_.times.append(float(state.time))
        log_.ego.append([state.ego.pose.x, state.ego.pose.y, state.ego.pose.yaw, state.ego.speed])
        log_.controls.append([ctrl.steer, ctrl.accel])
        log_.trajectories.append(np.asarray(trajs, dtype=np.float64))
        log_.agents.append(_agent_rows(state))
        state, _, events, done = step(state, ctrl, sim)
        log_.progress.append(float(state.route_progress))
        for ev in events:
            log_.infractions.append((len(log_.times) - 1, ev.kind, float(ev.time)))
        if done:
            log_.terminal_reason = state.terminal_reason
            break
    else:
        log_.terminal_reason = "timeout"
    return log_


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    rc: list
    is_: list
    ds: list
    counts: dict

    def summary(self) -> dict:
        def ms(v):
            v = np.asarray(v, dtype=np.float64)
            return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

        out = {}
        for name, vals in (("RC", self.rc), ("IS", self.is_), ("DS", self.ds)):
            out[name], out[name + "_std"] = ms(vals)
        out["counts"] = dict(self.counts)
        out["n"] = len(self.ds)
        return out


def route_scores(log_: EpisodeLog, penalties: dict | None = None) -> tuple:
    """(RC, IS, DS) of one episode. IS is the raw product of per-event penalties."""
    penalties = DEFAULT_PENALTIES if penalties is None else {**DEFAULT_PENALTIES, **penalties}
    rc = float(np.clip(log_.final_progress() / log_.route_length, 0.0, 1.0)) if log_.route_length > 0 else 0.0
    score = 1.0
    for _, kind, _ in log_.infractions:
        if kind not in penalties:
            raise ValueError(f"unknown infraction kind {kind!r}")
        score *= penalties[kind]
    return rc, score, rc * score


def compute_metrics(logs, penalties: dict | None = None) -> Metrics:
    logs = list(logs)
    if not logs:
        raise ValueError("compute_metrics needs at least one episode log")
    rc, is_, ds = [], [], []
    counts = {k: 0 for k in (*INFRACTION_KINDS, "model-failure")}
    for lg in logs:
        r, i, d = route_scores(lg, penalties)
        rc.append(r)
        is_.append(i)
        ds.append(d)
        for _, kind, _ in lg.infractions:
            counts[kind] = counts.get(kind, 0) + 1
    return Metrics(rc, is_, ds, counts)


# ---------------------------------------------------------------------------
# ablation


def eval_routes(config: Config, n_routes: int | None = None) -> list:
    n = n_routes or config.eval.n_routes
    return [(make_route(config.eval.seed + k, config.sim), config.eval.seed + k) for k in range(n)]


def evaluate_agent(agent, config: Config, repeat: int = 0, n_routes: int | None = None, log_dir=None) -> list:
    logs = []
    for k, (route, seed) in enumerate(eval_routes(config, n_routes)):
        lg = run_episode(agent, route, seed + 7919 * repeat, config)
        if log_dir is not None:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            lg.save(Path(log_dir) / f"route_{k:03d}_rep{repeat}.rda")
        logs.append(lg)
    return logs


def variant_config(base: Config, overrides: dict, seed: int) -> Config:
    cfg = copy.deepcopy(base)
    for k, v in overrides.items():
        setattr(cfg.model, k, v)
    cfg.train.seed = seed
    return cfg


def ablation_suite(config: Config, dataset, out_dir, variants=None, repeats: int = 3, n_routes: int | None = None,
                   checkpoints: dict | None = None, train_fn=None) -> dict:
    """Train (or load) and evaluate every variant over ``repeats`` seeds; write CSV and text reports.

    ``checkpoints`` maps (variant, repeat) to a checkpoint path; when given,
    only listed checkpoints are evaluated and missing ones are reported absent.
    """
    from .training import train

    train_fn = train_fn or train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = variants or list(ABLATION_VARIANTS)
    per_variant = {}
    for name in variants:
        ds_rep, rc_rep, is_rep = [], [], []
        for rep in range(repeats):
            vdir = out / name / f"rep{rep}"
            if checkpoints is not None:
                path = checkpoints.get((name, rep))
                if path is None or not Path(path).exists():
                    continue
                model = StudentModel.load(path)
            else:
                cfg = variant_config(config, ABLATION_VARIANTS[name], config.train.seed + rep)
                model = train_fn(cfg, dataset, vdir).model
            logs = evaluate_agent(StudentAgent(model), config, rep, n_routes, vdir / "logs")
            s = compute_metrics(logs).summary()
            ds_rep.append(s["DS"])
            rc_rep.append(s["RC"])
            is_rep.append(s["IS"])
        per_variant[name] = {"DS": ds_rep, "RC": rc_rep, "IS": is_rep}
    report = summarise_ablation(per_variant)
    write_ablation_report(report, out)
    return report


def _mean_std(v):
    v = np.asarray(v, dtype=np.float64)
    if len(v) == 0:
        return None, None
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def summarise_ablation(per_variant: dict) -> dict:
    rows = {}
    for name, vals in per_variant.items():
        row = {"present": len(vals["DS"]) > 0, "repeats": len(vals["DS"])}
        for k in ("DS", "RC", "IS"):
            row[k], row[k + "_std"] = _mean_std(vals[k])
        row["DS_runs"] = list(vals["DS"])
        rows[name] = row
    claims = []
    for better, worse in ABLATION_CLAIMS:
        a, b = rows.get(better), rows.get(worse)
        if not a or not b or not a["present"] or not b["present"]:
            claims.append({"better": better, "worse": worse, "status": "absent"})
            continue
        delta = a["DS"] - b["DS"]
        pooled = float(np.sqrt(0.5 * (a["DS_std"] ** 2 + b["DS_std"] ** 2)))
        claims.append({
            "better": better,
            "worse": worse,
            "delta": delta,
            "pooled_std": pooled,
            "direction_holds": delta > 0,
            "exceeds_std": delta > pooled,
            "status": "ok" if delta > pooled else ("direction-only" if delta > 0 else "reversed"),
        })
    return {"variants": rows, "claims": claims}


def write_ablation_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "repeats", "DS", "DS_std", "RC", "RC_std", "IS", "IS_std"])
        for name, row in report["variants"].items():
            w.writerow([name, row["repeats"]] + [("" if row[k] is None else repr(row[k])) for k in ("DS", "DS_std", "RC", "RC_std", "IS", "IS_std")])
    lines = [
        "Decoder ablation (closed loop)",
        "reference driving scores: K0 {K0} -> K1 {K1} -> K5 {K5}".format(**REFERENCE_DS),
        "reference without prediction: DS {DS}, RC {RC}, IS {IS} (a more reckless agent)".format(**REFERENCE_NO_PREDICT),
        "route-deviation and blocked end an episode and carry no infraction penalty",
        "",
    ]
    for name, row in report["variants"].items():
        if not row["present"]:
            lines.append(f"{name:14s} absent")
            continue
        lines.append(f"{name:14s} DS {row['DS']:.3f}±{row['DS_std']:.3f}  RC {row['RC']:.3f}±{row['RC_std']:.3f}  "
                     f"IS {row['IS']:.3f}±{row['IS_std']:.3f}  (n={row['repeats']})")
    lines.append("")
    for c in report["claims"]:
        if c["status"] == "absent":
            lines.append(f"{c['better']} > {c['worse']}: absent")
        else:
            lines.append(f"{c['better']} > {c['worse']}: delta {c['delta']:+.3f}, pooled std {c['pooled_std']:.3f} -> {c['status']}")
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    (out / "ablation.json").write_text(json.dumps(report, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# plots


def emit_plots(log_: EpisodeLog, out_dir, every: int = 1, max_frames: int | None = None) -> list:
    """One top-down PNG per selected step, overlaying every decoder layer's trajectory.

    Deeper layers are drawn with larger, brighter markers. An empty log writes nothing.
    """
    if len(log_) == 0:
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    route = np.asarray(log_.route).reshape(-1, 2)
    steps = list(range(0, len(log_), max(1, every)))
    if max_frames is not None:
        steps = steps[:max_frames]
    files = []
    for k in steps:
        x, y, yaw, _ = log_.ego[k]
        ego = Pose2D(x, y, yaw)
        fig, ax = plt.subplots(figsize=(4, 4), dpi=80)
        if len(route):
            loc = ego.to_local(route)
            ax.plot(loc[:, 1], loc[:, 0], color="0.7", lw=6, zorder=1)
        for kind, ax_, ay, ayaw, length, width in log_.agents[k]:
            p = Pose2D(ax_, ay, ayaw).relative_to(ego)
            color = {"vehicle": "tab:blue", "pedestrian": "tab:red", "static": "tab:gray"}.get(kind, "k")
            if kind == "pedestrian":
                ax.add_patch(plt.Circle((p.y, p.x), width / 2, color=color, zorder=2))
            else:
                c = box_corners(p, length, width)
                ax.fill(c[:, 1], c[:, 0], color=color, zorder=2)
        c = box_corners(Pose2D(0.0, 0.0, 0.0), 4.5, 2.0)
        ax.fill(c[:, 1], c[:, 0], color="tab:green", zorder=3)
        trajs = np.asarray(log_.trajectories[k]).reshape(-1, np.shape(log_.trajectories[k])[1] if len(log_.trajectories[k]) else 0, 2)
        n_layers = len(trajs)
        cmap = plt.get_cmap("plasma")
        for i, tr in enumerate(trajs):
            level = (i + 1) / max(n_layers, 1)
            ax.scatter(tr[:, 1], tr[:, 0], s=8 + 40 * level, color=cmap(0.15 + 0.8 * level), zorder=4 + i, edgecolors="none")
        ax.set_xlim(-19.2, 19.2)
        ax.set_ylim(-8.0, 30.4)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(f"t = {log_.times[k]:.1f} s", fontsize=8)
        path = out / f"frame_{k:04d}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        files.append(path)
    return files
