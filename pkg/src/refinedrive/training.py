"""Dataset collection, frame records, the composite loss and the optimisation loop.

Dataset layout (all relative to the dataset root)::

    index.json                      episodes, frame counts, teacher checksum
    episode_00000/index.json        frame files and route metadata
    episode_00000/frame_00000.rda   one named-array container per frame (float32)
"""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import container
from .config import Config
from .geometry import Pose2D
from .model import StudentModel, collate_inputs
from .sensors import image_height_channel, images_from_parts, raster_privileged_bev, render_frame, stack_lidar
from .simulator import make_route, reset, step
from .teacher import VALUE_SCALE, TeacherParams, discounted_returns, measurement_vector, scripted_expert_act, state_measurements, teacher_features

log = logging.getLogger(__name__)

FRAME_KEYS = ("seg", "depth", "height", "lidar", "speed", "target_point", "command", "gt_control", "gt_trajectory",
              "pose", "raster", "teacher_bev", "teacher_value", "value", "reward")
LOSS_FAMILIES = ("depth", "seg", "distill", "future_distill", "speed", "value", "future_speed", "future_value", "traj", "ctrl")
FUTURE_FAMILIES = ("future_distill", "future_speed", "future_value")


class DivergenceError(RuntimeError):
    pass


class MissingTargetError(KeyError):
    def __init__(self, term: str):
        super().__init__(term)
        self.term = term

    def __str__(self):
        return f"missing targets for enabled loss term {self.term!r}"


# ---------------------------------------------------------------------------
# collection


def _episode_seed(seed: int, ep: int) -> int:
    return seed * 100_003 + ep


def collect_dataset(out_dir, n_frames: int, teacher: TeacherParams, config: Config | None = None, seed: int | None = None,
                    max_steps: int | None = None) -> Path:
    """Drive the scripted expert at 2 Hz and write exactly ``n_frames`` frame records."""
    if teacher is None:
        raise ValueError("collect_dataset needs trained teacher parameters")
    config = config or Config()
    seed = config.data.seed if seed is None else seed
    max_steps = max_steps or config.eval.max_steps
    sim = config.sim
    horizon = config.model.horizon
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    episodes = []
    total = 0
    ep = 0
    while total < n_frames:
        ep_seed = _episode_seed(seed, ep)
        route = make_route(ep_seed, sim)
        state = reset(ep_seed, route, sim)
        rows, poses, rewards = [], [], []
        reason = "max-steps"
        for _ in range(max_steps):
            if total + len(rows) >= n_frames:
                reason = "truncated"
                break
            frame = render_frame(state, cfg=sim)
            ctrl, rollout = scripted_expert_act(state, sim, horizon)
            raster = raster_privileged_bev(state, sim).data
            tout = teacher_features(teacher, raster, state_measurements(state))
            rows.append({
                "seg": frame.seg_gt,
                "depth": frame.depth_gt,
                "height": image_height_channel(frame.images),
                "lidar": frame.lidar,
                "speed": np.array([frame.speed]),
                "target_point": frame.target_point,
                "command": frame.command,
                "gt_control": ctrl.as_array(),
                "gt_trajectory": rollout,
                "pose": frame.pose,
                "raster": raster,
                "teacher_bev": tout.bev_feature,
                "teacher_value": np.array([tout.value]),
            })
            poses.append(frame.pose)
            state, r, _, done = step(state, ctrl, sim)
            rewards.append(r)
            if done:
                reason = state.terminal_reason
                break
        # realised future positions replace the rollout wherever the episode continues
        poses.append(state.ego.pose.as_array())
        returns = discounted_returns(rewards)
        for k, row in enumerate(rows):
            here = Pose2D(*poses[k])
            for t in range(horizon):
                if k + t + 1 < len(poses):
                    row["gt_trajectory"][t] = here.to_local(np.asarray(poses[k + t + 1][:2]))
            row["value"] = np.array([returns[k]])
            row["reward"] = np.array([rewards[k]])
        ep_dir = root / f"episode_{ep:05d}"
        try:
            ep_dir.mkdir(exist_ok=True)
            files = []
            for k, row in enumerate(rows):
                name = f"frame_{k:05d}.rda"
                container.save(ep_dir / name, row, {"episode": ep, "frame": k}, dtype=np.float32)
                files.append(name)
            meta = {
                "episode": ep,
                "seed": ep_seed,
                "frames": files,
                "terminal_reason": reason,
                "route": {"waypoints": [[p.x, p.y, p.yaw] for p in route.waypoints], "commands": list(route.commands)},
            }
            (ep_dir / "index.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        except OSError:
            shutil.rmtree(ep_dir, ignore_errors=True)
            raise
        episodes.append({"dir": ep_dir.name, "n_frames": len(rows)})
        total += len(rows)
        ep += 1
    index = {"n_frames": total, "horizon": horizon, "episodes": episodes, "teacher_checksum": teacher.checksum(),
             "config_hash": config.hash()}
    (root / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1))
    return root


# ---------------------------------------------------------------------------
# frame records


@lru_cache(maxsize=256)
def _load_frame(path: str) -> dict:
    arrays, _ = container.load(path)
    return arrays


def depth_to_bins(depth, bins) -> np.ndarray:
    """Nearest bin index per depth; -1 where no surface (depth 0)."""
    bins = np.asarray(bins)
    idx = np.abs(np.asarray(depth)[..., None] - bins).argmin(-1)
    return np.where(np.asarray(depth) > 0, idx, -1)


def shift_image(img: np.ndarray, ox: int, oy: int, fill=0) -> np.ndarray:
    """Window starting at pixel (ox, oy) of the same size, padded with ``fill``."""
    H, W = img.shape[-2:]
    out = np.full_like(img, fill)
    ys, yd = (oy, 0) if oy >= 0 else (0, -oy)
    xs, xd = (ox, 0) if ox >= 0 else (0, -ox)
    h = H - abs(oy)
    w = W - abs(ox)
    if h > 0 and w > 0:
        out[..., yd : yd + h, xd : xd + w] = img[..., ys : ys + h, xs : xs + w]
    return out


class FrameRecord:
    """One training sample. Future targets are read lazily and only on request."""

    def __init__(self, dataset: "FrameDataset", episode: int, frame: int):
        self.dataset = dataset
        self.episode = episode
        self.frame = frame

    @property
    def uid(self) -> int:
        return self.episode * 100_000 + self.frame

    def arrays(self, offset: int = 0) -> dict:
        return _load_frame(str(self.dataset.frame_path(self.episode, self.frame + offset)))

    @property
    def has_future(self) -> bool:
        return self.frame + self.dataset.horizon < self.dataset.episode_len(self.episode)

    def future_targets(self) -> dict:
        T = self.dataset.horizon
        if not self.has_future:
            return {"mask": np.zeros(1, dtype=np.float32), "teacher_bev": None, "speed": np.zeros(T), "value": np.zeros(T)}
        fut = [self.arrays(t + 1) for t in range(T)]
        return {
            "mask": np.ones(1, dtype=np.float32),
            "teacher_bev": np.stack([f["teacher_bev"] for f in fut]),
            "speed": np.array([float(f["speed"][0]) for f in fut]),
            "value": np.array([float(f["value"][0]) for f in fut]),
        }

    def inputs(self, crop=None, prev_crop=None, jitter=None) -> dict:
        cur = self.arrays()
        prev = self.arrays(-1) if self.frame > 0 else cur
        motion = Pose2D(*prev["pose"]).relative_to(Pose2D(*cur["pose"])) if self.frame > 0 else Pose2D(0.0, 0.0, 0.0)
        images = images_from_parts(cur["seg"], cur["height"])
        prev_images = images_from_parts(prev["seg"], prev["height"])
        seg, depth = cur["seg"], cur["depth"]
        if crop is not None:
            images = np.stack([shift_image(images[n], *crop[n]) for n in range(len(images))])
            prev_images = np.stack([shift_image(prev_images[n], *prev_crop[n]) for n in range(len(prev_images))])
            seg = np.stack([shift_image(seg[n], *crop[n]) for n in range(len(seg))])
            depth = np.stack([shift_image(depth[n], *crop[n]) for n in range(len(depth))])
        if jitter is not None:
            images = images * jitter[0]
            prev_images = prev_images * jitter[1]
        out = {
            "images": images.astype(np.float32),
            "prev_images": prev_images.astype(np.float32),
            "lidar": stack_lidar(cur["lidar"], prev["lidar"], motion),
            "meas": measurement_vector(float(cur["speed"][0]), cur["target_point"], cur["command"]),
            "motion": motion.as_array().astype(np.float32),
            "seg": seg,
            "depth": depth,
        }
        if crop is not None:
            out["crops"] = np.asarray(crop, dtype=np.int64)
            out["prev_crops"] = np.asarray(prev_crop, dtype=np.int64)
        return out

    def targets(self) -> dict:
        cur = self.arrays()
        return {
            "teacher_bev": cur["teacher_bev"],
            "speed": float(cur["speed"][0]),
            "value": float(cur["value"][0]),
            "gt_control": cur["gt_control"],
            "gt_trajectory": cur["gt_trajectory"],
        }


class FrameDataset:
    def __init__(self, root):
        self.root = Path(root)
        self.index = json.loads((self.root / "index.json").read_text())
        self.horizon = int(self.index["horizon"])
        self._episodes = []
        for e in self.index["episodes"]:
            meta = json.loads((self.root / e["dir"] / "index.json").read_text())
            self._episodes.append((e["dir"], meta["frames"]))
        self.records = [FrameRecord(self, ep, k) for ep, (_, frames) in enumerate(self._episodes) for k in range(len(frames))]

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def teacher_channels(self) -> int:
        return int(self.records[0].arrays()["teacher_bev"].shape[0])

    def episode_len(self, ep: int) -> int:
        return len(self._episodes[ep][1])

    def frame_path(self, ep: int, k: int) -> Path:
        d, frames = self._episodes[ep]
        return self.root / d / frames[k]

    def split(self, val_fraction: float = 0.1):
        """Episode-disjoint split: the last ``val_fraction`` of episodes (by collection order) validate."""
        n_ep = len(self._episodes)
        n_val = max(1, int(round(n_ep * val_fraction))) if n_ep > 1 else 0
        cut = n_ep - n_val
        train = [r for r in self.records if r.episode < cut]
        val = [r for r in self.records if r.episode >= cut]
        return train, val


def _feature_targets(seg, depth, bins, stride: int = 8):
    """Sample per-pixel labels at the centre pixel of every stride x stride block."""
    c = stride // 2
    return depth_to_bins(depth[..., c::stride, c::stride], bins), seg[..., c::stride, c::stride].astype(np.int64)


def augmentation(config: Config, epoch: int, uid: int, n_cam: int):
    """Crop offsets and jitter gains for one sample, seeded by (seed, epoch, frame id)."""
    rng = np.random.default_rng([config.train.seed, epoch, uid])
    m = config.train.crop_margin
    crop = rng.integers(-m, m + 1, size=(n_cam, 2))
    prev_crop = rng.integers(-m, m + 1, size=(n_cam, 2))
    s = config.train.color_jitter
    n_ch = config.model.c_in
    gains = 1.0 + rng.uniform(-s, s, size=(2, n_cam, n_ch, 1, 1))
    return crop, prev_crop, gains.astype(np.float32)


def make_batch(records, config: Config, bins, epoch: int = 0, augment: bool = False, need_future: bool = False, dtype=torch.float32):
    """Collate records into (inputs, targets). Future targets are touched only when ``need_future``."""
    items = []
    for r in records:
        if augment:
            crop, prev_crop, gains = augmentation(config, epoch, r.uid, 4)
            items.append(r.inputs(crop, prev_crop, gains))
        else:
            items.append(r.inputs())
    batch = collate_inputs(items, dtype)
    dbin, seg = zip(*[_feature_targets(it["seg"], it["depth"], bins) for it in items])
    tg = [r.targets() for r in records]
    targets = {
        "depth_bin": torch.as_tensor(np.stack(dbin)),
        "seg": torch.as_tensor(np.stack(seg)),
        "teacher_bev": torch.as_tensor(np.stack([t["teacher_bev"] for t in tg]), dtype=dtype),
        "speed": torch.as_tensor([t["speed"] for t in tg], dtype=dtype),
        "value": torch.as_tensor([t["value"] for t in tg], dtype=dtype),
        "gt_control": torch.as_tensor(np.stack([t["gt_control"] for t in tg]), dtype=dtype),
        "gt_trajectory": torch.as_tensor(np.stack([t["gt_trajectory"] for t in tg]), dtype=dtype),
    }
    if need_future:
        fut = [r.future_targets() for r in records]
        shape = targets["teacher_bev"].shape[1:]
        T = len(fut[0]["speed"])
        targets["future"] = {
            "mask": torch.as_tensor(np.concatenate([f["mask"] for f in fut]), dtype=dtype),
            "teacher_bev": torch.as_tensor(np.stack([f["teacher_bev"] if f["teacher_bev"] is not None else np.zeros((T, *shape))
                                                     for f in fut]), dtype=dtype),
            "speed": torch.as_tensor(np.stack([f["speed"] for f in fut]), dtype=dtype),
            "value": torch.as_tensor(np.stack([f["value"] for f in fut]), dtype=dtype),
        }
    return batch, targets


# ---------------------------------------------------------------------------
# losses


def enabled_terms(config: Config) -> tuple:
    m = config.model
    terms = ["depth", "seg", "distill", "speed", "value", "traj", "ctrl"]
    if m.use_predict and m.use_tf and m.n_layers > 0:
        terms += list(FUTURE_FAMILIES)
    return tuple(t for t in LOSS_FAMILIES if t in terms)


def _masked_mean(x, mask):
    return (x * mask).sum() / mask.sum().clamp(min=1.0)


def compute_losses(outputs: dict, targets: dict, weights: dict) -> tuple:
    """Weighted total and per-term breakdown.

    ``weights`` maps a loss family to its weight; families absent or weighted 0
    are not computed at all. The ``traj``/``ctrl`` families expand to one term
    per decoder layer (``traj_0`` ... ``traj_K``). Every term is a batch mean.
    """
    enc = outputs["enc"]
    parts = {}

    def need(term, *keys):
        src = targets
        for k in keys:
            if not isinstance(src, dict) or k not in src or src[k] is None:
                raise MissingTargetError(term)
            src = src[k]
        return src

    def on(term):
        return weights.get(term, 0.0) != 0.0

    if on("depth"):
        tgt = need("depth", "depth_bin")
        logits = enc.depth_logits.permute(0, 1, 3, 4, 2).reshape(-1, enc.depth_logits.shape[2])
        parts["depth"] = F.cross_entropy(logits, tgt.reshape(-1).long(), ignore_index=-1) if (tgt >= 0).any() else logits.sum() * 0
    if on("seg"):
        tgt = need("seg", "seg")
        logits = enc.seg_logits.permute(0, 1, 3, 4, 2).reshape(-1, enc.seg_logits.shape[2])
        parts["seg"] = F.cross_entropy(logits, tgt.reshape(-1).long())
    if on("distill"):
        parts["distill"] = F.mse_loss(enc.distill, need("distill", "teacher_bev"))
    if on("speed"):
        parts["speed"] = F.smooth_l1_loss(enc.speed, need("speed", "speed"))
    if on("value"):
        parts["value"] = F.smooth_l1_loss(enc.value / VALUE_SCALE, need("value", "value") / VALUE_SCALE)
    fut_terms = [t for t in FUTURE_FAMILIES if on(t)]
    if fut_terms:
        preds = [f for f in outputs["future"] if f is not None]
        if not preds:
            raise MissingTargetError(fut_terms[0])
        for term in fut_terms:
            key = term.split("_", 1)[1]
            key = "teacher_bev" if key == "distill" else key
            tgt = need(term, "future", key)
            mask = need(term, "future", "mask")
            vals = []
            for p in preds:
                if term == "future_distill":
                    per = ((p["distill"] - tgt) ** 2).flatten(1).mean(1)
                elif term == "future_speed":
                    per = F.smooth_l1_loss(p["speed"], tgt, reduction="none").mean(1)
                else:
                    per = F.smooth_l1_loss(p["value"] / VALUE_SCALE, tgt / VALUE_SCALE, reduction="none").mean(1)
                vals.append(_masked_mean(per, mask))
            parts[term] = torch.stack(vals).mean()
    for i, layer in enumerate(outputs["layers"]):
        if on("traj"):
            parts[f"traj_{i}"] = F.smooth_l1_loss(layer.traj, need("traj", "gt_trajectory"))
        if on("ctrl"):
            parts[f"ctrl_{i}"] = F.smooth_l1_loss(layer.ctrl, need("ctrl", "gt_control"))
    total = sum(weights[_family(k)] * v for k, v in parts.items()) if parts else torch.zeros(())
    return total, parts


def _family(term: str) -> str:
    head, _, tail = term.rpartition("_")
    return head if tail.isdigit() else term


def calibrate_weights(parts: dict, configured: dict, terms) -> dict:
    """1 / initial magnitude for every enabled family without a configured weight."""
    weights = {}
    for fam in terms:
        if fam in configured:
            weights[fam] = float(configured[fam])
            continue
        vals = [float(v.detach()) for k, v in parts.items() if _family(k) == fam]
        mag = float(np.mean(vals)) if vals else 1.0
        weights[fam] = 1.0 / max(mag, 1e-3)
    return weights


# ---------------------------------------------------------------------------
# training loop


def ade_per_layer(model: StudentModel, records, config: Config, bins, batch_size: int = 32) -> list:
    """Mean displacement error of every decoder layer's trajectory (inference mode, no ground truth)."""
    if not records:
        return []
    model.eval()
    sums = None
    n = 0
    with torch.no_grad():
        for b in range(0, len(records), batch_size):
            chunk = records[b : b + batch_size]
            batch, tg = make_batch(chunk, config, bins)
            out = model(batch)
            errs = [(o.traj - tg["gt_trajectory"]).norm(dim=-1).mean(-1).sum().item() for o in out["layers"]]
            sums = errs if sums is None else [a + e for a, e in zip(sums, errs)]
            n += len(chunk)
    model.train()
    return [s / n for s in sums]


@dataclass
class TrainResult:
    model: StudentModel
    history: list
    weights: dict
    checkpoint: Path | None = None
    grad_norms: list = field(default_factory=list)


def train(config: Config, dataset, out_dir=None, teacher: TeacherParams | None = None, max_steps: int | None = None) -> TrainResult:
    """Optimise a fresh student on ``dataset`` (a FrameDataset or its root directory)."""
    ds = dataset if isinstance(dataset, FrameDataset) else FrameDataset(dataset)
    if len(ds) == 0:
        raise ValueError("training dataset is empty")
    if teacher is not None and ds.index.get("teacher_checksum") not in (None, teacher.checksum()):
        raise ValueError("dataset was labelled by a different teacher")
    if ds.teacher_channels != config.model.teacher_channels:
        raise ValueError(f"dataset teacher features have {ds.teacher_channels} channels, "
                         f"model.teacher_channels is {config.model.teacher_channels}")
    tc = config.train
    torch.manual_seed(tc.seed)
    model = StudentModel(config)
    bins = model.encoder.bins
    train_recs, val_recs = ds.split(tc.val_fraction)
    if not train_recs:
        train_recs = val_recs
    terms = enabled_terms(config)
    need_future = any(t in terms for t in FUTURE_FAMILIES)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    steps_per_epoch = math.ceil(len(train_recs) / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1), eta_min=0.0)
    aug_stop = tc.resolved_aug_stop()
    weights = None
    history, grad_norms = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step_i = 0
    initial_total = None
    for epoch in range(tc.epochs):
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(train_recs))
        sums: dict = {}
        count = 0
        for b in range(0, len(order), tc.batch_size):
            if step_i >= total_steps:
                break
            recs = [train_recs[i] for i in order[b : b + tc.batch_size]]
            batch, tg = make_batch(recs, config, bins, epoch, augment=epoch < aug_stop, need_future=need_future)
            gt = (tg["gt_control"], tg["gt_trajectory"]) if need_future else None
            outputs = model(batch, gt=gt, targets=tg.get("future") if need_future else None)
            if weights is None:
                _, raw = compute_losses(outputs, tg, {t: 1.0 for t in terms})
                weights = calibrate_weights(raw, tc.loss_weights, terms)
                log.info("loss weights: %s", weights)
            total, parts = compute_losses(outputs, tg, weights)
            if not torch.isfinite(total):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step_i}")
            if initial_total is None:
                initial_total = float(total.detach())
            opt.zero_grad()
            total.backward()
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip_l2)
            grad_norms.append(float(norm))
            opt.step()
            sched.step()
            step_i += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(recs)
            sums["total"] = sums.get("total", 0.0) + float(total.detach()) * len(recs)
            count += len(recs)
        if count == 0:
            break
        row = {"epoch": epoch, "lr": opt.param_groups[0]["lr"], "augment": int(epoch < aug_stop)}
        row.update({k: v / count for k, v in sums.items()})
        for i, a in enumerate(ade_per_layer(model, val_recs, config, bins)):
            row[f"val_ade_{i}"] = a
        history.append(row)
        log.info("epoch %d total %.4f", epoch, row["total"])
    if initial_total is not None and history:
        history[0]["initial_total"] = initial_total
    result = TrainResult(model, history, weights or {}, grad_norms=grad_norms)
    if out is not None:
        _write_metrics(out / "metrics.csv", history)
        (out / "loss_weights.json").write_text(json.dumps(weights or {}, sort_keys=True, indent=1))
        model.save(out / "student.rda")
        result.checkpoint = out / "student.rda"
    return result


def _write_metrics(path: Path, history: list) -> None:
    cols = []
    for row in history:
        for k in row:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
