"""Student driving model: encoder + decoder, batch assembly and checkpoints."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import container
from .config import Config, config_from_dict
from .decoder import Decoder
from .encoder import Encoder, pad_clouds
from .geometry import Pose2D
from .sensors import CameraRig, SensorFrame, default_rig, stack_lidar
from .teacher import measurement_vector

STUDENT_VERSION = "student-1"


class CheckpointMismatch(container.ContainerError):
    pass


class StudentModel(nn.Module):
    def __init__(self, config: Config | None = None, rig: CameraRig | None = None):
        super().__init__()
        self.config = config or Config()
        mcfg = self.config.model
        self.rig = rig or default_rig(mcfg.img_h, mcfg.img_w)
        self.encoder = Encoder(mcfg, self.rig)
        self.decoder = Decoder(mcfg, self.rig)

    def forward(self, batch: dict, gt=None, targets=None) -> dict:
        """Run the full stack.

        ``gt = (ctrl, traj)`` and ``targets`` (future teacher targets) drive the
        teacher-forced branch and are only used during training. Returns a dict
        with ``enc`` (EncoderOutput), ``layers`` (K + 1 decoder outputs) and, for
        every layer that ran teacher forcing, its future feature/speed/value
        predictions under ``future``.
        """
        enc = self.encoder(batch)
        layers = self.decoder(enc, batch.get("crops"), gt, targets)
        future = []
        for out in layers:
            if out.tf is None:
                future.append(None)
                continue
            feat = out.tf.predict_feature_gt
            B, T = feat.shape[:2]
            flat = feat.flatten(0, 1)
            h_env = self.encoder.state.env_vector(flat)
            h_mst = enc.h_mst[:, None].expand(-1, T, -1).flatten(0, 1)
            speed, value = self.encoder.state.heads(h_env, h_mst)
            future.append({
                "distill": self.encoder.distill(flat).view(B, T, -1, *feat.shape[-2:]),
                "speed": speed.view(B, T),
                "value": value.view(B, T),
            })
        return {"enc": enc, "layers": layers, "future": future}

    # ------------------------------------------------------------------
    # checkpoints

    def save(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"version": STUDENT_VERSION, "config": self.config.to_dict(), "config_hash": self.config.hash()}
        container.save(path, arrays, meta)

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "StudentModel":
        arrays, meta = container.load(path)
        if meta.get("version") != STUDENT_VERSION:
            raise container.ContainerError(f"expected a {STUDENT_VERSION} checkpoint, got {meta.get('version')!r}")
        config = config_from_dict(meta["config"])
        if config.hash() != meta.get("config_hash"):
            raise CheckpointMismatch("checkpoint config does not match its embedded hash")
        if expected_hash is not None and expected_hash != meta["config_hash"]:
            raise CheckpointMismatch(f"checkpoint config hash {meta['config_hash']} != expected {expected_hash}")
        model = cls(config)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        model.eval()
        return model


# ---------------------------------------------------------------------------
# batches


def frame_inputs(frame: SensorFrame, prev: SensorFrame | None = None) -> dict:
    """Network inputs of one frame as numpy arrays (no batch axis).

    Without a previous frame the current one is repeated with zero motion.
    """
    prev = prev or frame
    motion = Pose2D(*prev.pose).relative_to(Pose2D(*frame.pose)) if prev is not frame else Pose2D(0.0, 0.0, 0.0)
    return {
        "images": np.asarray(frame.images, dtype=np.float32),
        "prev_images": np.asarray(prev.images, dtype=np.float32),
        "lidar": stack_lidar(frame.lidar, prev.lidar, motion),
        "meas": measurement_vector(frame.speed, frame.target_point, frame.command),
        "motion": motion.as_array().astype(np.float32),
    }


def collate_inputs(items: list[dict], dtype=torch.float32) -> dict:
    """Stack per-frame input dicts into a batch; LiDAR clouds are zero-padded with a mask."""
    pts, mask = pad_clouds([it["lidar"] for it in items])
    batch = {
        "images": torch.as_tensor(np.stack([it["images"] for it in items]), dtype=dtype),
        "prev_images": torch.as_tensor(np.stack([it["prev_images"] for it in items]), dtype=dtype),
        "lidar": torch.as_tensor(pts, dtype=dtype),
        "lidar_mask": torch.as_tensor(mask),
        "meas": torch.as_tensor(np.stack([it["meas"] for it in items]), dtype=dtype),
        "motion": np.stack([it["motion"] for it in items]).astype(np.float64),
    }
    if all("crops" in it for it in items):
        batch["crops"] = np.stack([it["crops"] for it in items])
        batch["prev_crops"] = np.stack([it["prev_crops"] for it in items])
    return batch
