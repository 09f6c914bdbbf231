"""scikit-learn style wrappers around the privileged teacher and the student policy."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import desk_profile
from .geometry import BEV_SIZE
from .model import collate_inputs, frame_inputs
from .sensors import RASTER_CHANNELS, SensorFrame
from .teacher import MEAS_DIM, teacher_batch, train_teacher
from .validation import check_shape


def _frame_pairs(X):
    """Accept SensorFrames or (frame, previous frame) pairs."""
    pairs = []
    for item in X:
        if isinstance(item, SensorFrame):
            pairs.append((item, None))
        elif isinstance(item, (tuple, list)) and len(item) == 2:
            pairs.append((item[0], item[1]))
        else:
            raise TypeError("expected SensorFrame or (frame, previous frame) items")
    if not pairs:
        raise ValueError("no frames given")
    return pairs


class PrivilegedTeacher(BaseEstimator, TransformerMixin):
    """fit on a privileged dataset dict; transform rasters to BEV features; predict controls."""

    def __init__(self, channels: int = 64, epochs: int = 20, lr: float = 1e-3, threshold: float = 0.1, seed: int = 0):
        self.channels = channels
        self.epochs = epochs
        self.lr = lr
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y=None):
        cfg = desk_profile()
        cfg.model.teacher_channels = self.channels
        self.params_ = train_teacher(X, cfg, epochs=self.epochs, lr=self.lr, threshold=self.threshold, seed=self.seed)
        return self

    def _run(self, X, meas):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float32)
        check_shape(X, (None, len(RASTER_CHANNELS), BEV_SIZE, BEV_SIZE), "rasters")
        meas = np.zeros((len(X), MEAS_DIM), np.float32) if meas is None else np.asarray(meas, dtype=np.float32)
        check_shape(meas, (len(X), MEAS_DIM), "measurements")
        return teacher_batch(self.params_, X, meas)

    def transform(self, X, meas=None):
        return self._run(X, meas)["bev_feature"]

    def predict(self, X, meas=None):
        return self._run(X, meas)["control"]


class DrivingPolicy(BaseEstimator):
    """Student policy. ``fit`` takes a dataset directory (the distillation width follows its teacher);
    the predict methods take SensorFrames."""

    def __init__(self, n_layers: int = 2, hidden: int = 32, img_channels: int = 16, lidar_channels: int = 16,
                 epochs: int = 30, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                 use_look: bool = True, use_predict: bool = True, use_tf: bool = True):
        self.n_layers = n_layers
        self.hidden = hidden
        self.img_channels = img_channels
        self.lidar_channels = lidar_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.use_look = use_look
        self.use_predict = use_predict
        self.use_tf = use_tf

    def make_config(self):
        cfg = desk_profile()
        for key in ("n_layers", "hidden", "img_channels", "lidar_channels", "use_look", "use_predict", "use_tf"):
            setattr(cfg.model, key, getattr(self, key))
        cfg.train.epochs = self.epochs
        cfg.train.batch_size = self.batch_size
        cfg.train.lr = self.lr
        cfg.train.seed = self.seed
        return cfg

    def fit(self, X, y=None):
        from .training import FrameDataset, train

        ds = FrameDataset(X)
        cfg = self.make_config()
        cfg.model.teacher_channels = ds.teacher_channels
        result = train(cfg, ds)
        self.model_ = result.model.eval()
        self.history_ = result.history
        self.loss_weights_ = result.weights
        return self

    def _forward(self, X):
        check_is_fitted(self, "model_")
        batch = collate_inputs([frame_inputs(f, p) for f, p in _frame_pairs(X)])
        with torch.no_grad():
            return self.model_(batch)

    def predict(self, X):
        """Last-layer control (steer, accel) per frame."""
        return self._forward(X)["layers"][-1].ctrl.numpy()

    def predict_trajectory(self, X):
        """(N, K + 1, T, 2) trajectories from every decoder layer."""
        return torch.stack([o.traj for o in self._forward(X)["layers"]], dim=1).numpy()

    def transform(self, X):
        """Environment vectors H_env."""
        return self._forward(X)["enc"].h_env.numpy()
