import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import empty_road, vehicle, with_agents
from refinedrive.estimators import DrivingPolicy, PrivilegedTeacher
from refinedrive.sensors import raster_privileged_bev, render_frame
from refinedrive.simulator import Control, step
from refinedrive.teacher import collect_privileged
from refinedrive.validation import ShapeError


def test_teacher_estimator_fit_transform_predict():
    data = collect_privileged(40, seed=4, max_steps=20)
    est = PrivilegedTeacher(channels=8, epochs=1, threshold=1e9)
    with pytest.raises(NotFittedError):
        est.predict(data["raster"][:2])
    est.fit(data)
    feats = est.transform(data["raster"][:3], data["meas"][:3])
    assert feats.shape == (3, 8, 21, 21)
    ctrl = est.predict(data["raster"][:3], data["meas"][:3])
    assert ctrl.shape == (3, 2) and np.abs(ctrl).max() <= 1
    with pytest.raises(ShapeError):
        est.transform(np.zeros((2, 5, 21, 21)))
    assert clone(est).get_params() == est.get_params()


def test_policy_estimator(small_dataset):
    pol = DrivingPolicy(n_layers=1, hidden=8, img_channels=4, lidar_channels=4, epochs=1, batch_size=12)
    with pytest.raises(NotFittedError):
        pol.predict([])
    pol.fit(str(small_dataset))
    s0 = with_agents(empty_road(), vehicle(1, 15.0, 0.0))
    s1, *_ = step(s0, Control(0.0, 1.0))
    f0, f1 = render_frame(s0), render_frame(s1)
    ctrl = pol.predict([f0, (f1, f0)])
    assert ctrl.shape == (2, 2)
    assert pol.predict_trajectory([f1]).shape == (1, 2, 4, 2)
    assert pol.transform([f0]).shape == (1, 8)
    with pytest.raises(TypeError):
        pol.predict([raster_privileged_bev(s0)])
    assert pol.make_config().model.hidden == 8
