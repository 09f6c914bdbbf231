import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from refinedrive import training
from refinedrive.config import desk_profile
from refinedrive.decoder import DecoderLayerOutput
from refinedrive.encoder import rig_cells
from refinedrive.geometry import Pose2D
from refinedrive.model import StudentModel
from refinedrive.sensors import default_rig, project_points
from refinedrive.teacher import TeacherParams
from refinedrive.training import (
    DivergenceError,
    FrameDataset,
    MissingTargetError,
    augmentation,
    compute_losses,
    enabled_terms,
    make_batch,
    shift_image,
    train,
)


def small_cfg(**model):
    cfg = desk_profile()
    cfg.model.hidden = 16
    cfg.model.img_channels = 8
    cfg.model.lidar_channels = 8
    cfg.model.teacher_channels = 16
    cfg.model.n_layers = 2
    for k, v in model.items():
        setattr(cfg.model, k, v)
    cfg.train.batch_size = 6
    cfg.train.epochs = 2
    return cfg


def test_collection_writes_exact_frame_count(small_dataset, small_teacher):
    index = json.loads((small_dataset / "index.json").read_text())
    assert index["n_frames"] == 36 == sum(e["n_frames"] for e in index["episodes"])
    assert index["teacher_checksum"] == small_teacher.checksum()
    ds = FrameDataset(small_dataset)
    assert len(ds) == 36
    arr = ds[0].arrays()
    assert set(training.FRAME_KEYS) <= set(arr)
    assert all(v.dtype == np.float32 for v in arr.values())


def test_future_trajectory_follows_realised_poses(small_dataset):
    ds = FrameDataset(small_dataset)
    checked = 0
    for r in ds.records:
        if r.frame + 4 >= ds.episode_len(r.episode):
            continue
        here = Pose2D(*r.arrays()["pose"].astype(np.float64))
        traj = r.arrays()["gt_trajectory"]
        for t in range(4):
            nxt = r.arrays(t + 1)["pose"].astype(np.float64)
            assert np.allclose(traj[t], here.to_local(nxt[:2]), atol=1e-3)
        checked += 1
    assert checked > 0


def test_split_is_episode_disjoint(small_dataset):
    ds = FrameDataset(small_dataset)
    tr, va = ds.split(0.1)
    assert len(tr) + len(va) == len(ds) and va
    assert {r.episode for r in tr}.isdisjoint({r.episode for r in va})
    assert max(r.episode for r in va) == len(ds.index["episodes"]) - 1


def _fake_outputs(B=3, K=2, T=4, D=5, NC=4, C=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    enc = SimpleNamespace(
        depth_logits=torch.randn(B, 4, D, 2, 3, generator=g),
        seg_logits=torch.randn(B, 4, NC, 2, 3, generator=g),
        distill=torch.randn(B, C, 21, 21, generator=g),
        speed=torch.randn(B, generator=g) * 5,
        value=torch.randn(B, generator=g) * 50,
    )
    layers = [DecoderLayerOutput(torch.randn(B, T, 2, generator=g), torch.rand(B, 2, generator=g) * 2 - 1) for _ in range(K + 1)]
    future = [None] + [{"distill": torch.randn(B, T, C, 21, 21, generator=g), "speed": torch.randn(B, T, generator=g),
                        "value": torch.randn(B, T, generator=g) * 10} for _ in range(K)]
    return {"enc": enc, "layers": layers, "future": future}


def _targets_at_optimum(out):
    enc = out["enc"]
    return {
        "depth_bin": enc.depth_logits.argmax(2),
        "seg": enc.seg_logits.argmax(2),
        "teacher_bev": enc.distill.clone(),
        "speed": enc.speed.clone(),
        "value": enc.value.clone(),
        "gt_trajectory": out["layers"][0].traj.clone(),
        "gt_control": out["layers"][0].ctrl.clone(),
        "future": {"mask": torch.ones(enc.speed.shape[0]), "teacher_bev": out["future"][1]["distill"].clone(),
                   "speed": out["future"][1]["speed"].clone(), "value": out["future"][1]["value"].clone()},
    }


ALL = {f: 1.0 for f in training.LOSS_FAMILIES}


def test_losses_vanish_at_the_optimum():
    out = _fake_outputs(K=1)
    out["layers"][1] = out["layers"][0]
    enc = out["enc"]
    # sharpen logits so the argmax labels are essentially certain
    enc.depth_logits = enc.depth_logits * 1e4
    enc.seg_logits = enc.seg_logits * 1e4
    total, parts = compute_losses(out, _targets_at_optimum(out), ALL)
    assert float(total) < 1e-6
    assert set(parts) == {"depth", "seg", "distill", "speed", "value", "future_distill", "future_speed", "future_value",
                          "traj_0", "traj_1", "ctrl_0", "ctrl_1"}


def test_zero_weight_removes_term_exactly():
    out = _fake_outputs()
    tg = _targets_at_optimum(_fake_outputs(seed=1))
    total, parts = compute_losses(out, tg, ALL)
    w = dict(ALL, distill=0.0)
    total0, parts0 = compute_losses(out, tg, w)
    assert "distill" not in parts0
    assert torch.allclose(total0, total - parts["distill"], atol=1e-5)
    del tg["teacher_bev"]
    compute_losses(out, tg, w)  # a disabled term never asks for its targets


@pytest.mark.parametrize("k", [0, 1, 5])
def test_one_trajectory_term_per_layer(k):
    out = _fake_outputs(K=k)
    tg = _targets_at_optimum(_fake_outputs(K=max(k, 1), seed=2))
    _, parts = compute_losses(out, tg, {"traj": 1.0, "ctrl": 1.0})
    assert sorted(p for p in parts if p.startswith("traj")) == [f"traj_{i}" for i in range(k + 1)]


@pytest.mark.parametrize("term,key", [("distill", "teacher_bev"), ("speed", "speed"), ("traj", "gt_trajectory"), ("depth", "depth_bin")])
def test_missing_target_names_the_term(term, key):
    out = _fake_outputs()
    tg = _targets_at_optimum(out)
    del tg[key]
    with pytest.raises(MissingTargetError) as err:
        compute_losses(out, tg, {term: 1.0})
    assert err.value.term == term and term in str(err.value)


def test_missing_future_targets_named():
    out = _fake_outputs()
    tg = _targets_at_optimum(out)
    del tg["future"]
    with pytest.raises(MissingTargetError) as err:
        compute_losses(out, tg, {"future_speed": 1.0})
    assert err.value.term == "future_speed"


def _permute(out, tg, perm):
    enc = out["enc"]
    p_enc = SimpleNamespace(**{k: getattr(enc, k)[perm] for k in vars(enc)})
    layers = [DecoderLayerOutput(l.traj[perm], l.ctrl[perm]) for l in out["layers"]]
    future = [None if f is None else {k: v[perm] for k, v in f.items()} for f in out["future"]]
    ptg = {k: (v[perm] if torch.is_tensor(v) else {kk: vv[perm] for kk, vv in v.items()}) for k, v in tg.items()}
    return {"enc": p_enc, "layers": layers, "future": future}, ptg


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_losses_are_batch_permutation_invariant(seed):
    out = _fake_outputs(B=5, seed=seed)
    tg = _targets_at_optimum(_fake_outputs(B=5, seed=seed + 1))
    tg["future"]["mask"] = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0])
    tg["depth_bin"][0, 0, 0] = -1
    perm = torch.as_tensor(np.random.default_rng(seed).permutation(5))
    a, _ = compute_losses(out, tg, ALL)
    b, _ = compute_losses(*_permute(out, tg, perm), ALL)
    assert torch.allclose(a, b, rtol=1e-5)


def test_enabled_terms_follow_ablation_switches():
    assert "future_distill" in enabled_terms(small_cfg())
    assert "future_distill" not in enabled_terms(small_cfg(use_tf=False))
    assert "future_distill" not in enabled_terms(small_cfg(use_predict=False))
    assert "future_distill" not in enabled_terms(small_cfg(n_layers=0))


def test_crop_shift_keeps_projection_consistent():
    rig = default_rig()
    gen = np.random.default_rng(0)
    img = gen.normal(size=(3, 64, 128))
    for cam in rig:
        ox, oy = 3, -2
        crop_cam = cam.cropped(ox, oy, cam.width, cam.height)
        yaw = np.radians(cam.yaw)
        pts = np.array([cam.x, cam.y, cam.z]) + np.outer(np.linspace(3, 20, 6), [np.cos(yaw), np.sin(yaw), 0]) + [0, 0, -1.0]
        uv, ok = project_points(pts, cam)
        uv2, ok2 = project_points(pts, crop_cam)
        assert np.allclose(uv2, uv - [ox, oy])
        shifted = shift_image(img, ox, oy)
        for (u, v), (u2, v2) in zip(uv[ok].astype(int), uv2[ok & ok2].astype(int)):
            assert np.array_equal(shifted[:, v2, u2], img[:, v, u])
        cells = rig_cells(rig, (5.0, 10.0), 8, 16, crops=np.array([[[ox, oy]] * 4]))
        assert cells.shape == (1, 4, 2, 8, 16)


def test_augmentation_is_seeded_and_switches_off():
    cfg = small_cfg()
    a = augmentation(cfg, 1, 77, 4)
    b = augmentation(cfg, 1, 77, 4)
    c = augmentation(cfg, 2, 77, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[2], c[2])
    cfg.train.epochs = 20
    assert cfg.train.resolved_aug_stop() == 18


def test_make_batch_only_reads_future_on_request(small_dataset, monkeypatch):
    ds = FrameDataset(small_dataset)
    offsets = []
    orig = training.FrameRecord.arrays
    monkeypatch.setattr(training.FrameRecord, "arrays", lambda self, offset=0: offsets.append(offset) or orig(self, offset))
    cfg = small_cfg()
    bins = StudentModel(cfg).encoder.bins
    _, tg = make_batch(ds.records[:4], cfg, bins)
    assert "future" not in tg and max(offsets) <= 0
    _, tg = make_batch(ds.records[:4], cfg, bins, need_future=True)
    assert max(offsets) > 0 and tg["future"]["teacher_bev"].shape == (4, 4, 16, 21, 21)


def test_tf_disabled_training_never_reads_future_targets(small_dataset, monkeypatch):
    offsets = []
    orig = training.FrameRecord.arrays

    def tracked(self, offset=0):
        offsets.append(offset)
        return orig(self, offset)

    def forbidden(self):
        raise AssertionError("future targets read with teacher forcing disabled")

    monkeypatch.setattr(training.FrameRecord, "arrays", tracked)
    monkeypatch.setattr(training.FrameRecord, "future_targets", forbidden)
    cfg = small_cfg(use_tf=False)
    cfg.train.epochs = 1
    train(cfg, small_dataset, max_steps=2)
    assert offsets and max(offsets) <= 0


def test_smoke_training_reduces_loss_and_writes_artifacts(small_dataset, small_teacher, tmp_path):
    cfg = small_cfg()
    cfg.train.epochs = 4
    cfg.train.lr = 3e-3
    before = small_teacher.checksum()
    res = train(cfg, small_dataset, tmp_path, small_teacher)
    assert res.history[-1]["total"] < res.history[0]["initial_total"]
    assert small_teacher.checksum() == before
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "student.rda").exists()
    assert json.loads((tmp_path / "loss_weights.json").read_text()) == res.weights
    # cosine schedule anneals to (almost) zero by the final step
    assert res.history[-1]["lr"] < 0.01 * cfg.train.lr
    assert "val_ade_2" in res.history[-1]
    back = StudentModel.load(res.checkpoint, cfg.hash())
    for k, v in res.model.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)


def test_gradients_are_clipped(small_dataset, monkeypatch):
    post = []
    orig = torch.nn.utils.clip_grad_norm_

    def clip(params, max_norm, *a, **kw):
        params = list(params)
        norm = orig(params, max_norm, *a, **kw)
        post.append(torch.norm(torch.stack([p.grad.norm() for p in params if p.grad is not None])).item())
        return norm

    monkeypatch.setattr(torch.nn.utils, "clip_grad_norm_", clip)
    cfg = small_cfg()
    cfg.train.grad_clip_l2 = 0.05
    cfg.train.epochs = 1
    res = train(cfg, small_dataset, max_steps=2)
    assert max(res.grad_norms) > 0.05
    assert max(post) <= 0.05 * (1 + 1e-4)


def test_divergence_is_reported(small_dataset):
    cfg = small_cfg()
    cfg.train.loss_weights = {"speed": float("nan")}
    with pytest.raises(DivergenceError):
        train(cfg, small_dataset, max_steps=1)


def test_wrong_teacher_is_rejected(small_dataset):
    from refinedrive.teacher import TeacherNet

    torch.manual_seed(123)
    other = TeacherParams(TeacherNet(16), 16)
    with pytest.raises(ValueError):
        train(small_cfg(), small_dataset, teacher=other, max_steps=1)


def test_teacher_width_mismatch_is_reported(small_dataset):
    cfg = small_cfg(teacher_channels=64)
    with pytest.raises(ValueError, match="teacher"):
        train(cfg, small_dataset, max_steps=1)
