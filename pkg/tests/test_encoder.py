import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_error, module_tensors, weighted_sum
from refinedrive.config import desk_profile
from refinedrive.encoder import (
    Backbone,
    DepthSegHead,
    Encoder,
    FuseBEV,
    LidarBEV,
    StateEncoder,
    lift_splat_bev,
    pad_clouds,
    rig_cells,
    voxelize,
)
from refinedrive.sensors import default_rig, depth_bin_centers, unproject_pixels
from refinedrive.validation import ShapeError

SEEDS = range(5)
TOL = 1e-4
BINS = tuple(depth_bin_centers(6, 1.0, 32.0))


def small_rig():
    # 16x32 images give a 2x4 stride-8 map; keeps the brute-force loops short
    return default_rig(16, 32)


def _cells_for(rig, fh, fw, bins=BINS):
    return rig_cells(rig, bins, fh, fw)


def backbone_grad_error(seed):
    torch.manual_seed(seed)
    net = Backbone(3, 4, 16, 32).double()
    x = torch.randn(2, 3, 16, 32, dtype=torch.float64)
    fn = lambda: sum(weighted_sum(f, seed + k) for k, f in enumerate(net(x)))
    return grad_error(fn, module_tensors(net, x), seed=seed)


def depth_seg_head_grad_error(seed):
    torch.manual_seed(seed)
    head = DepthSegHead(4, 6, 5).double()
    x = torch.randn(2, 4, 2, 4, dtype=torch.float64)

    def fn():
        out = head(x)
        return weighted_sum(out["depth"], seed) + weighted_sum(out["seg"], seed + 1) + weighted_sum(out["depth_logits"], seed + 2)

    return grad_error(fn, module_tensors(head, x), seed=seed)


def lift_splat_grad_error(seed):
    rig = small_rig()
    cells = _cells_for(rig, 2, 4)
    g = torch.Generator().manual_seed(seed)
    feat = torch.randn(1, 4, 3, 2, 4, generator=g, dtype=torch.float64)
    depth = torch.rand(1, 4, len(BINS), 2, 4, generator=g, dtype=torch.float64)
    seg = torch.rand(1, 4, 2, 2, 4, generator=g, dtype=torch.float64)
    fn = lambda: weighted_sum(lift_splat_bev(feat, depth, seg, cells=cells), seed)
    return grad_error(fn, [feat, depth, seg], n_dirs=24, seed=seed)


def lidar_bev_grad_error(seed):
    torch.manual_seed(seed)
    net = LidarBEV(4).double()
    gen = np.random.default_rng(seed)
    pts = np.concatenate([gen.uniform(-7, 29, (40, 1)), gen.uniform(-18, 18, (40, 1)), gen.uniform(0.1, 3.5, (40, 1)),
                          gen.integers(0, 2, (40, 1))], axis=1)
    x = torch.tensor(pts[None])
    fn = lambda: weighted_sum(net(x), seed)
    return grad_error(fn, module_tensors(net, x), seed=seed)


def fusion_and_state_grad_error(seed):
    torch.manual_seed(seed)
    fuse = FuseBEV(3, 2, 6).double()
    state = StateEncoder(6).double()
    a, b, c = (torch.randn(1, k, 21, 21, dtype=torch.float64) for k in (3, 3, 2))
    meas = torch.randn(1, 9, dtype=torch.float64)

    def fn():
        h_env, h_mst, speed, value = state(fuse(a, b, c), meas)
        return weighted_sum(h_env, seed) + weighted_sum(h_mst, seed + 1) + speed.sum() + 0.01 * value.sum()

    tensors = [a, b, c, meas, *fuse.parameters(), *state.parameters()]
    return grad_error(fn, tensors, n_dirs=8, seed=seed)


def _cell_of(x, y):
    """Independent metric -> cell map built from the grid extent."""
    res = 38.4 / 21
    i = math.floor((30.4 - x) / res)
    j = math.floor((y + 19.2) / res)
    return (i, j) if 0 <= i < 21 and 0 <= j < 21 else None


def _brute_force_splat(feat, depth, seg, rig, fh, fw, bins):
    B, N, C = feat.shape[:3]
    K = seg.shape[2]
    out = np.zeros((B, C + K, 21, 21))
    for n, cam in enumerate(rig):
        pts = unproject_pixels(cam, bins, fh, fw)
        for d in range(len(bins)):
            for h in range(fh):
                for w in range(fw):
                    cell = _cell_of(pts[d, h, w, 0], pts[d, h, w, 1])
                    if cell is None:
                        continue
                    vec = np.concatenate([feat[:, n, :, h, w], seg[:, n, :, h, w]], axis=1)
                    out[:, :, cell[0], cell[1]] += depth[:, n, d, h, w][:, None] * vec
    return out


@pytest.mark.parametrize("seed", range(3))
def test_lift_splat_matches_brute_force(seed):
    rig = default_rig()
    bins = tuple(depth_bin_centers())
    fh, fw = 8, 16
    gen = np.random.default_rng(seed)
    feat = gen.normal(size=(2, 4, 3, fh, fw))
    logits = gen.normal(size=(2, 4, len(bins), fh, fw))
    depth = np.exp(logits) / np.exp(logits).sum(2, keepdims=True)
    seg = gen.uniform(size=(2, 4, 2, fh, fw))
    frustums = np.stack([unproject_pixels(c, bins, fh, fw) for c in rig])
    got = lift_splat_bev(torch.tensor(feat), torch.tensor(depth), torch.tensor(seg), frustums=frustums).numpy()
    want = _brute_force_splat(feat, depth, seg, rig, fh, fw, bins)
    scale = np.abs(want).max()
    assert np.abs(got - want).max() <= 1e-6 * scale


def test_lift_splat_one_hot_counts_points():
    rig = default_rig()
    bins = tuple(depth_bin_centers())
    d = 9
    depth = torch.zeros(1, 4, len(bins), 8, 16, dtype=torch.float64)
    depth[:, :, d] = 1.0
    out = lift_splat_bev(torch.ones(1, 4, 1, 8, 16, dtype=torch.float64), depth, None, frustums=np.stack(
        [unproject_pixels(c, bins, 8, 16) for c in rig]))
    counts = np.zeros((21, 21))
    for cam in rig:
        pts = unproject_pixels(cam, bins, 8, 16)[d].reshape(-1, 3)
        for x, y, _ in pts:
            cell = _cell_of(x, y)
            if cell:
                counts[cell] += 1
    assert np.array_equal(out[0, 0].numpy(), counts)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lift_splat_conserves_in_grid_depth_mass(seed):
    rig = small_rig()
    cells = _cells_for(rig, 2, 4)
    g = torch.Generator().manual_seed(seed)
    depth = torch.rand(1, 4, len(BINS), 2, 4, generator=g, dtype=torch.float64)
    depth = depth / depth.sum(2, keepdim=True)
    out = lift_splat_bev(torch.ones(1, 4, 1, 2, 4, dtype=torch.float64), depth, None, cells=cells)
    inside = torch.as_tensor(cells >= 0)
    assert torch.allclose(out.sum(), (depth * inside).sum())
    assert out.sum() <= 4 * 2 * 4 + 1e-9 and (out >= 0).all()


def test_lift_splat_rejects_mismatched_template():
    rig = small_rig()
    cells = _cells_for(rig, 2, 4)
    with pytest.raises(ShapeError):
        lift_splat_bev(torch.ones(1, 4, 1, 2, 4), torch.ones(1, 4, len(BINS) + 1, 2, 4), None, cells=cells)
    with pytest.raises(ShapeError):
        lift_splat_bev(torch.ones(1, 4, 1, 2, 4), torch.ones(1, 4, len(BINS), 2, 5), None, cells=cells)


def test_voxelize_matches_per_point_oracle():
    gen = np.random.default_rng(0)
    pts = np.concatenate([gen.uniform(-10, 32, (200, 1)), gen.uniform(-20, 20, (200, 1)), gen.uniform(0, 4, (200, 1)),
                          gen.integers(0, 2, (200, 1))], axis=1)
    out = voxelize(torch.tensor(pts[None])).numpy()[0]
    sums = {}
    for p in pts:
        cell = _cell_of(p[0], p[1])
        if cell is None:
            continue
        slab = int(p[2] >= 1.0) + int(p[2] >= 2.0) + int(p[2] >= 3.0)
        sums.setdefault((slab, *cell), []).append(p)
    expected = np.zeros((20, 21, 21))
    for (slab, i, j), members in sums.items():
        m = np.mean(members, axis=0)
        expected[slab * 5 : slab * 5 + 4, i, j] = m
        expected[slab * 5 + 4, i, j] = len(members)
    assert np.allclose(out, expected, atol=1e-12)


def test_voxelize_empty_and_padding():
    assert voxelize(torch.zeros(2, 0, 4)).abs().sum() == 0
    pts, mask = pad_clouds([np.ones((3, 4), np.float32), np.zeros((0, 4), np.float32)])
    out = voxelize(torch.tensor(pts), torch.tensor(mask))
    assert out[1].abs().sum() == 0 and out[0].abs().sum() > 0
    net = LidarBEV(4)
    assert net(torch.tensor(pts), torch.tensor(mask))[1].abs().sum() == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_voxelize_permutation_invariant(seed):
    gen = np.random.default_rng(seed)
    pts = np.concatenate([gen.uniform(-8, 30, (50, 2)), gen.uniform(0, 4, (50, 1)), gen.integers(0, 2, (50, 1))], axis=1)
    perm = gen.permutation(50)
    a = voxelize(torch.tensor(pts[None]))
    b = voxelize(torch.tensor(pts[perm][None]))
    assert torch.allclose(a, b, atol=1e-12)


def _batch(cfg, B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    imgs = lambda: (torch.rand(B, 4, cfg.c_in, cfg.img_h, cfg.img_w, generator=g) > 0.7).float()
    pts, mask = pad_clouds([np.random.default_rng(seed + b).uniform(0, 3, (30, 4)).astype(np.float32) for b in range(B)])
    return {"images": imgs(), "prev_images": imgs(), "lidar": torch.tensor(pts), "lidar_mask": torch.tensor(mask),
            "meas": torch.randn(B, 9, generator=g), "motion": np.tile([-1.0, 0.0, 0.0], (B, 1))}


def test_encoder_shapes_and_determinism():
    cfg = desk_profile().model
    torch.manual_seed(0)
    enc = Encoder(cfg).eval()
    batch = _batch(cfg)
    with torch.no_grad():
        a, b = enc(batch), enc(batch)
    assert a.bev.shape == (2, cfg.hidden, 21, 21)
    assert a.cam_bev.shape == (2, cfg.img_channels + cfg.n_cls, 21, 21)
    assert a.depth.shape == (2, 4, cfg.depth_bins, 8, 16)
    assert a.distill.shape == (2, cfg.teacher_channels, 21, 21)
    assert a.h_env.shape == (2, cfg.hidden) and a.speed.shape == (2,)
    assert torch.equal(a.bev, b.bev)
    assert torch.allclose(a.depth.sum(2), torch.ones(1))


def test_fuse_rejects_wrong_channels():
    fuse = FuseBEV(3, 2, 4)
    with pytest.raises(ShapeError):
        fuse(torch.zeros(1, 4, 21, 21), torch.zeros(1, 3, 21, 21), torch.zeros(1, 2, 21, 21))
    with pytest.raises(ShapeError):
        Backbone(8, 4)(torch.zeros(1, 8, 32, 32))


def test_encoder_gradients_reach_backbone():
    cfg = desk_profile().model
    torch.manual_seed(0)
    enc = Encoder(cfg)
    out = enc(_batch(cfg))
    (out.h_env.sum() + out.distill.sum()).backward()
    assert enc.backbone.stem[0].weight.grad.abs().sum() > 0
    assert enc.lidar.net[0].weight.grad.abs().sum() > 0


GRAD_CASES = {
    "backbone": backbone_grad_error,
    "depth_seg_head": depth_seg_head_grad_error,
    "lift_splat": lift_splat_grad_error,
    "lidar_bev": lidar_bev_grad_error,
    "fusion_and_state": fusion_and_state_grad_error,
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name, seed):
    assert GRAD_CASES[name](seed) < TOL
