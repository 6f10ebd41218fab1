"""Warping tests: pinhole reprojection, softmax splatting, backward warping,
and the block-matching fallback, each checked against independent loop oracles
or closed forms."""

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from viewfix import (
    CameraIntrinsics,
    CameraPose,
    DepthPose,
    Disparity,
    Flow,
    FlowField,
    FlowEstimationError,
    Image,
    backward_warp,
    disparity_to_flow,
    estimate_flow,
    pre_align,
    project_points,
    register_flow_estimator,
    relative_pose,
    set_default_flow_estimator,
    softmax_splat,
    to_tensor,
)
from viewfix.warp import FLOW_SENTINEL, bilinear_sample, gather_from_grid, splat_to_grid


def splat_oracle(values, flow, importance, temperature, src_valid=None):
    """Per-pixel accumulation loop: bilinear 2x2 footprint times exp(s/T)."""
    c, h, w = values.shape
    if src_valid is None:
        src_valid = np.ones((h, w), dtype=bool)
    num = np.zeros((c, h, w))
    den = np.zeros((h, w))
    smax = importance[src_valid].max() if src_valid.any() else 0.0
    for y in range(h):
        for x in range(w):
            if not src_valid[y, x]:
                continue
            tx = x + flow[y, x, 0]
            ty = y + flow[y, x, 1]
            x0 = int(np.floor(tx))
            y0 = int(np.floor(ty))
            fx = tx - x0
            fy = ty - y0
            wgt = np.exp((importance[y, x] - smax) / temperature)
            corners = (
                (x0, y0, (1 - fx) * (1 - fy)),
                (x0 + 1, y0, fx * (1 - fy)),
                (x0, y0 + 1, (1 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            )
            for qx, qy, bw in corners:
                if 0 <= qx < w and 0 <= qy < h:
                    den[qy, qx] += bw * wgt
                    num[:, qy, qx] += values[:, y, x] * bw * wgt
    covered = den > 0
    out = np.where(covered, num / np.where(covered, den, 1.0), 0.0)
    return out, covered


def reproject_oracle(depth, intr, pose):
    """Scalar unproject/transform/reproject loop for one pixel at a time."""
    h, w = depth.shape
    flow = np.full((h, w, 2), FLOW_SENTINEL)
    for y in range(h):
        for x in range(w):
            z = depth[y, x]
            if z <= 0:
                continue
            p = np.array([(x - intr.cx) / intr.fx * z, (y - intr.cy) / intr.fy * z, z])
            q = pose.rotation.T @ (p - pose.translation)
            if q[2] <= 1e-12:
                continue
            flow[y, x, 0] = intr.fx * q[0] / q[2] + intr.cx - x
            flow[y, x, 1] = intr.fy * q[1] / q[2] + intr.cy - y
    return flow


# --- pinhole reprojection ------------------------------------------------------


def test_project_points_matches_per_pixel_oracle():
    rng = np.random.default_rng(7)
    intr = CameraIntrinsics(fx=40.0, fy=36.0, cx=7.5, cy=5.5)
    for trial in range(5):
        depth = rng.uniform(0.5, 5.0, size=(12, 16))
        depth[rng.uniform(size=depth.shape) < 0.1] = 0.0  # dropped pixels
        rot = Rotation.from_rotvec(rng.uniform(-0.1, 0.1, size=3)).as_matrix()
        pose = CameraPose(rotation=rot, translation=rng.uniform(-0.2, 0.2, size=3))
        got = project_points(depth, intr, pose).data
        want = reproject_oracle(depth, intr, pose)
        assert np.allclose(got, want, atol=1e-10)


def test_lateral_translation_closed_form():
    z = 4.0
    fx = 64.0
    t = 0.75
    depth = np.full((9, 11), z)
    intr = CameraIntrinsics(fx=fx, fy=fx, cx=5.0, cy=4.0)
    pose = CameraPose(rotation=np.eye(3), translation=np.array([t, 0.0, 0.0]))
    flow = project_points(depth, intr, pose).data
    assert np.allclose(flow[..., 0], -fx * t / z, atol=1e-9)
    assert np.allclose(flow[..., 1], 0.0, atol=1e-9)


def test_identity_pose_gives_zero_flow():
    depth = np.random.default_rng(0).uniform(1.0, 3.0, size=(6, 7))
    intr = CameraIntrinsics(fx=30.0, fy=30.0, cx=3.0, cy=2.5)
    pose = CameraPose(rotation=np.eye(3), translation=np.zeros(3))
    flow = project_points(depth, intr, pose).data
    assert np.allclose(flow, 0.0, atol=1e-12)


def test_project_points_sentinel_for_bad_geometry():
    intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=1.0, cy=1.0)
    pose = CameraPose(rotation=np.eye(3), translation=np.array([0.0, 0.0, 2.0]))
    depth = np.array([[1.0, 0.0], [-3.0, 5.0]])
    flow = project_points(depth, intr, pose).data
    # depth 1 ends up behind the moved camera (z' = 1 - 2 < 0)
    assert flow[0, 0, 0] == FLOW_SENTINEL
    assert flow[0, 1, 0] == FLOW_SENTINEL  # zero depth
    assert flow[1, 0, 0] == FLOW_SENTINEL  # negative depth
    assert flow[1, 1, 0] != FLOW_SENTINEL  # z' = 3 still in front


def test_relative_pose_identity():
    w2c = np.hstack([np.eye(3), np.array([[0.3], [-0.2], [1.0]])])
    pose = relative_pose(w2c, w2c)
    assert np.allclose(pose.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(pose.translation, 0.0, atol=1e-12)


def test_relative_pose_maps_points_consistently():
    rng = np.random.default_rng(3)
    for _ in range(5):
        ra = Rotation.from_rotvec(rng.uniform(-1, 1, size=3)).as_matrix()
        rb = Rotation.from_rotvec(rng.uniform(-1, 1, size=3)).as_matrix()
        ta = rng.uniform(-1, 1, size=3)
        tb = rng.uniform(-1, 1, size=3)
        w2c_a = np.hstack([ra, ta[:, None]])
        w2c_b = np.hstack([rb, tb[:, None]])
        pose = relative_pose(w2c_a, w2c_b)
        for _ in range(4):
            p_world = rng.uniform(-2, 2, size=3)
            p_src = ra @ p_world + ta
            p_tgt = rb @ p_world + tb
            assert np.allclose(pose.rotation.T @ (p_src - pose.translation), p_tgt, atol=1e-10)


def test_pose_validation_rejects_bad_rotations():
    with pytest.raises(ValueError):
        CameraPose(rotation=np.eye(3) * 2.0, translation=np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(rotation=np.diag([1.0, 1.0, -1.0]), translation=np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(rotation=np.full((3, 3), np.nan), translation=np.zeros(3))
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)


def test_flow_field_rejects_nan_and_bad_shape():
    with pytest.raises(ValueError):
        FlowField(np.full((4, 4, 2), np.nan))
    with pytest.raises(ValueError):
        FlowField(np.zeros((4, 4, 3)))


def test_disparity_to_flow_sign():
    disp = np.array([[1.5, -2.0], [0.0, 3.0]])
    flow = disparity_to_flow(Disparity(disp)).data
    assert np.array_equal(flow[..., 0], -disp)
    assert np.array_equal(flow[..., 1], np.zeros_like(disp))


# --- softmax splatting ---------------------------------------------------------


def test_splat_identity_at_zero_flow_is_exact():
    rng = np.random.default_rng(11)
    img = Image(rng.uniform(size=(8, 9, 3)))
    flow = FlowField(np.zeros((8, 9, 2)))
    out = softmax_splat(img, flow, np.zeros((8, 9)))
    assert np.array_equal(out.data, img.data)
    assert out.valid.all()


def test_splat_identity_with_random_importance():
    rng = np.random.default_rng(12)
    img = Image(rng.uniform(size=(7, 6, 1)))
    flow = FlowField(np.zeros((7, 6, 2)))
    out = softmax_splat(img, flow, rng.uniform(size=(7, 6)), temperature=0.5)
    assert np.allclose(out.data, img.data, atol=1e-12)


def test_splat_matches_loop_oracle():
    rng = np.random.default_rng(100)
    for trial in range(22):
        h = int(rng.integers(4, 17))
        w = int(rng.integers(4, 17))
        c = int(rng.integers(1, 4))
        values = rng.uniform(size=(c, h, w))
        flow = rng.uniform(-3.0, 3.0, size=(h, w, 2))
        if trial % 3 == 0:
            flow[rng.uniform(size=(h, w)) < 0.2] = FLOW_SENTINEL  # dropped mass
        importance = rng.uniform(-1.0, 1.0, size=(h, w))
        temperature = float(rng.uniform(0.3, 3.0))
        src_valid = None
        if trial % 2 == 0:
            src_valid = rng.uniform(size=(h, w)) > 0.15
        out, covered = splat_to_grid(
            torch.from_numpy(values),
            torch.from_numpy(flow),
            torch.from_numpy(importance),
            temperature,
            None if src_valid is None else torch.from_numpy(src_valid),
        )
        want, want_cov = splat_oracle(values, flow, importance, temperature, src_valid)
        assert np.array_equal(covered.numpy(), want_cov)
        assert np.allclose(out.numpy(), want, atol=1e-9)


def test_splat_two_pixel_collision_blend():
    # pixels (0,0) and (0,1) both land exactly on (0,2); softmax weights 1 and 3
    values = np.array([[[0.9, 0.4, 0.0]]])
    flow = np.zeros((1, 3, 2))
    flow[0, 0, 0] = 2.0
    flow[0, 1, 0] = 1.0
    flow[0, 2, 0] = FLOW_SENTINEL
    importance = np.array([[0.0, np.log(3.0), 0.0]])
    out, covered = splat_to_grid(
        torch.from_numpy(values), torch.from_numpy(flow), torch.from_numpy(importance), 1.0
    )
    want = (0.9 * 1.0 + 0.4 * 3.0) / 4.0
    assert covered[0, 2] and not covered[0, 0] and not covered[0, 1]
    assert abs(out[0, 0, 2].item() - want) < 1e-12


def test_splat_constant_image_stays_constant():
    rng = np.random.default_rng(5)
    img = Image(np.full((10, 12, 3), 0.37))
    flow = FlowField(rng.uniform(-4, 4, size=(10, 12, 2)))
    out = softmax_splat(img, flow, rng.uniform(size=(10, 12)), temperature=0.7)
    assert np.allclose(out.data[out.valid], 0.37, atol=1e-12)


def test_splat_temperature_limits():
    values = np.array([[[0.9, 0.1, 0.0]]])
    flow = np.zeros((1, 3, 2))
    flow[0, 0, 0] = 2.0
    flow[0, 1, 0] = 1.0
    flow[0, 2, 0] = FLOW_SENTINEL
    importance = np.array([[1.0, 0.0, 0.0]])
    args = (torch.from_numpy(values), torch.from_numpy(flow), torch.from_numpy(importance))
    hot, _ = splat_to_grid(*args, 1e-2)  # winner takes all
    assert abs(hot[0, 0, 2].item() - 0.9) < 1e-9
    flat, _ = splat_to_grid(*args, 1e6)  # plain average
    assert abs(flat[0, 0, 2].item() - 0.5) < 1e-4


def test_splat_all_mass_out_of_bounds():
    img = Image(np.ones((3, 3, 1)) * 0.5)
    flow = FlowField(np.full((3, 3, 2), 50.0))
    out = softmax_splat(img, flow, np.zeros((3, 3)))
    assert not out.valid.any()
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_splat_ignores_invalid_sources():
    values = np.array([[[0.2, 0.8]]])
    flow = np.zeros((1, 2, 2))
    flow[0, 1, 0] = -1.0  # pixel 1 also lands on (0,0)
    importance = np.array([[0.0, 100.0]])  # huge, but the pixel is invalid
    src_valid = torch.tensor([[True, False]])
    out, covered = splat_to_grid(
        torch.from_numpy(values), torch.from_numpy(flow), torch.from_numpy(importance),
        1.0, src_valid,
    )
    assert covered[0, 0]
    assert abs(out[0, 0, 0].item() - 0.2) < 1e-12


def test_splat_input_validation():
    v = torch.zeros(1, 4, 4, dtype=torch.float64)
    f = torch.zeros(4, 4, 2, dtype=torch.float64)
    s = torch.zeros(4, 4, dtype=torch.float64)
    with pytest.raises(ValueError):
        splat_to_grid(v, f, s, 0.0)
    with pytest.raises(ValueError):
        splat_to_grid(v, f, s * float("nan"), 1.0)
    with pytest.raises(ValueError):
        splat_to_grid(v, torch.full_like(f, float("inf")), s, 1.0)
    with pytest.raises(ValueError):
        splat_to_grid(v, torch.zeros(3, 4, 2, dtype=torch.float64), s, 1.0)
    with pytest.raises(ValueError):
        softmax_splat(Image(np.zeros((4, 4, 3))), FlowField(np.zeros((5, 4, 2))), np.zeros((5, 4)))


def test_splat_gradcheck_values_and_importance():
    rng = np.random.default_rng(21)
    flow = torch.from_numpy(rng.uniform(-1.5, 1.5, size=(5, 5, 2)))
    values = torch.from_numpy(rng.uniform(size=(2, 5, 5))).requires_grad_(True)
    importance = torch.from_numpy(rng.uniform(size=(5, 5))).requires_grad_(True)

    def run(v, s):
        return splat_to_grid(v, flow, s, 0.8)[0]

    assert torch.autograd.gradcheck(run, (values, importance), eps=1e-6, atol=1e-5)


# --- backward warping ----------------------------------------------------------


def test_backward_warp_integer_shift():
    rng = np.random.default_rng(8)
    img = Image(rng.uniform(size=(6, 8, 3)))
    flow = np.zeros((6, 8, 2))
    flow[..., 0] = 2.0  # out(p) = src(p + 2 e_x)
    out = backward_warp(img, FlowField(flow))
    assert np.array_equal(out.data[:, :6], img.data[:, 2:])
    assert out.valid[:, :6].all()
    assert not out.valid[:, 6:].any()
    assert np.array_equal(out.data[:, 6:], np.zeros_like(out.data[:, 6:]))


def test_backward_warp_half_pixel_average():
    img = Image(np.arange(12, dtype=np.float64).reshape(3, 4, 1) / 12.0)
    flow = np.zeros((3, 4, 2))
    flow[..., 0] = 0.5
    out = backward_warp(img, FlowField(flow))
    want = (img.data[:, :3] + img.data[:, 1:]) / 2.0
    assert np.allclose(out.data[:, :3], want, atol=1e-12)
    assert not out.valid[:, 3].any()


def test_backward_warp_respects_source_validity():
    data = np.ones((4, 4, 1)) * 0.5
    valid = np.ones((4, 4), dtype=bool)
    valid[1, 2] = False
    img = Image(data, valid)
    flow = np.zeros((4, 4, 2))
    flow[..., 0] = 0.5  # columns 1 and 2 interpolate across the hole
    out = backward_warp(img, FlowField(flow))
    assert not out.valid[1, 1] and not out.valid[1, 2]
    assert out.valid[0, 1] and out.valid[2, 2]
    assert out.data[1, 1, 0] == 0.0


def test_splat_then_backward_roundtrip_integer_translation():
    rng = np.random.default_rng(30)
    img = Image(rng.uniform(size=(12, 14, 3)))
    flow = np.zeros((12, 14, 2))
    flow[..., 0] = 3.0
    flow[..., 1] = -2.0
    warped = softmax_splat(img, FlowField(flow), np.zeros((12, 14)))
    back = backward_warp(warped, FlowField(flow))
    inner = back.valid
    assert inner[2:, :11].all()
    assert np.allclose(back.data[inner], img.data[inner], atol=1e-12)


def test_bilinear_sample_exact_and_oob():
    vals = torch.arange(12, dtype=torch.float64).reshape(1, 3, 4)
    px = torch.tensor([[0.0, 1.5, -1.0]])
    py = torch.tensor([[0.0, 1.0, 0.0]])
    out, inb = bilinear_sample(vals, px, py)
    assert out[0, 0, 0].item() == 0.0
    assert out[0, 0, 1].item() == (5.0 + 6.0) / 2.0
    assert out[0, 0, 2].item() == 0.0
    assert inb.tolist() == [[True, True, False]]


# --- block matching fallback ---------------------------------------------------


def test_block_match_recovers_integer_shifts():
    rng = np.random.default_rng(0)
    for seed, (dx, dy) in enumerate([(-3, -2), (4, 1), (0, 3), (-2, 4)]):
        big = np.random.default_rng(seed).uniform(size=(96, 120))
        a = big[12:76, 12:108]
        c = big[12 + dy:76 + dy, 12 + dx:108 + dx]
        flow = estimate_flow(Image(a[:, :, None]), Image(c[:, :, None])).data
        # borders cannot match (content leaves the frame); the interior must
        # clear |shift| + block radius + median radius
        m = max(abs(dx), abs(dy)) + 7
        err = np.hypot(flow[m:-m, m:-m, 0] + dx, flow[m:-m, m:-m, 1] + dy)
        assert err.max() <= 0.5, f"shift ({dx},{dy}): max interior error {err.max()}"


def test_block_match_textureless_returns_zero():
    img = Image(np.full((48, 48, 1), 0.5))
    flow = estimate_flow(img, img).data
    assert np.array_equal(flow, np.zeros_like(flow))


def test_block_match_tie_break_prefers_small_displacement():
    # period-4 stripes: shifting by 4 is indistinguishable from not moving,
    # so the matcher must report the smaller displacement
    stripes = (np.arange(64) % 4 < 2).astype(np.float64)
    img = np.tile(stripes, (48, 1))
    a = Image(img[:, :, None])
    flow = estimate_flow(a, a).data
    assert np.array_equal(flow, np.zeros_like(flow))


def test_estimate_flow_registry_and_errors():
    calls = []

    def fake(reference, target):
        calls.append(1)
        return np.zeros(reference.data.shape[:2] + (2,))

    def broken(reference, target):
        raise RuntimeError("no backend")

    def wrong_shape(reference, target):
        return np.zeros((2, 2, 2))

    img = Image(np.random.default_rng(1).uniform(size=(8, 8, 1)))
    register_flow_estimator("fake", fake)
    register_flow_estimator("broken", broken)
    register_flow_estimator("wrong", wrong_shape)
    try:
        out = estimate_flow(img, img, estimator="fake")
        assert calls and np.array_equal(out.data, np.zeros((8, 8, 2)))
        set_default_flow_estimator("fake")
        estimate_flow(img, img)
        assert len(calls) == 2
        with pytest.raises(FlowEstimationError):
            estimate_flow(img, img, estimator="broken")
        with pytest.raises(FlowEstimationError):
            estimate_flow(img, img, estimator="wrong")
        with pytest.raises(KeyError):
            estimate_flow(img, img, estimator="unregistered")
        with pytest.raises(KeyError):
            set_default_flow_estimator("unregistered")
        with pytest.raises(ValueError):
            estimate_flow(img, Image(np.zeros((4, 4, 1))))
    finally:
        set_default_flow_estimator(None)


# --- pre-alignment dispatch ----------------------------------------------------


def test_pre_align_depth_pose_matches_manual_pipeline():
    rng = np.random.default_rng(9)
    ref = Image(rng.uniform(size=(10, 12, 3)))
    depth = rng.uniform(1.0, 3.0, size=(10, 12))
    intr = CameraIntrinsics(fx=24.0, fy=24.0, cx=5.5, cy=4.5)
    pose = CameraPose(rotation=np.eye(3), translation=np.array([0.05, -0.02, 0.0]))
    tform = DepthPose(depth=depth, intrinsics=intr, pose=pose)
    out = pre_align(ref, tform, temperature=0.8)
    want = softmax_splat(ref, project_points(depth, intr, pose), -depth, temperature=0.8)
    assert np.array_equal(out.data, want.data)
    assert np.array_equal(out.valid, want.valid)


def test_pre_align_disparity_matches_manual_pipeline():
    rng = np.random.default_rng(10)
    ref = Image(rng.uniform(size=(6, 9, 3)))
    disp = rng.uniform(-2.0, 2.0, size=(6, 9))
    out = pre_align(ref, Disparity(disp), temperature=0.5)
    want = softmax_splat(ref, disparity_to_flow(disp), np.abs(disp), temperature=0.5)
    assert np.array_equal(out.data, want.data)


def test_pre_align_depth_order_near_occludes_far():
    # pixels 0 (depth 1) and 1 (depth 2) both land on pixel 2; nearer wins
    ref = Image(np.array([[[0.9], [0.3], [0.5]]]))
    depth = np.array([[1.0, 2.0, 0.0]])
    fx = 1.0
    intr = CameraIntrinsics(fx=fx, fy=fx, cx=0.0, cy=0.0)
    pose = CameraPose(rotation=np.eye(3), translation=np.array([-2.0, 0.0, 0.0]))
    out = pre_align(ref, DepthPose(depth=depth, intrinsics=intr, pose=pose), temperature=1e-3)
    assert out.valid[0, 2]
    assert abs(out.data[0, 2, 0] - 0.9) < 1e-9


def test_pre_align_flow_photometric_importance():
    # two reference pixels collide; the one matching the degraded view wins
    ref = Image(np.array([[[0.9], [0.1], [0.2]]]))
    degraded = Image(np.array([[[0.0], [0.0], [0.1]]]))  # target shows ~0.1
    flow = np.zeros((1, 3, 2))
    flow[0, 0, 0] = 2.0
    flow[0, 1, 0] = 1.0
    flow[0, 2, 0] = FLOW_SENTINEL
    out = pre_align(ref, Flow(FlowField(flow)), degraded=degraded, temperature=1e-3)
    assert abs(out.data[0, 2, 0] - 0.1) < 1e-9


def test_pre_align_flow_uniform_importance_without_degraded():
    ref = Image(np.array([[[0.9], [0.1], [0.2]]]))
    flow = np.zeros((1, 3, 2))
    flow[0, 0, 0] = 2.0
    flow[0, 1, 0] = 1.0
    flow[0, 2, 0] = FLOW_SENTINEL
    out = pre_align(ref, Flow(FlowField(flow)))
    assert abs(out.data[0, 2, 0] - 0.5) < 1e-12  # equal weights average


def test_pre_align_rejects_mismatched_grids():
    ref = Image(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        pre_align(ref, Disparity(np.zeros((5, 5))))
    with pytest.raises(TypeError):
        pre_align(ref, "not a transform")
