import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from specdiff.registration import (
    PoseSim2,
    angle_diff_deg,
    bins_to_pose,
    estimate_rot_scale,
    estimate_translation,
    register,
    registration_params,
    warp_sim2,
)
from specdiff.simgen import GenConfig, gen_template
from specdiff.spectral import LogPolarParams, log_polar


def scene(seed, n=256):
    return gen_template(seed, GenConfig(image_size=n, n_shapes=(10, 15)))


def test_bins_to_pose_center_is_identity():
    lp = LogPolarParams().resolve((256, 256))
    theta, scale = bins_to_pose(128, 128, lp)
    assert theta == pytest.approx(0.0) and scale == pytest.approx(1.0)


def test_bins_to_pose_quarter_turn():
    lp = LogPolarParams().resolve((256, 256))
    theta, scale = bins_to_pose(128, 128 + 64, lp)
    assert math.degrees(theta) == pytest.approx(90.0)
    assert scale == pytest.approx(1.0)


def test_bins_to_pose_row_shift_matches_grid_ratio():
    lp = LogPolarParams(r_min=1.0, r_max=100.0).resolve((256, 256))
    _, scale = bins_to_pose(128 + 7, 128, lp)
    # ratio between log-polar rows, read from the sampling grid itself
    r = lp.radii()
    assert scale == pytest.approx(r[7] / r[0])


def test_bins_to_pose_out_of_range():
    lp = LogPolarParams().resolve((64, 64))
    with pytest.raises(ValueError):
        bins_to_pose(256, 0, lp)
    with pytest.raises(ValueError):
        bins_to_pose(0, -1, lp)


def test_decode_inverts_log_polar_encoding():
    # an input rotated by d degrees rolls the log-polar columns by d * A / 360
    lp = LogPolarParams().resolve((128, 128))
    for deg in (0.0, 12.5, 90.0, 200.0):
        col = (128 + deg * lp.angular_bins / 360.0) % lp.angular_bins
        theta, _ = bins_to_pose(128, col, lp)
        assert abs(angle_diff_deg(math.degrees(theta), deg)) < 360 / lp.angular_bins


def test_pose_normalises_theta_and_rejects_bad_scale():
    assert PoseSim2(-math.pi / 2).theta == pytest.approx(1.5 * math.pi)
    with pytest.raises(ValueError):
        PoseSim2(0, 0.0)


def test_pose_dict_round_trip():
    p = PoseSim2(1.2, 0.9, 3.5, -7.25)
    q = PoseSim2.from_dict(p.to_dict())
    assert q.theta == pytest.approx(p.theta, abs=1e-15) and (q.scale, q.tx, q.ty) == (p.scale, p.tx, p.ty)


def test_warp_identity_exact():
    img = np.random.default_rng(0).random((32, 32))
    assert np.allclose(warp_sim2(img, PoseSim2()), img, atol=1e-6)


def test_warp_translation_moves_impulse():
    img = np.zeros((32, 32))
    img[10, 12] = 1.0
    out = warp_sim2(img, PoseSim2(0, 1, 5, 0))
    assert np.unravel_index(np.argmax(out), out.shape) == (10, 17)
    assert out.max() == pytest.approx(1.0)


def test_warp_rotation_direction():
    # +90 degrees takes +column offsets to +row offsets
    img = np.zeros((33, 33))
    img[16, 26] = 1.0
    out = warp_sim2(img, PoseSim2(math.pi / 2))
    assert np.unravel_index(np.argmax(out), out.shape) == (26, 16)


def test_warp_round_trip_interior():
    img = ndimage.gaussian_filter(scene(1, 128), 1.0)
    pose = PoseSim2(0.7, 1.1, 6.0, -4.0)
    back = warp_sim2(warp_sim2(img, pose), pose.inverse())
    inner = (slice(32, 96), slice(32, 96))
    assert np.max(np.abs(back[inner] - img[inner])) <= 0.1


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0.5, 2.0), st.floats(-20, 20), st.floats(-20, 20))
def test_warp_preserves_unit_range(theta, scale, tx, ty):
    img = np.random.default_rng(0).random((16, 16))
    out = warp_sim2(img, PoseSim2(theta, scale, tx, ty))
    assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-12


def test_warp_is_differentiable_in_values():
    img = torch.rand(16, 16, dtype=torch.float64, requires_grad=True)
    warp_sim2(img, PoseSim2(0.3, 1.1, 1.0, 2.0)).sum().backward()
    assert torch.isfinite(img.grad).all() and img.grad.abs().sum() > 0


def test_warp_multichannel():
    img = np.random.default_rng(1).random((16, 16, 3))
    out = warp_sim2(img, PoseSim2(0.2))
    assert out.shape == img.shape
    assert np.allclose(out[..., 1], warp_sim2(img[..., 1], PoseSim2(0.2)))


def test_rot_scale_self():
    img = scene(2)
    theta, scale, m = estimate_rot_scale(img, img)
    lp = registration_params(img.shape)
    assert abs(angle_diff_deg(math.degrees(theta), 0.0)) < 360 / lp.angular_bins
    assert scale == pytest.approx(1.0, rel=0.01)
    assert m.sum() == pytest.approx(1.0)


def test_rot_scale_recovers_30_degrees_1_1():
    img = scene(3)
    src = warp_sim2(img, PoseSim2(math.radians(30), 1.1))
    theta, scale, _ = estimate_rot_scale(img, src)
    d = angle_diff_deg(math.degrees(theta), 30.0)
    # magnitude spectra cannot tell theta from theta + 180
    assert min(abs(d), abs(angle_diff_deg(d, 180))) < 1.5
    assert scale == pytest.approx(1.1, abs=0.03)


def test_rot_scale_shape_mismatch_and_power_of_two():
    with pytest.raises(ValueError):
        estimate_rot_scale(np.zeros((64, 64)), np.zeros((64, 32)))
    with pytest.raises(ValueError):
        estimate_rot_scale(np.zeros((48, 48)), np.zeros((48, 48)))


def test_translation_identical_is_zero():
    img = scene(4)
    tx, ty, _ = estimate_translation(img, img)
    assert abs(tx) < 0.1 and abs(ty) < 0.1


def test_translation_recovers_shift():
    img = scene(5)
    tx, ty, _ = estimate_translation(warp_sim2(img, PoseSim2(0, 1, 17, -23)), img)
    assert tx == pytest.approx(17, abs=1) and ty == pytest.approx(-23, abs=1)


def test_translation_shape_mismatch():
    with pytest.raises(ValueError):
        estimate_translation(np.zeros((32, 32)), np.zeros((16, 16)))


def test_register_identity():
    img = scene(6)
    res = register(img, img)
    assert abs(angle_diff_deg(res.pose.theta_deg, 0)) < 1.5
    assert res.pose.scale == pytest.approx(1, rel=0.01)
    assert abs(res.pose.tx) < 0.1 and abs(res.pose.ty) < 0.1
    assert np.allclose(res.aligned_template, img, atol=0.05)
    assert res.translation_map.sum() == pytest.approx(1.0)


def test_register_resolves_half_turn():
    img = scene(7)
    truth = PoseSim2(math.radians(200), 0.9, 12, 30)
    res = register(img, warp_sim2(img, truth))
    assert abs(angle_diff_deg(res.pose.theta_deg, 200)) < 1.5
    assert res.pose.scale == pytest.approx(0.9, rel=0.03)
    assert res.pose.tx == pytest.approx(12, abs=1) and res.pose.ty == pytest.approx(30, abs=1)


def test_register_deterministic():
    img = scene(8)
    src = warp_sim2(img, PoseSim2(1.0, 1.05, 3, 4))
    a, b = register(img, src), register(img, src)
    assert a.pose == b.pose
    assert np.array_equal(a.aligned_template, b.aligned_template)


def test_register_with_defect_matches_clean():
    rng = np.random.default_rng(9)
    fails_clean = fails_defect = 0
    for seed in range(10):
        img = scene(100 + seed)
        truth = PoseSim2(rng.uniform(0, math.pi), rng.uniform(0.8, 1.2), *rng.uniform(-50, 50, 2))
        defected = img.copy()
        # a 20 x 20 patch is 0.6 % of the image
        r, c = rng.integers(80, 160, 2)
        defected[r : r + 20, c : c + 20] = 1.0 - defected[r : r + 20, c : c + 20]
        for src_img, counter in ((img, "clean"), (defected, "defect")):
            p = register(img, warp_sim2(src_img, truth)).pose
            bad = (
                abs(angle_diff_deg(p.theta_deg, truth.theta_deg)) > 1.5
                or abs(p.scale / truth.scale - 1) > 0.03
                or math.hypot(p.tx - truth.tx, p.ty - truth.ty) > 1.0
            )
            if counter == "clean":
                fails_clean += bad
            else:
                fails_defect += bad
    assert fails_defect <= fails_clean + 1


def test_register_rejects_mismatch():
    with pytest.raises(ValueError):
        register(np.zeros((64, 64)), np.zeros((32, 32)))


def test_log_polar_grid_used_for_registration_is_banded():
    lp = registration_params((256, 256))
    assert lp.r_max < 128 and lp.r_min == 1.0
    assert log_polar(np.ones((256, 256)), lp).shape == (256, 256)
