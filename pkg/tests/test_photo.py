import numpy as np
import pytest
from scipy import ndimage

from mclivo.errors import BehindCamera, OutOfBounds, PlaneTooClose
from mclivo.geom import CameraModel, Pose, project, so3_exp
from mclivo.imu import NavState, boxplus
from mclivo.photo import (MigrationEvent, PatchSet, PhotometricCalib,
                          apply_homography, detect_migration, evaluate_patches,
                          homography, intra_residual, migration_count,
                          note_visibility, pixel_homography, relative_transform,
                          stack_dimension, tukey_weights, warp_patch)
from mclivo.voxmap import VisualPoint, make_record


CAM = CameraModel(160.0, 160.0, 159.5, 119.5, 320, 240)


def test_normalize_cases():
    cal = PhotometricCalib.for_camera(CAM, alpha=1.0, beta=(-0.3, 0.1, 0.0))
    assert cal.normalize(0.7, (CAM.cx, CAM.cy)) == pytest.approx(0.7)
    flat = PhotometricCalib.for_camera(CAM, alpha=1.7)
    assert flat.normalize(0.3, (3.0, 200.0)) == pytest.approx(0.51)
    corner = PhotometricCalib.for_camera(CAM)
    assert corner.r2(0.0, 0.0) == pytest.approx(1.0)
    cal2 = PhotometricCalib((2.0), (-0.3, 0.1, 0.0), (0.0, 0.0), 1.0)
    # r^2 = 0.5 at (0.5, 0.5) with unit radius
    assert cal2.normalize(0.5, (0.5, 0.5)) == pytest.approx(0.875)
    img = np.full((240, 320), 0.5)
    n = cal.normalize_image(img)
    assert n[120, 160] > n[0, 0]


def test_relative_transform():
    rng = np.random.default_rng(0)
    A = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    I = Pose.identity()
    T = relative_transform(A, A)
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0, atol=1e-12)
    T = relative_transform(A, I)
    np.testing.assert_allclose(T.R, A.R)
    np.testing.assert_allclose(T.t, A.t)
    for _ in range(20):
        Tj = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        Ti = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        X_w = rng.normal(size=3)
        np.testing.assert_allclose(relative_transform(Tj, Ti).apply(Ti.apply(X_w)),
                                   Tj.apply(X_w), atol=1e-12)


def test_homography_basic():
    np.testing.assert_array_equal(homography(np.eye(3), np.zeros(3), [0, 0, 1], 1.0), np.eye(3))
    R = so3_exp([0.1, -0.2, 0.3])
    np.testing.assert_allclose(homography(R, np.zeros(3), [0, 0, 1], 2.0), R)
    with pytest.raises(PlaneTooClose):
        homography(R, np.zeros(3), [0, 0, 1], 0.01)


def test_homography_reprojection_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        R = so3_exp(rng.normal(scale=0.1, size=3))
        t = rng.normal(scale=0.3, size=3)
        n = rng.normal(size=3)
        n[2] = abs(n[2]) + 1.0
        n /= np.linalg.norm(n)
        d = rng.uniform(1.0, 4.0)
        # points on n.X = d in frame i, in front of both cameras
        for_pts = []
        while len(for_pts) < 50:
            uv = rng.uniform([40, 40], [280, 200])
            ray = np.array([(uv[0] - CAM.cx) / CAM.fx, (uv[1] - CAM.cy) / CAM.fy, 1.0])
            s = d / (n @ ray)
            if s <= 0:
                continue
            X = s * ray
            Xj = R @ X + t
            if Xj[2] > 0.2:
                for_pts.append((uv, project(CAM, Xj)))
        H = pixel_homography(CAM, CAM, homography(R, t, n, d))
        for uv, want in for_pts:
            assert np.abs(apply_homography(H, uv) - want).max() < 0.01
            Hn = homography(R, t, n, d)
            xn = np.array([(uv[0] - CAM.cx) / CAM.fx, (uv[1] - CAM.cy) / CAM.fy, 1.0])
            m = Hn @ xn
            m = m[:2] / m[2]
            w = np.array([(want[0] - CAM.cx) / CAM.fx, (want[1] - CAM.cy) / CAM.fy])
            assert np.abs(m - w).max() < 1e-10


def test_warp_patch_identity_and_translation():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(60, 80))
    crop = warp_patch(img, np.eye(3), (40.0, 30.0))
    np.testing.assert_array_equal(crop, img[26:34, 36:44])
    ramp = np.tile(np.arange(80, dtype=float) * 0.01, (60, 1))
    H = np.eye(3)
    H[0, 2] = 3.5
    shifted = warp_patch(ramp, H, (40.0, 30.0))
    np.testing.assert_allclose(shifted - warp_patch(ramp, np.eye(3), (40.0, 30.0)), 0.035,
                               atol=1e-12)
    with pytest.raises(OutOfBounds):
        warp_patch(img, np.eye(3), (2.0, 30.0))


def test_migration_detection_cases():
    vp = VisualPoint(7, np.zeros(3), cam_ref=1)
    assert detect_migration(vp, {0: False, 1: False, 2: True}, 1.0) is None  # never seen
    note_visibility(vp, {1: True}, 0.8)
    assert detect_migration(vp, {1: True, 2: True}, 1.0) is None
    ev = detect_migration(vp, {0: False, 1: False, 2: True}, 1.0, H=np.eye(3))
    assert isinstance(ev, MigrationEvent) and (ev.src, ev.dst) == (1, 2)
    assert vp.cam_ref == 2 and vp.migration_count == 1
    # stale history does not migrate
    vp2 = VisualPoint(8, np.zeros(3), cam_ref=0)
    note_visibility(vp2, {0: True}, 0.0)
    assert detect_migration(vp2, {0: False, 3: True}, 1.5) is None


def test_migration_count_tour():
    assert migration_count(3, []) == 0
    vp = VisualPoint(3, np.zeros(3), cam_ref=1)
    log = []
    t = 0.0
    for nxt in (2, 3, 1):
        note_visibility(vp, {vp.cam_ref: True}, t)
        t += 0.1
        ev = detect_migration(vp, {c: c == nxt for c in (1, 2, 3)}, t)
        log.append(ev)
    assert migration_count(3, log) == 3 == vp.migration_count
    assert migration_count(4, log) == 0
    assert vp.cam_ref == 1


def test_stack_dimension_examples():
    assert stack_dimension(1, 10, 64) == 640
    assert stack_dimension(4, 0, 64, [0, 0]) == 0
    assert stack_dimension(2, 3, 4, [1, 2]) == 2 * 3 * 4 + 3 * 4


def test_tukey_weights():
    rng = np.random.default_rng(3)
    res = rng.normal(scale=0.02, size=(50, 64))
    res[7] += 0.5
    w = tukey_weights(res)
    assert w[7] == 0.0
    assert np.all(w[np.arange(50) != 7] > 0.5) and np.all(w <= 1.0)


def smooth_texture(rng, shape, sigma=2.5):
    img = ndimage.gaussian_filter(rng.uniform(size=shape), sigma)
    return (img - img.min()) / (img.max() - img.min())


def random_config(rng, n_cams=2):
    R = so3_exp(rng.normal(size=3))
    p = rng.normal(size=3)
    x = NavState(R=R, p=p, v=rng.normal(size=3), log_tau=rng.normal(scale=0.2, size=n_cams))
    T_cb = Pose(so3_exp(rng.normal(scale=0.5, size=3)), rng.normal(scale=0.1, size=3))
    cam = CameraModel(160.0, 160.0, 159.5, 119.5, 320, 240, T_cb)
    # points in front of the camera
    T_wc = x.pose @ T_cb.inverse()
    pc = np.column_stack([rng.uniform(-1, 1, 6), rng.uniform(-0.7, 0.7, 6), rng.uniform(2, 6, 6)])
    return x, cam, T_wc.apply(pc)


def numeric_jacobian(fn, x, h=1e-6):
    r0 = fn(x)
    J = np.zeros((r0.size, x.dim))
    for k in range(x.dim):
        e = np.zeros(x.dim)
        e[k] = h
        J[:, k] = (fn(boxplus(x, e)) - fn(boxplus(x, -e))).ravel() / (2 * h)
    return J


@pytest.mark.parametrize("seed", range(5))
def test_patch_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    img = smooth_texture(rng, (240, 320))
    x, cam, pw = random_config(rng)
    src = np.array([0, 1, 0, 1, 1, 0])
    ps = PatchSet(0, np.arange(6), pw, rng.uniform(size=(6, 64)), src)
    r, J, valid, _ = evaluate_patches(ps, x, cam, img)
    assert valid.all()
    Jn = numeric_jacobian(lambda s: evaluate_patches(ps, s, cam, img, False)[0], x)
    Ja = J.reshape(-1, x.dim)
    assert np.linalg.norm(Ja - Jn) / np.linalg.norm(Jn) < 1e-4


def test_intra_residual_errors_and_zero_at_truth():
    rng = np.random.default_rng(4)
    img = smooth_texture(rng, (240, 320))
    x = NavState()
    cam = CAM
    p = np.array([0.2, -0.1, 3.0])
    uv = project(cam, p)
    rec = make_record(img, uv, 0, Pose.identity(), 1.0, 0.0)
    vp = VisualPoint(0, p, 0, [rec])
    res = intra_residual(vp, rec, x, cam, 0, img)
    np.testing.assert_allclose(res.residual, 0.0, atol=1e-12)
    assert res.jacobian.shape == (64, x.dim)
    # with a plane the homography path agrees at identity motion
    res2 = intra_residual(vp, rec, x, cam, 0, img, plane=(np.array([0, 0, -1.0]), 3.0))
    np.testing.assert_allclose(res2.residual, 0.0, atol=1e-9)
    behind = VisualPoint(1, np.array([0, 0, -2.0]), 0, [rec])
    with pytest.raises(BehindCamera):
        intra_residual(behind, rec, x, cam, 0, img)
    edge = VisualPoint(2, np.array([1.95, 0, 2.0]), 0, [rec])
    with pytest.raises(OutOfBounds):
        intra_residual(edge, rec, x, cam, 0, img)
