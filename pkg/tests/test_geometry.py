import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpdistill import geometry as G
from kpdistill.geometry import CameraFrame, CameraIntrinsics, DepthKind
from kpdistill.synthetic import look_at

W, H = 64, 48


def rot(axis, angle):
    axis = np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def plane_frame(R, t, kind=DepthKind.PLANAR_Z, w=W, h=H):
    """Frame observing the ground plane z = 0 with exact float64 depth."""
    K = G.default_intrinsics(w, h)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1) @ np.asarray(R).T
    with np.errstate(divide="ignore"):
        z = -t[2] / d[..., 2]
    z = np.where(z > 0, z, 0.0)
    depth = z if kind is DepthKind.PLANAR_Z else z * np.linalg.norm(d, axis=-1)
    return CameraFrame(np.zeros((h, w)), depth, kind, K, R, t)


def dlt_homography(src, dst):
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    h = np.linalg.svd(np.array(rows))[2][-1].reshape(3, 3)
    return h / h[2, 2]


def project_world(frame, X):
    q = (np.asarray(X) - frame.t) @ frame.R
    K = frame.intrinsics
    return np.stack([K.fx * q[:, 0] / q[:, 2] + K.cx, K.fy * q[:, 1] / q[:, 2] + K.cy], 1)


def apply_h(h, pts):
    p = np.c_[pts, np.ones(len(pts))] @ h.T
    return p[:, :2] / p[:, 2:]


class TestIntrinsics:
    def test_half_width_focal_length(self):
        K = G.default_intrinsics(640, 480)
        assert (K.fx, K.fy, K.cx, K.cy) == (320, 320, 320, 240)

    def test_tiny(self):
        K = G.default_intrinsics(2, 2)
        assert (K.fx, K.fy, K.cx, K.cy) == (1, 1, 1, 1)

    @settings(max_examples=30)
    @given(st.integers(1, 5000), st.integers(1, 5000))
    def test_invertible_upper_triangular(self, w, h):
        K = G.default_intrinsics(w, h).K
        assert K[1, 0] == K[2, 0] == K[2, 1] == 0 and K[2, 2] == 1
        np.testing.assert_allclose(np.linalg.inv(K) @ K, np.eye(3), atol=1e-9)

    def test_rejects_bad(self):
        with pytest.raises(G.GeometryError):
            G.default_intrinsics(0, 4)
        with pytest.raises(G.GeometryError):
            CameraIntrinsics(-1, 1, 0, 0)


class TestDepthConversion:
    def test_axial(self):
        K = G.default_intrinsics(W, H)
        assert G.ray_distance_to_z(7.5, K.cx, K.cy, K) == 7.5

    def test_45_degrees(self):
        K = CameraIntrinsics(1, 1, 0, 0)
        assert G.ray_distance_to_z(math.sqrt(2), 1, 0, K) == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=200)
    @given(st.floats(0, 639), st.floats(0, 479), st.floats(0.01, 1000))
    def test_norm_round_trip(self, u, v, r):
        K = G.default_intrinsics(640, 480)
        z = G.ray_distance_to_z(r, u, v, K)
        p = G.unproject(u, v, z, K)
        assert abs(np.linalg.norm(p) - r) <= 1e-9 * max(1.0, r)
        assert abs(G.z_to_ray_distance(z, u, v, K) - r) <= 1e-9 * max(1.0, r)


class TestUnproject:
    def test_axial(self):
        K = G.default_intrinsics(W, H)
        np.testing.assert_array_equal(G.unproject(K.cx, K.cy, 5.0, K), [0, 0, 5])

    def test_hand_arithmetic(self):
        K = G.default_intrinsics(640, 480)
        np.testing.assert_allclose(G.unproject(480, 240, 2.0, K), [1.0, 0.0, 2.0], atol=1e-15)

    def test_non_positive_depth(self):
        with pytest.raises(G.GeometryError):
            G.unproject(1, 1, 0.0, G.default_intrinsics(W, H))

    @settings(max_examples=200)
    @given(st.floats(-50, 700), st.floats(-50, 500), st.floats(1e-3, 1e4))
    def test_project_inverts(self, u, v, z):
        K = G.default_intrinsics(640, 480)
        uv = G.project(G.unproject(u, v, z, K), K)
        assert abs(uv[0] - u) <= 1e-9 and abs(uv[1] - v) <= 1e-9


class TestReproject:
    def setup_method(self):
        self.R = look_at([0.3, -0.2, 5.0], [0.5, 0.4, 0.0])
        self.t = np.array([0.3, -0.2, 5.0])

    @pytest.mark.parametrize("kind", list(DepthKind))
    def test_identity_pose(self, kind):
        f = plane_frame(self.R, self.t, kind)
        pts = np.random.default_rng(0).uniform([0, 0], [W - 1, H - 1], size=(200, 2))
        c = G.reproject(f, f, pts)
        assert c.valid.all()
        assert np.abs(c.projected - pts).max() <= 1e-6

    def test_stereo_disparity(self):
        K = G.default_intrinsics(W, H)
        z, b = 4.0, 0.25
        depth = np.full((H, W), z)
        fi = CameraFrame(np.zeros((H, W)), depth, "planar_z", K, np.eye(3), np.zeros(3))
        fj = CameraFrame(np.zeros((H, W)), depth, "planar_z", K, np.eye(3), np.array([b, 0, 0]))
        pts = np.stack(np.meshgrid(np.arange(20, W, 7.0), np.arange(0, H, 5.0)), -1).reshape(-1, 2)
        c = G.reproject(fi, fj, pts, occlusion_check=False)
        ok = c.valid
        assert ok.sum() > 10
        np.testing.assert_allclose(pts[ok, 0] - c.projected[ok, 0], K.fx * b / z, atol=1e-9)
        np.testing.assert_allclose(c.projected[ok, 1], pts[ok, 1], atol=1e-9)

    @pytest.mark.parametrize("kind", list(DepthKind))
    def test_plane_matches_homography(self, kind):
        fi = plane_frame(self.R, self.t, kind)
        tj = np.array([0.9, 0.1, 5.3])
        fj = plane_frame(look_at(tj, [0.6, 0.5, 0.0]), tj, kind)
        # independent oracle: homography fitted to four projected plane points
        X = np.array([[-1.0, -1.0, 0.0], [2.0, -1.0, 0.0], [2.0, 2.0, 0.0], [-1.0, 2.0, 0.0]])
        h_fit = dlt_homography(project_world(fi, X), project_world(fj, X))
        h_closed = G.plane_homography(fi, fj, [0, 0, 1], 0.0)
        np.testing.assert_allclose(h_closed, h_fit, atol=1e-9)
        pts = np.random.default_rng(1).uniform([0, 0], [W - 1, H - 1], size=(300, 2))
        c = G.reproject(fi, fj, pts)
        ok = c.valid
        assert ok.sum() > 100
        assert np.abs(c.projected[ok] - apply_h(h_fit, pts[ok])).max() <= 1e-4

    def test_round_trip(self):
        fi = plane_frame(self.R, self.t)
        tj = np.array([0.5, 0.0, 5.1])
        fj = plane_frame(look_at(tj, [0.6, 0.5, 0.0]), tj)
        pts = np.random.default_rng(2).uniform([0, 0], [W - 1, H - 1], size=(200, 2))
        fwd = G.reproject(fi, fj, pts)
        back = G.reproject(fj, fi, fwd.projected[fwd.valid])
        assert back.valid.sum() > 100
        err = np.abs(back.projected[back.valid] - pts[fwd.valid][back.valid]).max()
        assert err <= 1e-3

    def test_reason_codes(self):
        K = G.default_intrinsics(W, H)
        depth = np.full((H, W), 4.0)
        depth[:, :8] = 0.0  # invalid strip
        fi = CameraFrame(np.zeros((H, W)), depth, "planar_z", K, np.eye(3), np.zeros(3))
        behind = CameraFrame(np.zeros((H, W)), np.full((H, W), 4.0), "planar_z", K, rot([0, 1, 0], math.pi), np.zeros(3))
        shifted = CameraFrame(np.zeros((H, W)), np.full((H, W), 4.0), "planar_z", K, np.eye(3), np.array([6.0, 0, 0]))
        pts = np.array([[2.0, 5.0], [40.0, 20.0]])
        assert G.reproject(fi, behind, pts).reason.tolist() == ["invalid_depth", "behind_camera"]
        assert G.reproject(fi, shifted, pts).reason.tolist() == ["invalid_depth", "out_of_bounds"]

    def test_occlusion(self):
        K = G.default_intrinsics(W, H)
        fi = CameraFrame(np.zeros((H, W)), np.full((H, W), 4.0), "planar_z", K, np.eye(3), np.zeros(3))
        near = np.full((H, W), 4.0)
        near[:, 32:] = 2.0
        near[:, 16:32] = 4.0 / 1.04  # closer, but within the 5% tolerance
        fj = CameraFrame(np.zeros((H, W)), near, "planar_z", K, np.eye(3), np.zeros(3))
        pts = np.array([[5.0, 5.0], [20.0, 5.0], [40.0, 5.0]])
        assert G.reproject(fi, fj, pts).reason.tolist() == ["ok", "ok", "occluded"]
        assert G.reproject(fi, fj, pts, occlusion_check=False).valid.all()

    def test_valid_implies_in_bounds(self):
        fi = plane_frame(self.R, self.t)
        tj = np.array([2.0, 1.0, 4.0])
        fj = plane_frame(look_at(tj, [1.0, 1.5, 0.0]), tj)
        pts = np.random.default_rng(3).uniform([0, 0], [W - 1, H - 1], size=(500, 2))
        c = G.reproject(fi, fj, pts)
        p = c.projected[c.valid]
        assert ((p[:, 0] >= 0) & (p[:, 0] < W) & (p[:, 1] >= 0) & (p[:, 1] < H)).all()
        assert (~c.valid).any()

    def test_size_mismatch(self):
        f1 = plane_frame(self.R, self.t)
        f2 = plane_frame(self.R, self.t, w=32, h=24)
        with pytest.raises(G.GeometryError):
            G.reproject(f1, f2, np.zeros((1, 2)))

    def test_bad_rotation(self):
        with pytest.raises(G.GeometryError):
            CameraFrame(np.zeros((2, 2)), np.ones((2, 2)), "planar_z", G.default_intrinsics(2, 2), np.diag([1, 1, -1.0]), np.zeros(3))


class TestWarpHomography:
    def test_identity(self):
        pts = np.random.default_rng(0).uniform(-5, 5, (10, 2))
        out, valid = G.warp_homography(np.eye(3), pts)
        assert valid.all()
        np.testing.assert_array_equal(out, pts)

    def test_translation(self):
        pts = np.random.default_rng(1).uniform(-5, 5, (10, 2))
        out, _ = G.warp_homography(np.array([[1, 0, 2.5], [0, 1, -1.0], [0, 0, 1]]), pts)
        np.testing.assert_allclose(out, pts + [2.5, -1.0], atol=1e-14)

    def test_vanishing_scale_invalid(self):
        h = np.array([[1, 0, 0], [0, 1, 0], [1, 0, -2.0]])
        out, valid = G.warp_homography(h, np.array([[2.0, 0.0], [1.0, 1.0]]))
        assert valid.tolist() == [False, True]
        assert np.isnan(out[0]).all()

    @settings(max_examples=100)
    @given(st.integers(0, 2**31))
    def test_inverse_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        h = np.eye(3) + rng.normal(scale=0.2, size=(3, 3))
        h[2, :2] *= 0.05
        if abs(np.linalg.det(h)) < 1e-3:
            return
        pts = rng.uniform(0, 10, (20, 2))
        fwd, v1 = G.warp_homography(h, pts)
        back, v2 = G.warp_homography(np.linalg.inv(h), fwd[v1])
        ok = v2 & (np.abs(fwd[v1]).max(axis=1) < 1e6)
        np.testing.assert_allclose(back[ok], pts[v1][ok], atol=1e-8)

    def test_homography_correspondences(self):
        h = np.array([[1, 0, 10.0], [0, 1, 0], [0, 0, 1]])
        c = G.homography_correspondences(h, np.array([[1.0, 1.0], [60.0, 1.0]]), (H, W))
        assert c.reason.tolist() == ["ok", "out_of_bounds"]
        np.testing.assert_allclose(c.projected[0], [11.0, 1.0])
