"""Camera projection, frustum, BEV binning and the splat kernel."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unibev.geometry import (BEVGridSpec, CameraModel, DepthBinSpec, GeometryError, bev_cell_index,
                             build_frustum, default_extrinsics, project_to_image, splat_to_bev,
                             unproject_from_image)


def _identity_camera(image_size=(100, 200), focal=50.0):
    K = np.array([[focal, 0, image_size[1] / 2], [0, focal, image_size[0] / 2], [0, 0, 1.0]])
    return CameraModel(K, np.eye(4), image_size)


def _naive_cell(x, y, grid):
    """Brute-force search over cell boxes [lo, lo + d)."""
    (x0, _), (y0, _) = grid.x_range, grid.y_range
    dx, dy = grid.cell_size
    for iy in range(grid.ny):
        lo_y = y0 + iy * dy
        if not lo_y <= y < lo_y + dy:
            continue
        for ix in range(grid.nx):
            lo_x = x0 + ix * dx
            if lo_x <= x < lo_x + dx:
                return iy, ix
    return None


class TestCameraModel:
    def test_validation(self):
        K = np.diag([100.0, 100.0, 1.0])
        with pytest.raises(GeometryError):
            CameraModel(np.diag([100.0, 100.0, 2.0]), np.eye(4), (10, 10))
        with pytest.raises(GeometryError):
            CameraModel(np.diag([-1.0, 100.0, 1.0]), np.eye(4), (10, 10))
        bad = np.eye(4)
        bad[0, 0] = 1.1
        with pytest.raises(GeometryError):
            CameraModel(K, bad, (10, 10))
        with pytest.raises(GeometryError):
            CameraModel(K, np.eye(4), (0, 10))

    def test_default_extrinsics_axes(self):
        T = default_extrinsics()
        # ego forward (+x) is camera depth (+z), ego left (+y) is camera -x, ego up is camera -y
        np.testing.assert_allclose(T[:3, :3] @ [1, 0, 0], [0, 0, 1])
        np.testing.assert_allclose(T[:3, :3] @ [0, 1, 0], [-1, 0, 0])
        np.testing.assert_allclose(T[:3, :3] @ [0, 0, 1], [0, -1, 0])

    def test_dict_round_trip(self, toy_camera):
        again = CameraModel.from_dict(toy_camera.to_dict())
        np.testing.assert_array_equal(again.intrinsics, toy_camera.intrinsics)
        np.testing.assert_array_equal(again.extrinsics, toy_camera.extrinsics)
        assert again.image_size == toy_camera.image_size


class TestProjection:
    def test_optical_axis(self):
        cam = _identity_camera()
        u, v, d, vis = project_to_image([[0, 0, 10.0]], cam)
        assert (u[0], v[0], d[0], vis[0]) == (100.0, 50.0, 10.0, True)

    def test_behind_camera(self):
        u, v, d, vis = project_to_image([[1.0, 1.0, -5.0]], _identity_camera())
        assert not vis[0] and d[0] == -5.0

    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            project_to_image([[np.nan, 0, 1]], _identity_camera())

    def test_visibility_rule(self, rng, toy_camera):
        pts = rng.uniform([-5, -20, -5], [40, 20, 5], size=(2000, 3))
        u, v, d, vis = project_to_image(pts, toy_camera)
        h, w = toy_camera.image_size
        with np.errstate(invalid="ignore"):
            expect = (d > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        np.testing.assert_array_equal(vis, expect)

    def test_round_trip(self, rng):
        cam = CameraModel.simple(300.0, (480, 640), camera_offset=(0.3, -0.1, 1.2))
        pts = rng.uniform([2, -15, -2], [60, 15, 3], size=(100, 3))
        u, v, d, vis = project_to_image(pts, cam)
        assert vis.sum() > 20
        # oracle: explicit inverse of the 4x4 extrinsics and the 3x3 intrinsics
        pix = np.stack([u * d, v * d, d], 1)[vis]
        cam_pts = pix @ np.linalg.inv(cam.intrinsics).T
        back = (np.c_[cam_pts, np.ones(len(cam_pts))] @ np.linalg.inv(cam.extrinsics).T)[:, :3]
        np.testing.assert_allclose(back, pts[vis], atol=1e-6)
        np.testing.assert_allclose(unproject_from_image(u, v, d, cam)[vis], pts[vis], atol=1e-6)


class TestFrustum:
    def test_principal_ray(self):
        cam = _identity_camera((2, 2), 10.0)  # principal point (1, 1)
        bins = DepthBinSpec(5.0, 10.0, 2)
        # a 1x1 feature with stride 1 looks through pixel centre (0.5, 0.5); shift the principal point
        K = cam.intrinsics.copy()
        K[0, 2] = K[1, 2] = 0.5
        cam = CameraModel(K, np.eye(4), (2, 2))
        f = build_frustum((1, 1), bins, cam, stride=1)
        np.testing.assert_allclose(f[:, 0, 0], [[0, 0, 5], [0, 0, 10]], atol=1e-12)

    def test_shape_and_reprojection(self, toy_camera, toy_bins):
        stride = 8
        h, w = 128 // stride, 192 // stride
        f = build_frustum((h, w), toy_bins, toy_camera, stride)
        assert f.shape == (toy_bins.num_bins, h, w, 3)
        u, v, d, vis = project_to_image(f.reshape(-1, 3), toy_camera)
        assert vis.all()
        D, I, J = np.meshgrid(toy_bins.depths, np.arange(h), np.arange(w), indexing="ij")
        assert np.abs(u - (stride * J.ravel() + 0.5)).max() < 0.5
        assert np.abs(v - (stride * I.ravel() + 0.5)).max() < 0.5
        np.testing.assert_allclose(d, D.ravel(), atol=1e-9)

    def test_stride_subsampling(self, toy_camera, toy_bins):
        fine = build_frustum((32, 48), toy_bins, toy_camera, 4)
        coarse = build_frustum((16, 24), toy_bins, toy_camera, 8)
        np.testing.assert_allclose(coarse, fine[:, ::2, ::2], atol=1e-9)

    def test_precondition(self, toy_camera, toy_bins):
        with pytest.raises(GeometryError):
            build_frustum((17, 24), toy_bins, toy_camera, 8)


class TestBins:
    def test_presets(self):
        b = DepthBinSpec.vod()
        assert (b.d_min, b.d_max, b.num_bins) == (1.0, 51.2, 64)
        assert np.all(np.diff(b.edges) > 0)

    def test_invalid(self):
        for args in [(0.0, 10.0, 4), (5.0, 5.0, 4), (1.0, 10.0, 1)]:
            with pytest.raises(GeometryError):
                DepthBinSpec(*args)

    def test_bin_index(self):
        b = DepthBinSpec(1.0, 10.0, 10)
        np.testing.assert_array_equal(b.bin_index(b.depths), np.arange(10))
        assert b.bin_index(np.array([0.0, 100.0])).tolist() == [-1, -1]


class TestGrid:
    def test_presets(self):
        assert BEVGridSpec.vod().grid_shape == (320, 320)
        assert BEVGridSpec.tj4d().grid_shape == (496, 432)
        assert BEVGridSpec.toy().grid_shape == (64, 64)

    def test_not_multiple(self):
        with pytest.raises(GeometryError):
            BEVGridSpec((0, 10.0), (-5, 5.0), (-1, 1), (0.3, 0.5))

    def test_edges(self, toy_grid):
        (x0, x1), (y0, y1) = toy_grid.x_range, toy_grid.y_range
        iy, ix, ok = bev_cell_index(np.array([[x0, y0], [x1, y1], [x1 - 1e-9, y1 - 1e-9]]), toy_grid)
        assert (iy[0], ix[0], ok[0]) == (0, 0, True)
        assert not ok[1]
        assert (iy[2], ix[2]) == (toy_grid.ny - 1, toy_grid.nx - 1)

    def test_brute_force_binning(self, rng):
        grid = BEVGridSpec((0.0, 8.0), (-4.0, 4.0), (-1.0, 1.0), (0.5, 0.5))
        pts = rng.uniform([-1, -5], [9, 5], size=(10_000, 2))
        # include exact edges
        pts[:50] = rng.integers(0, 17, (50, 2)) * 0.5 + [0.0, -4.0]
        iy, ix, ok = bev_cell_index(pts, grid)
        for k in range(len(pts)):
            cell = _naive_cell(pts[k, 0], pts[k, 1], grid)
            if cell is None:
                assert not ok[k]
            else:
                assert ok[k] and (iy[k], ix[k]) == cell

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 60), st.floats(-30, 30))
    def test_partition(self, x, y):
        grid = BEVGridSpec.toy()
        iy, ix, ok = bev_cell_index(np.array([[x, y]]), grid)
        inside = grid.x_range[0] <= x < grid.x_range[1] and grid.y_range[0] <= y < grid.y_range[1]
        assert ok[0] == inside
        if inside:
            cx, cy = grid.cell_center(iy[0], ix[0])
            # the point lies in exactly the returned cell
            assert abs(x - cx) <= grid.cell_size[0] / 2 + 1e-9
            assert abs(y - cy) <= grid.cell_size[1] / 2 + 1e-9


def _naive_splat(feats, coords, grid):
    out = np.zeros((feats.shape[1], grid.ny, grid.nx))
    for f, p in zip(feats, coords):
        if not grid.z_range[0] <= p[2] < grid.z_range[1]:
            continue
        cell = _naive_cell(p[0], p[1], grid)
        if cell is not None:
            out[:, cell[0], cell[1]] += f
    return out


class TestSplat:
    def test_single_point(self, toy_grid):
        ctr = [12.8 + 0.2, 0.2, 0.0]
        out = splat_to_bev(torch.tensor([[1.0, 2.0, 3.0]]), np.array([ctr]), toy_grid)
        iy, ix, _ = bev_cell_index(np.array([ctr]), toy_grid)
        assert out[:, iy[0], ix[0]].tolist() == [1.0, 2.0, 3.0]
        assert out.abs().sum() == 6.0

    def test_additivity(self, toy_grid):
        out = splat_to_bev(torch.tensor([[1.0], [2.0]]), np.array([[5.05, 0.1, 0], [5.15, 0.2, 0]]), toy_grid)
        assert out.max() == 3.0 and out.sum() == 3.0

    def test_z_filter(self, toy_grid):
        out = splat_to_bev(torch.ones(2, 1), np.array([[5.0, 0.0, 2.0], [5.0, 0.0, -3.0]]), toy_grid)
        assert out.sum() == 1.0  # z_max exclusive, z_min inclusive

    @pytest.mark.parametrize("mode", ["sorted", "fast"])
    def test_conservation_vs_naive(self, rng, mode):
        grid = BEVGridSpec((0.0, 8.0), (-4.0, 4.0), (-1.0, 1.0), (0.5, 0.5))
        coords = rng.uniform([-1, -5, -1.5], [9, 5, 1.5], size=(3000, 3))
        feats = rng.normal(size=(3000, 4))
        out = splat_to_bev(torch.from_numpy(feats), coords, grid, mode=mode).numpy()
        ref = _naive_splat(feats, coords, grid)
        np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(out.sum((1, 2)), ref.sum((1, 2)), rtol=1e-5)

    def test_permutation_bit_exact(self, rng, toy_grid):
        coords = rng.uniform([0, -12.8, -2], [25.6, 12.8, 1], size=(5000, 3))
        coords[2500:] = coords[:2500]  # many shared cells
        feats = torch.from_numpy(rng.normal(size=(5000, 3)).astype(np.float32))
        ref = splat_to_bev(feats, coords, toy_grid, mode="sorted")
        for _ in range(3):
            p = rng.permutation(5000)
            out = splat_to_bev(feats[p], coords[p], toy_grid, mode="sorted")
            assert torch.equal(out, ref)

    def test_batched(self, rng, toy_grid):
        coords = rng.uniform([0, -12.8, -2], [25.6, 12.8, 1], size=(400, 3))
        feats = torch.randn(400, 2)
        bidx = rng.integers(0, 3, 400)
        out = splat_to_bev(feats, coords, toy_grid, batch_index=bidx, batch_size=3)
        for b in range(3):
            m = bidx == b
            torch.testing.assert_close(out[b], splat_to_bev(feats[m], coords[m], toy_grid))

    def test_gradient_flows(self, toy_grid):
        feats = torch.randn(10, 2, requires_grad=True)
        coords = np.tile([[5.0, 0.0, 0.0]], (10, 1))
        coords[5:, 0] = 100.0  # out of range
        splat_to_bev(feats, coords, toy_grid).sum().backward()
        assert feats.grad[:5].eq(1).all() and feats.grad[5:].eq(0).all()

    def test_bad_input(self, toy_grid):
        with pytest.raises(GeometryError):
            splat_to_bev(torch.ones(3, 1), np.zeros((2, 3)), toy_grid)
        with pytest.raises(GeometryError):
            splat_to_bev(torch.ones(3), np.zeros((3, 3)), toy_grid)
