"""Radar schemas, pillarization, PillarFeatureNet, scatter and the radar BEV encoder."""

import numpy as np
import pytest
import torch
from fdcheck import fd_relative_error
from hypothesis import given, settings
from hypothesis import strategies as st

from unibev.geometry import BEVGridSpec, bev_cell_index
from unibev.radar import (SCHEMAS, TJ4D_SCHEMA, VOD_SCHEMA, PillarFeatureNet, RadarBEVEncoder,
                          RadarChannel, RadarPointCloud, RadarSchema, SecondFPN, pillarize,
                          scatter_pillars)


def _cloud(rng, n, grid, schema=VOD_SCHEMA):
    (x0, x1), (y0, y1), (z0, z1) = grid.x_range, grid.y_range, grid.z_range
    xyz = rng.uniform([x0 - 2, y0 - 2, z0 - 0.5], [x1 + 2, y1 + 2, z1 + 0.5], size=(n, 3))
    return RadarPointCloud(xyz, rng.normal(size=(n, schema.num_extra)), schema)


class TestSchema:
    def test_channels(self):
        assert VOD_SCHEMA.channel_names == ["rcs", "v_r", "v_r_abs", "t"]
        assert TJ4D_SCHEMA.channel_names == ["range", "rcs", "alpha", "beta"]
        assert all(s.num_extra == 4 for s in SCHEMAS.values())

    def test_invalid(self):
        with pytest.raises(ValueError):
            RadarSchema("x", ())
        with pytest.raises(ValueError):
            RadarSchema("x", (RadarChannel("a", "m"), RadarChannel("a", "m")))

    def test_cloud_validation(self):
        with pytest.raises(ValueError):
            RadarPointCloud(np.zeros((2, 3)), np.zeros((2, 3)), VOD_SCHEMA)
        with pytest.raises(ValueError):
            RadarPointCloud(np.array([[np.inf, 0, 0]]), np.zeros((1, 4)), VOD_SCHEMA)
        assert len(RadarPointCloud.empty(VOD_SCHEMA)) == 0


class TestPillarize:
    def test_single_pillar(self, toy_grid):
        xyz = np.array([[5.05, 0.05, 0.0], [5.1, 0.1, 0.5], [5.15, 0.15, -0.5]])
        pb = pillarize(RadarPointCloud(xyz, np.ones((3, 4)), VOD_SCHEMA), toy_grid, max_points=32)
        assert len(pb) == 1 and pb.point_counts[0] == 3
        assert pb.pillar_features.shape == (1, 32, 8 + 4)
        assert np.all(pb.pillar_features[0, 3:] == 0)

    def test_decoration(self, toy_grid):
        xyz = np.array([[5.05, 0.05, 0.3]])
        extras = np.array([[10.0, 5.0, -5.0, 1.0]])
        pb = pillarize(RadarPointCloud(xyz, extras, VOD_SCHEMA), toy_grid)
        f = pb.pillar_features[0, 0]
        np.testing.assert_allclose(f[:3], xyz[0], atol=1e-6)
        np.testing.assert_allclose(f[3:7], VOD_SCHEMA.normalize(extras)[0], atol=1e-6)
        assert np.all(f[7:10] == 0)  # single point is its own mean
        cx, cy = toy_grid.cell_center(*pb.pillar_coords[0])
        np.testing.assert_allclose(f[10:12], [5.05 - cx, 0.05 - cy], atol=1e-6)

    def test_partition(self, rng, toy_grid):
        cloud = _cloud(rng, 5000, toy_grid)
        pb = pillarize(cloud, toy_grid, max_points=10_000, max_pillars=10**6)
        iy, ix, ok = bev_cell_index(cloud.xyz, toy_grid)
        z = cloud.xyz[:, 2]
        ok &= (z >= toy_grid.z_range[0]) & (z < toy_grid.z_range[1])
        assert pb.point_counts.sum() == ok.sum()
        cells = {}
        for a, b in zip(iy[ok], ix[ok]):
            cells[(a, b)] = cells.get((a, b), 0) + 1
        got = {tuple(c): n for c, n in zip(pb.pillar_coords.tolist(), pb.point_counts)}
        assert got == cells

    def test_caps(self, rng, toy_grid):
        cloud = _cloud(rng, 3000, toy_grid)
        full = pillarize(cloud, toy_grid, max_points=10_000, max_pillars=10**6)
        capped = pillarize(cloud, toy_grid, max_points=2, max_pillars=50)
        assert len(capped) == 50 and capped.point_counts.max() <= 2
        # the kept pillars are the 50 fullest, ties broken row-major
        rank = full.pillar_coords[:, 0] * toy_grid.nx + full.pillar_coords[:, 1]
        expect = np.sort(rank[np.lexsort((rank, -full.point_counts))[:50]])
        got = capped.pillar_coords[:, 0] * toy_grid.nx + capped.pillar_coords[:, 1]
        np.testing.assert_array_equal(got, expect)

    def test_subsample_seeded(self, toy_grid):
        xyz = np.tile([[5.05, 0.05, 0.0]], (40, 1)) + np.linspace(0, 0.3, 40)[:, None] * [1, 1, 0]
        cloud = RadarPointCloud(xyz, np.zeros((40, 4)), VOD_SCHEMA)
        a = pillarize(cloud, toy_grid, max_points=8, seed=3)
        b = pillarize(cloud, toy_grid, max_points=8, seed=3)
        np.testing.assert_array_equal(a.pillar_features, b.pillar_features)

    def test_empty(self, toy_grid):
        pb = pillarize(RadarPointCloud(np.array([[100.0, 0, 0]]), np.zeros((1, 4)), VOD_SCHEMA), toy_grid)
        assert len(pb) == 0 and pb.pillar_features.shape == (0, 32, 12)

    def test_padding_zero(self, rng, toy_grid):
        pb = pillarize(_cloud(rng, 2000, toy_grid), toy_grid, max_points=4)
        assert np.all(pb.pillar_features[~pb.mask] == 0)


class TestPillarFeatureNet:
    def setup_method(self):
        self.net = PillarFeatureNet(12, 16)

    def test_masking(self):
        x = torch.randn(1, 32, 12)
        x[:, 3:] = torch.randn(1, 29, 12) * 100  # garbage in padded rows is ignored
        y = self.net(x, torch.tensor([3]))
        torch.testing.assert_close(y, self.net(x[:, :3], torch.tensor([3])), rtol=0, atol=0)

    def test_idempotent_and_permutation(self):
        x = torch.randn(1, 8, 12)
        y = self.net(x, torch.tensor([4]))
        dup = torch.cat([x[:, :4], x[:, :4]], 1)
        torch.testing.assert_close(self.net(dup, torch.tensor([8])), y, rtol=0, atol=0)
        perm = x[:, [2, 0, 3, 1]]
        torch.testing.assert_close(self.net(perm, torch.tensor([4])), y, rtol=0, atol=0)


class TestScatter:
    def test_single(self):
        m = scatter_pillars(torch.ones(1, 4), np.array([[0, 0]]), (5, 6))
        assert m.shape == (4, 5, 6) and m[:, 0, 0].eq(1).all() and m.sum() == 4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 10_000))
    def test_inverse_and_sum(self, n, seed):
        rng = np.random.default_rng(seed)
        flat = rng.choice(12 * 10, size=min(n, 120), replace=False)
        coords = np.stack([flat // 10, flat % 10], 1)
        feats = torch.randn(len(flat), 3, dtype=torch.float64)
        m = scatter_pillars(feats, coords, (12, 10))
        torch.testing.assert_close(m[:, coords[:, 0], coords[:, 1]].T, feats, rtol=0, atol=0)
        total = sum(feats[k].sum().item() for k in range(len(flat)))
        assert abs(m.sum().item() - total) < 1e-9

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            scatter_pillars(torch.ones(2, 1), np.array([[1, 1], [1, 1]]), (4, 4))
        with pytest.raises(ValueError):
            scatter_pillars(torch.ones(1, 1), np.array([[4, 0]]), (4, 4))


class TestEncoder:
    def test_shapes_and_widths(self):
        grid = BEVGridSpec.vod().coarsen(10)  # 32 x 32
        enc = RadarBEVEncoder(VOD_SCHEMA, grid)
        out = enc.encode_pseudo_image(torch.zeros(1, 64, 32, 32))
        assert out.shape == (1, 128, 16, 16) and torch.isfinite(out).all()

    def test_deterministic(self, rng, toy_grid):
        enc = RadarBEVEncoder(VOD_SCHEMA, toy_grid, 16, (16, 16), (8, 8)).eval()
        pb = pillarize(_cloud(rng, 300, toy_grid), toy_grid)
        assert torch.equal(enc([pb]), enc([pb]))

    def test_radar_bev_encode_gradient(self):
        fpn = SecondFPN(4, (8, 8), (2, 2), (1, 1), (8, 8)).double()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        assert fd_relative_error(fpn, [x]) < 1e-4
