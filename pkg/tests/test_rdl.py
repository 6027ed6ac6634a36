"""Radar depth map, depth transform, depth/context head and the lift-splat view transform."""

import numpy as np
import pytest
import torch
from fdcheck import fd_relative_error
from oracles import lift_splat_conservation_error

from unibev.geometry import BEVGridSpec, CameraModel, DepthBinSpec, build_frustum, project_to_image
from unibev.radar import TJ4D_SCHEMA, VOD_SCHEMA, RadarPointCloud
from unibev.rdl import (RADAR_FEATURE_CHANNELS, ConfigError, DepthContextHead, ImageEncoder, RDLConfig,
                        RDLViewTransform, RadarDepthTransform, build_radar_depth_map, lift_splat)
from unibev.synth import SceneConfig, generate_frames


def _point_at_pixel(cam, u, v, depth):
    from unibev.geometry import unproject_from_image
    return unproject_from_image(u, v, depth, cam)


class TestImageEncoder:
    @pytest.mark.parametrize("size,expect", [((480, 640), (60, 80)), ((608, 968), (76, 121))])
    def test_dataset_sizes(self, size, expect):
        enc = ImageEncoder(widths=(4, 4, 4, 4))
        with torch.no_grad():
            out = enc(torch.zeros(1, 3, *size))
        assert out.shape[-2:] == expect and torch.isfinite(out).all()

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            ImageEncoder(widths=(4, 4, 4, 4))(torch.zeros(1, 3, 100, 64))


class TestRadarDepthMap:
    def test_single_point(self, toy_camera):
        p = _point_at_pixel(toy_camera, 44.0, 60.0, 12.5)
        extras = np.array([[4.0, 1.0, 2.0, 0.0]])
        m = build_radar_depth_map(RadarPointCloud(p, extras, VOD_SCHEMA), toy_camera, (16, 24), 8)
        assert m.mask.sum() == 1 and m.mask[7, 5]
        np.testing.assert_allclose(m.channels[:, 7, 5], [12.5, 4.0, 1.0, 2.0, 0.0], rtol=1e-6)
        assert np.all(m.channels[:, ~m.mask] == 0)

    def test_nearest_wins(self, toy_camera):
        p = np.concatenate([_point_at_pixel(toy_camera, 44.0, 60.0, d) for d in (20.0, 8.0)])
        extras = np.array([[1.0, 0, 0, 0], [2.0, 0, 0, 0]])
        m = build_radar_depth_map(RadarPointCloud(p, extras, VOD_SCHEMA), toy_camera, (16, 24), 8)
        np.testing.assert_allclose(m.channels[:2, 7, 5], [8.0, 2.0], rtol=1e-6)

    def test_brute_force(self, rng, toy_camera):
        xyz = rng.uniform([1, -10, -2], [30, 10, 2], size=(400, 3))
        cloud = RadarPointCloud(xyz, rng.normal(size=(400, 4)), VOD_SCHEMA)
        m = build_radar_depth_map(cloud, toy_camera, (16, 24), 8)
        u, v, d, vis = project_to_image(cloud.xyz, toy_camera)
        best = {}
        for k in np.nonzero(vis)[0]:
            key = (int(v[k] // 8), int(u[k] // 8))
            if key not in best or d[k] < d[best[key]]:
                best[key] = k
        assert m.mask.sum() == len(best) <= vis.sum()
        for (r, c), k in best.items():
            assert m.channels[0, r, c] == np.float32(d[k])
            np.testing.assert_array_equal(m.channels[1:, r, c], cloud.extras[k])

    def test_empty(self, toy_camera):
        m = build_radar_depth_map(RadarPointCloud.empty(VOD_SCHEMA), toy_camera, (16, 24), 8)
        assert not m.mask.any() and not m.channels.any()


class TestRadarDepthTransform:
    @pytest.mark.parametrize("schema", [VOD_SCHEMA, TJ4D_SCHEMA])
    def test_channel_contract(self, schema):
        t = RadarDepthTransform(schema.num_extra + 1, extra_scales=list(schema.scales()))
        assert t.conv.in_channels == schema.num_extra + 1 == 5
        assert t.conv.out_channels == RADAR_FEATURE_CHANNELS == 64
        assert t(torch.zeros(2, 5, 3, 4)).shape == (2, 64, 3, 4)

    def test_width_mismatch(self):
        t = RadarDepthTransform(5)
        with pytest.raises(ConfigError):
            t(torch.zeros(1, 4, 3, 3))
        with pytest.raises(ConfigError):
            RadarDepthTransform(5, out_channels=32)
        with pytest.raises(ConfigError):
            RDLConfig(num_extra=4, bins=DepthBinSpec.toy(), depth_feature_channels=32)

    def test_pointwise_and_empty(self):
        t = RadarDepthTransform(5)
        x = torch.zeros(1, 5, 2, 2)
        x[0, :, 0, 0] = x[0, :, 1, 1] = torch.tensor([10.0, 3.0, 1.0, 1.0, 0.0])
        y = t(x)
        torch.testing.assert_close(y[0, :, 0, 0], y[0, :, 1, 1], rtol=0, atol=0)
        torch.testing.assert_close(y[0, :, 0, 1], torch.relu(t.conv.bias), rtol=0, atol=0)

    def test_gradient(self):
        t = RadarDepthTransform(5, depth_scale=10.0, extra_scales=[10, 5, 5, 1]).double()
        x = torch.rand(1, 5, 4, 4, dtype=torch.float64) * 5
        assert fd_relative_error(t, [x], n_coords=80) < 1e-4


class TestDepthContextHead:
    def test_shapes_and_normalization(self):
        head = DepthContextHead(16, 12, 8, hidden=8)
        for _ in range(20):
            img, rad = torch.randn(2, 16, 5, 7) * 5, torch.randn(2, 64, 5, 7) * 5
            depth, ctx = head(img, rad)
            assert depth.shape == (2, 12, 5, 7) and ctx.shape == (2, 8, 5, 7)
            assert (depth >= 0).all()
            assert (depth.double().sum(1) - 1).abs().max() < 1e-6

    def test_context_ignores_radar(self):
        head = DepthContextHead(16, 12, 8, hidden=8)
        img = torch.randn(1, 16, 3, 3)
        _, c1 = head(img, torch.randn(1, 64, 3, 3))
        _, c2 = head(img, torch.randn(1, 64, 3, 3))
        torch.testing.assert_close(c1, c2, rtol=0, atol=0)

    def test_spatial_mismatch(self):
        with pytest.raises(ConfigError):
            DepthContextHead(16, 12, 8)(torch.randn(1, 16, 3, 3), torch.randn(1, 64, 3, 4))

    def test_gradient(self):
        head = DepthContextHead(6, 5, 4, hidden=8).double()
        img = torch.randn(1, 6, 4, 4, dtype=torch.float64)
        rad = torch.rand(1, 64, 4, 4, dtype=torch.float64)
        assert fd_relative_error(lambda a, b: head(a, b), [img, rad], n_coords=60) < 1e-4


class TestLiftSplat:
    def test_uniform_lift(self):
        grid = BEVGridSpec((0.0, 16.0), (-8.0, 8.0), (-3.0, 2.0), (0.5, 0.5))
        bins = DepthBinSpec(2.0, 10.0, 5)
        cam = CameraModel.simple(20.0, (8, 8))
        geom = build_frustum((1, 1), bins, cam, 8)[None]
        ctx = torch.ones(1, 1, 1, 1)
        depth = torch.full((1, 5, 1, 1), 0.2)
        bev = lift_splat(ctx, depth, geom, grid)[0, 0]
        assert bev.sum().item() == pytest.approx(1.0)
        np.testing.assert_allclose(bev[bev > 0].numpy(), 0.2, rtol=1e-6)
        assert (bev > 0).sum() == 5

    @pytest.mark.parametrize("seed", range(10))
    def test_conservation(self, seed):
        assert lift_splat_conservation_error(seed) < 1e-4

    def test_view_transform_gradient(self, small_grid):
        cfg = RDLConfig(num_extra=4, bins=DepthBinSpec(1.0, 12.0, 4), context_channels=3,
                        encoder_widths=(4, 4), encoder_strides=(2, 2), depth_hidden=4)
        vt = RDLViewTransform(cfg, small_grid).double()
        cam = CameraModel.simple(10.0, (8, 12))
        img = torch.rand(1, 3, 8, 12, dtype=torch.float64)
        rmap = torch.zeros(1, 5, 2, 3, dtype=torch.float64)
        rmap[0, :, 1, 1] = torch.tensor([6.0, 2.0, 1.0, 1.0, 0.0])
        f = lambda im, rm: vt(im, rm, [cam])["bev"]  # noqa: E731
        assert fd_relative_error(f, [img, rmap], n_coords=40) < 1e-4


def _fit_depth(frames, steps=200, seed=0):
    """Overfit encoder + radar transform + depth head on radar-hit pixels."""
    torch.manual_seed(seed)
    bins = DepthBinSpec.toy()
    cfg = RDLConfig(num_extra=4, bins=bins, context_channels=8, encoder_widths=(16, 16, 16, 16),
                    depth_hidden=32, depth_scale=25.0, extra_scales=tuple(VOD_SCHEMA.scales()))
    grid = BEVGridSpec.toy()
    vt = RDLViewTransform(cfg, grid, splat_mode="fast")
    maps = [build_radar_depth_map(f.radar, f.camera, (16, 24), 8) for f in frames]
    rmap = torch.from_numpy(np.stack([m.channels for m in maps]))
    target = torch.from_numpy(np.stack([np.where(m.mask, bins.bin_index(m.depth), -1) for m in maps]))
    images = torch.from_numpy(np.stack([f.image_float() for f in frames]))
    opt = torch.optim.Adam(vt.parameters(), lr=3e-3)
    for _ in range(steps):
        out = vt(images, rmap, [f.camera for f in frames])
        loss = torch.nn.functional.cross_entropy(out["depth_logits"], target, ignore_index=-1)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return vt, images, rmap, target, [f.camera for f in frames]


@pytest.fixture(scope="module")
def fitted_depth():
    frames = generate_frames(SceneConfig(seed=3), 4)
    return _fit_depth(frames)


def test_depth_overfit_matches_radar_bins(fitted_depth):
    vt, images, rmap, target, cams = fitted_depth
    with torch.no_grad():
        pred = vt(images, rmap, cams)["depth_logits"].argmax(1)
    seen = target >= 0
    assert seen.sum() > 20
    assert (pred[seen] == target[seen]).float().mean() >= 0.9


def test_radar_removal_changes_output(fitted_depth):
    vt, images, rmap, _, cams = fitted_depth
    with torch.no_grad():
        with_radar = vt(images, rmap, cams)["bev"]
        without = vt(images, torch.zeros_like(rmap), cams)["bev"]
    assert (with_radar - without).abs().max() > 1e-4
