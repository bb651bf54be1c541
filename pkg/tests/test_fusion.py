import itertools
import math

import numpy as np
import pytest

from nbvscan.camera import CameraModel, look_at, render_depth
from nbvscan.coverage import surface_coverage
from nbvscan.fusion import (FusionParams, VolumeTooLargeError, extract_points, integrate, new_volume, read_volume,
                            write_volume)
from nbvscan.geometry import Aabb, Mesh, bounding_box, build_accel, sample_surface


def _plane_scene(z=0.0, half=3.0):
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]], float)
    return Mesh(v, [[0, 1, 2], [0, 2, 3]], None)


def test_new_volume_shape_and_errors():
    box = Aabb((0, 0, 0), (1, 1, 1))
    p = FusionParams.for_voxel(0.1)
    vol = new_volume(box, 0.1, p)
    assert all(d >= 10 for d in vol.dims)
    assert np.all(vol.origin <= np.array(box.min) - p.truncation + 1e-12)
    far = vol.origin + (np.array(vol.dims) - 1) * vol.voxel_size
    assert np.all(far >= np.array(box.max) + p.truncation - 1e-9)
    assert not vol.observed.any()
    with pytest.raises(ValueError):
        new_volume(box, 0.0, p)
    with pytest.raises(ValueError):
        new_volume(box, 0.1, FusionParams(0.15))          # truncation below two voxels
    with pytest.raises(VolumeTooLargeError, match="MiB"):
        new_volume(box, 0.001, FusionParams.for_voxel(0.001), max_voxels=10**6)


def _fuse_plane(vs=0.05, plane_z=0.0, cam_z=4.0, model=CameraModel(96, 96, 60)):
    scene = build_accel(_plane_scene(plane_z))
    ext = look_at((0, 0, cam_z), (0, 0, plane_z), up=(0, 1, 0))
    depth = render_depth(scene, ext, model)
    vol = new_volume(Aabb((-1, -1, -0.5), (1, 1, 0.5)), vs, FusionParams.for_voxel(vs))
    integrate(vol, depth, ext, model)
    return vol, depth, ext, model


def test_plane_clamp_and_zero_crossing():
    vs = 0.05
    vol, *_ = _fuse_plane(vs)
    centers = vol.voxel_centers().reshape(*vol.dims, 3)
    trunc = vol.params.truncation
    z = centers[0, 0, :, 2]
    k_front = int(np.argmin(np.abs(z - trunc)))               # camera depth d - truncation
    k_surf = int(np.argmin(np.abs(z)))
    i, j = vol.dims[0] // 2, vol.dims[1] // 2
    if abs(z[k_front] - trunc) < 1e-9:
        assert vol.tsdf[i, j, k_front] == pytest.approx(1.0)
    assert vol.weight[i, j, k_front] == 1
    assert abs(vol.tsdf[i, j, k_surf]) <= vs / trunc + 1e-9
    # far behind the surface nothing changes
    k_behind = int(np.argmin(np.abs(z + trunc + 2 * vs)))
    assert vol.weight[i, j, k_behind] == 0
    assert np.all(np.abs(vol.tsdf) <= 1.0)


def test_plane_points_near_true_plane():
    for plane_z in (0.0, 0.013, -0.21):
        vol, *_ = _fuse_plane(0.05, plane_z)
        pts = extract_points(vol).points
        assert len(pts) > 500
        assert np.max(np.abs(pts[:, 2] - plane_z)) <= 0.5 * vol.voxel_size


def test_repeat_integration_is_fixed_point():
    vol, depth, ext, model = _fuse_plane()
    once = vol.tsdf.copy()
    integrate(vol, depth, ext, model)
    np.testing.assert_allclose(vol.tsdf, once, atol=1e-12)
    assert vol.weight.max() == 2


def test_weight_cap():
    vol, depth, ext, model = _fuse_plane()
    vol.params = FusionParams(vol.params.truncation, max_weight=3)
    for _ in range(5):
        integrate(vol, depth, ext, model)
    assert vol.weight.max() == 3


def test_all_positive_volume_is_empty():
    vol = new_volume(Aabb((0, 0, 0), (1, 1, 1)), 0.1, FusionParams.for_voxel(0.1))
    vol.weight[...] = 1
    assert len(extract_points(vol)) == 0


def test_depth_shape_checked():
    vol, depth, ext, model = _fuse_plane()
    with pytest.raises(ValueError):
        integrate(vol, depth[:-1], ext, model)


def _cube_views(cube, model, radius=4.0):
    accel = build_accel(cube)
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0):
            continue
        pos = radius * np.array(d, float) / np.linalg.norm(d)
        up = (0, 1, 0) if d[:2] == (0, 0) else (0, 0, 1)
        ext = look_at(pos, (0, 0, 0), up)
        yield render_depth(accel, ext, model), ext


def _distance_to_cube(p, half=0.5):
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(axis=1), 0)
    return np.abs(outside + inside)


def test_view_order_invariance(cube):
    model = CameraModel(64, 64, 50)
    views = list(_cube_views(cube, model))[:2]
    box = bounding_box(cube)
    vs = box.diagonal / 64
    a = new_volume(box, vs, FusionParams.for_voxel(vs))
    b = new_volume(box, vs, FusionParams.for_voxel(vs))
    for d, e in views:
        integrate(a, d, e, model)
    for d, e in reversed(views):
        integrate(b, d, e, model)
    np.testing.assert_allclose(a.tsdf, b.tsdf, atol=1e-6)
    np.testing.assert_array_equal(a.weight, b.weight)


def test_cube_from_26_views(cube):
    model = CameraModel(128, 128, 40)
    box = bounding_box(cube)
    vs = box.diagonal / 128
    vol = new_volume(box, vs, FusionParams.for_voxel(vs))
    prev_w = vol.weight.copy()
    for depth, ext in _cube_views(cube, model):
        integrate(vol, depth, ext, model)
        assert np.all(vol.weight >= prev_w)
        prev_w = vol.weight.copy()
    pts = extract_points(vol).points
    assert np.max(_distance_to_cube(pts)) <= vs
    gt = sample_surface(cube, 10_000, seed=0)
    res = surface_coverage(gt, extract_points(vol), 0.01 * box.diagonal)
    assert res.coverage_percent >= 95.0


def test_volume_file_roundtrip(tmp_path):
    vol, *_ = _fuse_plane(0.1)
    write_volume(vol, tmp_path / "v.bin")
    back = read_volume(tmp_path / "v.bin")
    assert back.dims == vol.dims and back.voxel_size == vol.voxel_size
    np.testing.assert_array_equal(back.origin, vol.origin)
    np.testing.assert_allclose(back.tsdf, vol.tsdf, rtol=1e-6)
    np.testing.assert_array_equal(back.weight, vol.weight)
    n = math.prod(vol.dims)
    assert (tmp_path / "v.bin").stat().st_size == 12 + 24 + 8 + 8 * n
