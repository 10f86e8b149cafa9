from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynavessel.errors import ArgumentError, GeometryError
from dynavessel.transforms import euler_zyx
from dynavessel.volume import (
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    apply_mask,
    mip_render,
    nearest_sample,
    resample_isotropic,
    resample_labels,
    trilinear_sample,
    write_png,
)

from conftest import make_labels, make_volume


def test_geometry_rejects_bad_fields():
    with pytest.raises(GeometryError):
        VolumeGeometry((0, 2, 2))
    with pytest.raises(GeometryError):
        VolumeGeometry((2, 2, 2), (1.0, -1.0, 1.0))
    with pytest.raises(GeometryError):
        VolumeGeometry((2, 2, 2), direction=np.diag([1.0, 2.0, 1.0]))


@given(
    angles=st.tuples(*[st.floats(-np.pi, np.pi)] * 3),
    spacing=st.tuples(*[st.floats(0.1, 3.0)] * 3),
    ijk=st.tuples(*[st.floats(0, 31)] * 3),
)
def test_voxel_world_round_trip(angles, spacing, ijk):
    g = VolumeGeometry((32, 32, 32), spacing, (-5.0, 3.0, 12.5), euler_zyx(angles))
    back = g.world_to_voxel(g.voxel_to_world(ijk))
    assert np.allclose(back, ijk, atol=1e-6)


def test_scalar_volume_rejects_nan():
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ArgumentError):
        make_volume(data)


def test_label_names_cover_values():
    lv = make_labels([[[0, 1], [2, 0]]], {1: "artery"})
    assert lv.label_names[1] == "artery"
    assert 2 in lv.label_names


def test_trilinear_voxel_center_and_midpoint():
    data = np.zeros((2, 1, 1), np.float32)
    data[1] = 100.0
    vol = make_volume(data)
    assert trilinear_sample(vol, (1.0, 0.0, 0.0)) == 100.0
    assert trilinear_sample(vol, (0.5, 0.0, 0.0)) == 50.0


def test_trilinear_outside_returns_air():
    vol = make_volume(np.ones((4, 4, 4)))
    assert trilinear_sample(vol, (-10.0, 0.0, 0.0)) == -1024.0
    assert trilinear_sample(vol, (13.0, 1.0, 1.0), fill=0.0) == 0.0


@settings(max_examples=50)
@given(
    coef=st.tuples(*[st.floats(-50, 50)] * 4),
    p=st.tuples(st.floats(0, 7.5), st.floats(0, 5), st.floats(0, 10.8)),
)
def test_trilinear_exact_on_affine_fields(coef, p):
    a, b, c, d = coef
    g = VolumeGeometry((9, 11, 13), (1.0, 0.5, 0.9), (0.0, 0.0, 0.0))
    ii, jj, kk = np.meshgrid(*[np.arange(n) for n in g.dims], indexing="ij")
    w = g.voxel_to_world(np.stack([ii, jj, kk], -1).astype(float))
    data = a * w[..., 0] + b * w[..., 1] + c * w[..., 2] + d
    vol = ScalarVolume(g, data)
    expected = a * p[0] + b * p[1] + c * p[2] + d
    assert abs(trilinear_sample(vol, p) - expected) < 1e-3


def test_nearest_sample():
    data = np.zeros((3, 3, 3), np.uint8)
    data[1, 1, 1] = 1
    lv = make_labels(data, spacing=(2.0, 2.0, 2.0))
    assert nearest_sample(lv, (2.0, 2.0, 2.0)) == 1
    assert nearest_sample(lv, (2.0 + 0.4 * 2.0, 2.0, 2.0)) == 1
    assert nearest_sample(lv, (50.0, 0.0, 0.0)) == 0


def test_resample_dims_arithmetic_for_0468_spacing():
    # only the geometry matters here; a 2-voxel-thick slab keeps it cheap
    vol = ScalarVolume(VolumeGeometry((256, 256, 2), (0.936, 0.936, 0.936)), np.zeros((256, 256, 2)))
    out = resample_isotropic(vol, 0.468)
    assert out.geometry.dims == (512, 512, 4)
    assert out.geometry.spacing == (0.468, 0.468, 0.468)
    assert out.geometry.origin == vol.geometry.origin


def test_resample_dims_round_half_up():
    vol = make_volume(np.zeros((5, 3, 1)))
    out = resample_isotropic(vol, 2.0)
    # 5 * 1 / 2 = 2.5 -> 3, 3 / 2 = 1.5 -> 2, 0.5 -> 1
    assert out.geometry.dims == (3, 2, 1)


def test_resample_constant_and_identity():
    vol = make_volume(np.full((6, 7, 8), 123.5))
    out = resample_isotropic(vol, 0.7)
    # the new grid can overhang the last input voxel center; those samples are air
    g = out.geometry
    inside = [np.arange(n) * 0.7 <= m - 1 for n, m in zip(g.dims, vol.geometry.dims)]
    box = np.ix_(*inside)
    assert np.all(out.data[box] == 123.5)
    assert np.all(np.isin(out.data, [123.5, -1024.0]))
    rng = np.random.default_rng(1)
    vol = make_volume(rng.normal(0, 100, (8, 8, 8)))
    same = resample_isotropic(vol, 1.0)
    assert np.max(np.abs(same.data - vol.data)) <= 1e-4


def test_resample_rejects_bad_spacing():
    with pytest.raises(ArgumentError):
        resample_isotropic(make_volume(np.zeros((2, 2, 2))), 0.0)


def test_resample_matches_pointwise_trilinear():
    rng = np.random.default_rng(7)
    vol = make_volume(rng.normal(0, 50, (7, 6, 5)), spacing=(1.0, 1.3, 0.8), origin=(2.0, -1.0, 4.0))
    out = resample_isotropic(vol, 0.6)
    g = out.geometry
    ii, jj, kk = np.meshgrid(*[np.arange(n) for n in g.dims], indexing="ij")
    pts = g.voxel_to_world(np.stack([ii, jj, kk], -1).reshape(-1, 3).astype(float))
    ref = trilinear_sample(vol, pts).reshape(g.dims)
    assert np.allclose(out.data, ref, atol=1e-3)


def test_apply_mask_examples():
    vol = make_volume(np.full((4, 4, 4), 100.0))
    ones = make_labels(np.ones((4, 4, 4)))
    zeros = make_labels(np.zeros((4, 4, 4)))
    assert np.array_equal(apply_mask(vol, ones).data, vol.data)
    assert np.all(apply_mask(vol, zeros, fill=0.0).data == 0)
    half = np.zeros((4, 4, 4))
    half[:2] = 1
    out = apply_mask(vol, make_labels(half), fill=0.0)
    assert np.count_nonzero(out.data == 100.0) == 32


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25)
def test_apply_mask_idempotent(seed):
    rng = np.random.default_rng(seed)
    vol = make_volume(rng.normal(size=(5, 5, 5)))
    m = make_labels(rng.integers(0, 2, (5, 5, 5)))
    once = apply_mask(vol, m, -7.0)
    assert np.array_equal(apply_mask(once, m, -7.0).data, once.data)


def test_apply_mask_dims_mismatch():
    with pytest.raises(GeometryError):
        apply_mask(make_volume(np.zeros((2, 2, 2))), make_labels(np.zeros((3, 2, 2))))


def test_mip_examples(tmp_path):
    data = np.full((5, 6, 7), -1024.0)
    data[2, 3, 4] = 500.0
    img = mip_render(make_volume(data), "z", (0.0, 500.0))
    assert img.shape == (6, 5)
    assert np.count_nonzero(img) == 1 and img[3, 2] == 255
    flat = mip_render(make_volume(np.full((3, 3, 3), -100.0)), "x", (-100.0, 600.0))
    assert np.all(flat == 0)
    hot = mip_render(make_volume(np.full((3, 3, 3), 5000.0)), "y", (-100.0, 600.0))
    assert np.all(hot == 255)
    with pytest.raises(ArgumentError):
        mip_render(make_volume(data), "z", (10.0, 10.0))
    write_png(img, tmp_path / "mip.png")
    from PIL import Image

    assert np.array_equal(np.asarray(Image.open(tmp_path / "mip.png")), img)


def test_resample_labels_nearest_only():
    data = np.zeros((4, 4, 4), np.uint8)
    data[1:3, 1:3, 1:3] = 2
    lv = LabelVolume(VolumeGeometry((4, 4, 4), (2.0, 2.0, 2.0)), data, {2: "vein"})
    out = resample_labels(lv, VolumeGeometry((8, 8, 8), (1.0, 1.0, 1.0)))
    assert set(np.unique(out.data)) <= {0, 2}
    assert out.label_names[2] == "vein"
