import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from symreg import parallel
from symreg.io import (MalformedHeader, TruncatedPayload, UnsupportedDatatype, load_volume,
                       save_volume)
from symreg.volume import (GeometryMismatch, GridGeometry, ScalarVolume, gradient_central, rmsd,
                           sample_points, sample_trilinear)


def ramp_volume(dims=(5, 4, 3), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), coef=(2.0, 0.0, 0.0), c0=0.0):
    g = GridGeometry(dims, spacing, origin)
    x = g.grid()
    return ScalarVolume(g, c0 + np.tensordot(np.asarray(coef), x, axes=1))


def test_geometry_world_coordinates():
    g = GridGeometry((4, 5, 6), (0.5, 2.0, 1.5), (10.0, -3.0, 1.0))
    assert np.array_equal(g.world(1, 2, 3), [10.5, 1.0, 5.5])
    assert np.array_equal(g.grid()[:, 1, 2, 3], g.world(1, 2, 3))
    with pytest.raises(ValueError):
        GridGeometry((1, 4, 4))
    with pytest.raises(ValueError):
        GridGeometry((4, 4, 4), (1.0, 0.0, 1.0))


def test_volume_rejects_non_finite_and_wrong_size():
    g = GridGeometry((2, 2, 2))
    with pytest.raises(ValueError):
        ScalarVolume(g, np.full(8, np.nan))
    with pytest.raises(ValueError):
        ScalarVolume(g, np.zeros(7))


def test_sample_constant():
    g = GridGeometry((4, 4, 4))
    v = ScalarVolume(g, np.full(g.dims, 3.25))
    for p in [(0, 0, 0), (1.3, 2.7, 0.1), (-5, 100, 2)]:
        assert sample_trilinear(v, p) == pytest.approx(3.25, abs=1e-15)


def test_sample_nodal_exactness():
    rng = np.random.default_rng(0)
    g = GridGeometry((5, 6, 7), (0.5, 1.0, 2.0), (1.0, 2.0, 3.0))
    v = ScalarVolume(g, rng.normal(size=g.dims))
    for ijk in [(0, 0, 0), (4, 5, 6), (2, 3, 1)]:
        assert sample_trilinear(v, g.world(*ijk)) == v.data[ijk]


def test_sample_ramp_midpoint():
    v = ramp_volume(coef=(2.0, 0.0, 0.0))
    assert sample_trilinear(v, (1.5, 1.0, 1.0)) == pytest.approx(3.0, abs=1e-15)


def test_sample_clamps_outside():
    v = ramp_volume(dims=(4, 3, 3), coef=(1.0, 0.0, 0.0))
    assert sample_trilinear(v, (-10.0, 1.0, 1.0)) == 0.0
    assert sample_trilinear(v, (99.0, 1.0, 1.0)) == 3.0


def test_sample_matches_scipy_map_coordinates():
    rng = np.random.default_rng(1)
    g = GridGeometry((7, 6, 5))
    v = ScalarVolume(g, rng.normal(size=g.dims))
    pts = rng.uniform(-2, 8, size=(3, 500))
    ours = sample_points(v, pts)
    ref = ndimage.map_coordinates(v.data, pts, order=1, mode="nearest")
    assert np.allclose(ours, ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.lists(st.floats(0.2, 3), min_size=3, max_size=3),
       st.integers(0, 2**31 - 1))
def test_trilinear_exact_on_affine_fields(coef, spacing, seed):
    g = GridGeometry((4, 5, 3), spacing, (0.5, -1.0, 2.0))
    v = ScalarVolume(g, coef[3] + np.tensordot(np.asarray(coef[:3]), g.grid(), axes=1))
    rng = np.random.default_rng(seed)
    idx = rng.uniform(0, np.asarray(g.dims)[:, None] - 1, size=(3, 50))
    pts = np.asarray(g.origin)[:, None] + np.asarray(g.spacing)[:, None] * idx
    expect = coef[3] + np.asarray(coef[:3]) @ pts
    got = sample_points(v, pts)
    scale = max(1.0, np.abs(expect).max())
    assert np.allclose(got, expect, rtol=1e-6, atol=1e-6 * scale)


def test_interpolant_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    g = GridGeometry((6, 5, 7), (1.0, 0.5, 2.0))
    v = ScalarVolume(g, rng.normal(size=g.dims))
    # random interior points plus exact nodes (including faces of the grid)
    pts = np.concatenate([rng.uniform(0, 1, size=(3, 200)) * g.extent[:, None],
                          g.grid().reshape(3, -1)], axis=1)
    _, grad = sample_points(v, pts, gradient=True)
    h = 1e-6
    for a in range(3):
        e = np.zeros((3, 1))
        e[a] = h * g.spacing[a]
        fd = (sample_points(v, pts + e) - sample_points(v, pts - e)) / (2 * e[a, 0])
        assert np.allclose(grad[a], fd, rtol=1e-6, atol=1e-6)


def test_gradient_examples():
    g = GridGeometry((6, 4, 4))
    z = gradient_central(ScalarVolume(g, np.full(g.dims, 2.0)))
    assert np.all(z.data == 0)
    lin = gradient_central(ramp_volume(dims=(6, 4, 4), coef=(1.0, 0.0, 0.0)))
    assert np.allclose(lin.data[0], 1.0) and np.allclose(lin.data[1:], 0.0)
    x = g.grid()[0]
    sq = gradient_central(ScalarVolume(g, x ** 2))
    assert sq.data[0, 3, 1, 1] == pytest.approx(6.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.lists(st.floats(0.3, 2.5), min_size=3, max_size=3))
def test_gradient_exact_for_affine(coef, spacing):
    v = ramp_volume(dims=(5, 6, 4), spacing=spacing, coef=coef[:3], c0=coef[3])
    gv = gradient_central(v).data
    inner = gv[:, 1:-1, 1:-1, 1:-1]
    for a in range(3):
        assert np.allclose(inner[a], coef[a], atol=1e-12 * max(1, np.abs(coef).max() * 10))


def test_rmsd_examples_and_symmetry():
    g = GridGeometry((2, 2, 2))
    a = ScalarVolume(g, np.zeros(8))
    b = ScalarVolume(g, np.full(8, 3.0))
    assert rmsd(a, a) == 0.0
    assert rmsd(a, b) == pytest.approx(3.0)
    line = GridGeometry((4, 2, 2))
    z = ScalarVolume(line, np.zeros(16))
    o = ScalarVolume(line, np.ones(16))
    assert rmsd(z, o) == pytest.approx(1.0)
    rng = np.random.default_rng(3)
    c = ScalarVolume(g, rng.normal(size=8))
    assert rmsd(b, c) == rmsd(c, b) > 0
    with pytest.raises(GeometryMismatch):
        rmsd(a, ScalarVolume(GridGeometry((2, 2, 3)), np.zeros(12)))


def test_sampling_independent_of_worker_count():
    rng = np.random.default_rng(4)
    g = GridGeometry((40, 40, 50))
    v = ScalarVolume(g, rng.normal(size=g.dims))
    pts = rng.uniform(-1, 41, size=(3, 150_000))
    try:
        parallel.set_workers(1)
        a, ga = sample_points(v, pts, gradient=True)
        parallel.set_workers(4)
        b, gb = sample_points(v, pts, gradient=True)
    finally:
        parallel.set_workers(1)
    assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


# ---------------------------------------------------------------------------
# file formats


@pytest.mark.parametrize("suffix", [".vol", ".nii", ".nii.gz"])
def test_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(5)
    g = GridGeometry((5, 4, 3), (0.5, 1.25, 2.0), (1.0, -2.0, 3.5))
    v = ScalarVolume(g, rng.normal(size=g.dims).astype(np.float32))
    path = tmp_path / f"v{suffix}"
    save_volume(v, path)
    w = load_volume(path)
    assert w.geometry == g
    assert np.array_equal(w.data, v.data)


def test_raw_layout_is_x_fastest(tmp_path):
    g = GridGeometry((3, 2, 2))
    data = np.arange(12, dtype=float).reshape(g.dims, order="F")
    save_volume(ScalarVolume(g, data), tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes()
    assert raw[:8] == b"SREGVOL1" and len(raw) == 48 + 48
    assert np.array_equal(np.frombuffer(raw[48:], "<f4"), np.arange(12))


def _handmade_nifti(dtype_code, values, slope=0.0, inter=0.0, magic=b"n+1\x00", dims=(2, 2, 2)):
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, dtype_code)
    struct.pack_into("<8f", hdr, 76, 1, 1, 1, 1, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    return bytes(hdr) + values


def test_nifti_scaling_rule(tmp_path):
    payload = np.full(8, 3, dtype="<i2").tobytes()
    p = tmp_path / "s.nii"
    p.write_bytes(_handmade_nifti(4, payload, slope=2.0, inter=1.0))
    assert np.all(load_volume(p).data == 7.0)


@pytest.mark.parametrize("code,dtype", [(2, "u1"), (4, "<i2"), (16, "<f4"), (64, "<f8")])
def test_nifti_datatypes(tmp_path, code, dtype):
    vals = np.arange(8).astype(dtype)
    p = tmp_path / "d.nii"
    p.write_bytes(_handmade_nifti(code, vals.tobytes()))
    assert np.array_equal(load_volume(p).flat(), np.arange(8))


def test_nifti_gzip(tmp_path):
    p = tmp_path / "g.nii.gz"
    p.write_bytes(gzip.compress(_handmade_nifti(16, np.ones(8, "<f4").tobytes())))
    assert np.all(load_volume(p).data == 1.0)


def test_nifti_errors_are_distinct(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(_handmade_nifti(16, np.ones(8, "<f4").tobytes(), magic=b"xyz\x00"))
    with pytest.raises(MalformedHeader):
        load_volume(p)
    p.write_bytes(_handmade_nifti(32, np.ones(16, "<f4").tobytes()))  # complex64
    with pytest.raises(UnsupportedDatatype):
        load_volume(p)
    p.write_bytes(_handmade_nifti(16, np.ones(5, "<f4").tobytes()))
    with pytest.raises(TruncatedPayload):
        load_volume(p)


def test_raw_errors(tmp_path):
    p = tmp_path / "x.vol"
    p.write_bytes(b"NOTMAGIC" + bytes(40))
    with pytest.raises(MalformedHeader):
        load_volume(p)
    g = GridGeometry((4, 4, 4))
    save_volume(ScalarVolume(g, np.zeros(g.dims)), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(TruncatedPayload):
        load_volume(p)
