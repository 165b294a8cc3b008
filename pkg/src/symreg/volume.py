"""Grid geometry, scalar and vector volumes, sampling and differentiation.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x.  On disk the
layout is x-fastest, which is ``ravel(order="F")`` of these arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import parallel


class GeometryMismatch(ValueError):
    """Two volumes that must share a grid do not."""


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry needs three dims, spacings and origins")
        if min(dims) < 2:
            raise ValueError(f"all dims must be >= 2, got {dims}")
        if not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise ValueError("origin must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> np.ndarray:
        """Physical size (mm) covered by voxel centres, per axis."""
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.extent

    def world(self, i, j, k) -> np.ndarray:
        """World coordinate of voxel ``(i, j, k)``: ``origin + spacing * index``."""
        return np.asarray(self.origin) + np.asarray(self.spacing) * np.array([i, j, k], dtype=float)

    def grid(self) -> np.ndarray:
        """World coordinates of every voxel, shape ``(3, nx, ny, nz)``."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous voxel indices of world points with leading axis 3."""
        o = np.asarray(self.origin).reshape((3,) + (1,) * (points.ndim - 1))
        s = np.asarray(self.spacing).reshape(o.shape)
        return (points - o) / s

    def same_as(self, other: "GridGeometry") -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, rtol=1e-6, atol=0)
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-6 * min(self.spacing)))

    def downsampled(self, factor: int) -> "GridGeometry":
        """Coarser grid covering the same physical box."""
        dims = tuple(max(2, -(-n // factor)) for n in self.dims)
        ext = self.extent
        spacing = tuple(e / (n - 1) for e, n in zip(ext, dims))
        return GridGeometry(dims, spacing, self.origin)


def check_same_geometry(*volumes) -> GridGeometry:
    g = volumes[0].geometry
    for v in volumes[1:]:
        if not g.same_as(v.geometry):
            raise GeometryMismatch(f"geometry mismatch: {g} vs {v.geometry}")
    return g


@dataclass(frozen=True)
class ScalarVolume:
    geometry: GridGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.size != self.geometry.n_voxels:
            raise ValueError(f"data has {data.size} values, geometry needs {self.geometry.n_voxels}")
        data = data.reshape(self.geometry.dims)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, geometry: GridGeometry, flat) -> "ScalarVolume":
        """Build from an x-fastest flat array."""
        return cls(geometry, np.asarray(flat).reshape(geometry.dims, order="F"))

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(self.geometry, data)


@dataclass(frozen=True)
class VectorVolume:
    geometry: GridGeometry
    data: np.ndarray = field(repr=False)  # shape (3, nx, ny, nz)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.size != 3 * self.geometry.n_voxels:
            raise ValueError("vector volume needs 3 components per voxel")
        data = data.reshape((3,) + self.geometry.dims)
        if not np.all(np.isfinite(data)):
            raise ValueError("vector volume contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def flat(self) -> np.ndarray:
        """Per-voxel interleaved components, x-fastest."""
        return self.data.ravel(order="F")


# ---------------------------------------------------------------------------
# sampling


def _corner_setup(u, n):
    uc = np.clip(u, 0.0, n - 1)
    i0 = np.minimum(np.floor(uc).astype(np.intp), n - 2)
    return i0, uc - i0


def _axis_slope(flat, ns, strides, idx, weights, axis, cells):
    """Slope along ``axis`` of the interpolant in cell ``cells`` (clamped)."""
    o1, o2 = [o for o in range(3) if o != axis]
    hi = np.clip(cells + 1, 0, ns[axis] - 1) * strides[axis]
    lo = np.clip(cells, 0, ns[axis] - 1) * strides[axis]
    out = 0.0
    for b in (0, 1):
        for d in (0, 1):
            off = (idx[o1] + b) * strides[o1] + (idx[o2] + d) * strides[o2]
            out = out + weights[o1][b] * weights[o2][d] * (flat[off + hi] - flat[off + lo])
    return out


def _trilinear_index(data: np.ndarray, u: np.ndarray, want_grad: bool):
    """Clamped trilinear interpolation at continuous indices ``u`` (3, M).

    The gradient (in index units) is the exact derivative of the clamped
    interpolant.  On cell faces, where the interpolant has a kink, it is
    the mean of the two one-sided slopes; this is the limit of a central
    finite difference taken across the face.
    """
    nx, ny, nz = data.shape
    flat = data.ravel()
    sy, sx = nz, ny * nz
    ns = (nx, ny, nz)
    idx, frac = zip(*(_corner_setup(u[a], ns[a]) for a in range(3)))
    i0, j0, k0 = idx
    tx, ty, tz = frac
    base = i0 * sx + j0 * sy + k0
    c = {}
    for a in (0, 1):
        for b in (0, 1):
            for d in (0, 1):
                c[a, b, d] = flat[base + a * sx + b * sy + d]
    wx = (1 - tx, tx)
    wy = (1 - ty, ty)
    wz = (1 - tz, tz)
    val = sum(wx[a] * wy[b] * wz[d] * c[a, b, d] for a in (0, 1) for b in (0, 1) for d in (0, 1))
    if not want_grad:
        return val, None

    grad = np.empty((3,) + val.shape)
    strides = (sx, sy, 1)
    weights = (wx, wy, wz)
    for axis in range(3):
        cell = np.floor(u[axis]).astype(np.intp)
        g = _axis_slope(flat, ns, strides, idx, weights, axis, cell)
        face = np.nonzero(u[axis] == cell)[0]
        if face.size:
            sub_idx = [ix[face] for ix in idx]
            sub_w = [(w[0][face], w[1][face]) for w in weights]
            c = cell[face]
            g[face] = 0.5 * (_axis_slope(flat, ns, strides, sub_idx, sub_w, axis, c - 1)
                             + _axis_slope(flat, ns, strides, sub_idx, sub_w, axis, c))
        grad[axis] = g
    return val, grad


def sample_points(v: ScalarVolume, points: np.ndarray, gradient: bool = False):
    """Trilinear samples of ``v`` at world points of shape ``(3, ...)``.

    Points outside the grid take the value of the nearest boundary face.
    With ``gradient=True`` also returns the spatial gradient (per mm) of
    the interpolant, shape ``(3, ...)``.
    """
    points = np.asarray(points, dtype=np.float64)
    shape = points.shape[1:]
    u = v.geometry.to_index(points).reshape(3, -1)
    m = u.shape[1]
    if gradient:
        def work(a, b):
            val, g = _trilinear_index(v.data, u[:, a:b], True)
            return np.concatenate([val[:, None], g.T], axis=1)

        res = parallel.chunked(work, m, (4,))
        inv_sp = 1.0 / np.asarray(v.geometry.spacing)
        return res[:, 0].reshape(shape), (res[:, 1:].T * inv_sp[:, None]).reshape((3,) + shape)

    res = parallel.chunked(lambda a, b: _trilinear_index(v.data, u[:, a:b], False)[0], m)
    return res.reshape(shape)


def sample_trilinear(v: ScalarVolume, point) -> float:
    """Trilinear value of ``v`` at one world point (clamped to the grid)."""
    p = np.asarray(point, dtype=np.float64).reshape(3, 1)
    if not np.all(np.isfinite(p)):
        raise ValueError("sample point must be finite")
    return float(sample_points(v, p)[0])


def gradient_central(v: ScalarVolume) -> VectorVolume:
    """Central differences inside, one-sided on faces, per mm."""
    g = np.gradient(v.data, *v.geometry.spacing, edge_order=1)
    return VectorVolume(v.geometry, np.stack(g))


def gradient_array(a: np.ndarray, spacing) -> np.ndarray:
    """``gradient_central`` on a bare array; returns shape ``(3,) + a.shape``."""
    return np.stack(np.gradient(a, *spacing, edge_order=1))


def rmsd(a: ScalarVolume, b: ScalarVolume) -> float:
    """Root-mean-square deviation between two volumes on the same grid."""
    check_same_geometry(a, b)
    d = (a.data - b.data).ravel()
    # np.sum uses pairwise summation: fixed reduction tree for a given size
    return float(np.sqrt(np.sum(d * d) / d.size))
