"""Brute-force reference implementations used as test oracles."""

import math

import numpy as np

from symreg.flow import hamiltonian_energy, local_force, PhaseSpaceField
from symreg.volume import GridGeometry, ScalarVolume


def trilinear_scalar(data, spacing, origin, point):
    """Clamped trilinear interpolation of one point, written with plain loops."""
    n = data.shape
    u = []
    for a in range(3):
        t = (point[a] - origin[a]) / spacing[a]
        u.append(min(max(t, 0.0), n[a] - 1))
    i = [min(int(math.floor(u[a])), n[a] - 2) for a in range(3)]
    f = [u[a] - i[a] for a in range(3)]
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                total += w * data[i[0] + dx, i[1] + dy, i[2] + dz]
    return total


def energy_loop(I0, I1, q, p):
    g = I0.geometry
    nx, ny, nz = g.dims
    dV = g.voxel_volume
    total, vol = 0.0, 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                pt = q[:, i, j, k]
                r = I0.data[i, j, k] - trilinear_scalar(I1.data, g.spacing, g.origin, pt)
                pp = p[:, i, j, k]
                total += (pp[0] ** 2 + pp[1] ** 2 + pp[2] ** 2 + r * r) * dV
                vol += dV
    return total / (2 * vol)


def mismatch_loop(I0, I1, q):
    g = I0.geometry
    total = 0.0
    for idx in np.ndindex(*g.dims):
        r = I0.data[idx] - trilinear_scalar(I1.data, g.spacing, g.origin, q[(slice(None),) + idx])
        total += r * r * g.voxel_volume
    return total


def random_instance(rng, n=6, spacing=(1.0, 1.0, 1.0)):
    """Random images and coordinates strictly inside grid cells."""
    g = GridGeometry((n, n, n), spacing)
    I0 = ScalarVolume(g, rng.standard_normal(g.dims))
    I1 = ScalarVolume(g, rng.standard_normal(g.dims))
    x = g.grid()
    # offsets keep every coordinate at least 0.1 voxel from a cell face and inside the box
    frac = rng.uniform(0.1, 0.9, x.shape)
    base = np.minimum(x / np.reshape(spacing, (3, 1, 1, 1)), n - 2)
    q = (np.floor(base) + frac) * np.reshape(spacing, (3, 1, 1, 1))
    return g, I0, I1, q


def force_fd_error(rng, n=6, h_vox=1e-4, spacing=(1.0, 1.0, 1.0)):
    """Max relative deviation between the local force and -N * dU/dq by central differences."""
    g, I0, I1, q = random_instance(rng, n, spacing)
    state = PhaseSpaceField.start(g, q)
    f = local_force(state, I0, I1)
    N = g.n_voxels
    fd = np.empty_like(f)
    for c in range(3):
        h = h_vox * g.spacing[c]
        for idx in np.ndindex(*g.dims):
            sl = (c,) + idx
            s = state.copy()
            s.q[sl] += h
            up = hamiltonian_energy(s, I0, I1)
            s.q[sl] -= 2 * h
            down = hamiltonian_energy(s, I0, I1)
            fd[sl] = -N * (up - down) / (2 * h)
    scale = np.abs(f).max()
    return float(np.abs(f - fd).max() / scale)


ANISO_BLOBS = (((8, 3, 2), 4.0, 1.0), ((-6, 7, -4), 3.0, 0.8), ((2, -9, 6), 5.0, 0.6), ((-3, -2, -9), 3.5, 0.7))


def blob_cluster(g, transform=None, blobs=ANISO_BLOBS):
    """Sum of Gaussians about the grid centre, optionally pushed forward by ``transform``.

    Evaluated analytically at transform.inverse(x), so a transformed
    volume carries no resampling error.
    """
    x = g.grid()
    pts = x if transform is None else transform.inverse(x)
    c = np.asarray(g.center)
    out = np.zeros(g.dims)
    for off, s, a in blobs:
        d = pts - (c + np.asarray(off, dtype=float))[:, None, None, None]
        out += a * np.exp(-np.sum(d * d, axis=0) / (2 * s * s))
    return ScalarVolume(g, out)
