"""Spherical wave decomposition: spherical Bessel x spherical harmonic modes.

A volume inside the ball of radius ``a`` about a centre is expanded as

    v(r, theta, phi) = sum_lmn f_lmn R_ln(r) Y_lm(theta, phi),
    R_ln(r) = j_l(k_ln r) / sqrt(N_ln),   j_l(k_ln a) = 0,

with orthonormal radial and angular factors.  Coefficients are stored
as an array of shape ``(L+1, 2L+1, N)`` indexed ``[l, m + L, n - 1]``;
entries with ``|m| > l`` are zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize
from scipy.special import spherical_jn

from . import parallel
from .volume import GridGeometry, ScalarVolume, sample_points

SWD_MAGIC = b"SREGSWD1"
_DUMP_HEADER = struct.Struct("<8sdII3d")


class QuadratureTooCoarse(ValueError):
    pass


class DegenerateProfile(ValueError):
    pass


# ---------------------------------------------------------------------------
# special functions


def bessel_zeros(l: int, count: int) -> np.ndarray:
    """First ``count`` positive zeros of the spherical Bessel function j_l."""
    if l == 0:
        return np.pi * np.arange(1, count + 1, dtype=np.float64)
    zeros = []
    step = 0.1
    hi_guess = (count + l / 2 + 2) * np.pi + 10
    x = np.arange(step, hi_guess, step)
    y = spherical_jn(l, x)
    s = np.nonzero(np.sign(y[:-1]) * np.sign(y[1:]) < 0)[0]
    for i in s[:count]:
        zeros.append(optimize.brentq(lambda t: spherical_jn(l, t), x[i], x[i + 1], xtol=1e-15, rtol=1e-15))
    if len(zeros) < count:
        raise RuntimeError(f"found only {len(zeros)} zeros of j_{l}")
    return np.asarray(zeros)


def legendre_table(L: int, x: np.ndarray) -> np.ndarray:
    """Orthonormal associated Legendre functions, shape (L+1, L+1, ...).

    ``P[l, m](cos theta) * exp(i m phi)`` is the unit-norm spherical
    harmonic Y_lm (Condon-Shortley phase), for 0 <= m <= l.
    """
    x = np.asarray(x, dtype=np.float64)
    P = np.zeros((L + 1, L + 1) + x.shape)
    sx = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    pmm = np.full(x.shape, 1.0 / np.sqrt(4 * np.pi))
    for m in range(L + 1):
        if m > 0:
            pmm = -np.sqrt((2 * m + 1) / (2.0 * m)) * sx * pmm
        P[m, m] = pmm
        if m < L:
            P[m + 1, m] = x * np.sqrt(2 * m + 3.0) * pmm
        for l in range(m + 2, L + 1):
            a = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1))
            P[l, m] = a * (x * P[l - 1, m] - b * P[l - 2, m])
    return P


# ---------------------------------------------------------------------------
# basis


@dataclass(frozen=True)
class SwdBasis:
    a: float
    L_max: int
    N_max: int
    k: np.ndarray = field(repr=False)       # (L+1, N) wave numbers
    norm: np.ndarray = field(repr=False)    # (L+1, N) N_ln
    r_nodes: np.ndarray = field(repr=False)
    r_weights: np.ndarray = field(repr=False)   # include r^2
    cos_theta: np.ndarray = field(repr=False)
    theta_weights: np.ndarray = field(repr=False)
    n_phi: int = 0

    @property
    def n_theta(self) -> int:
        return len(self.cos_theta)

    @property
    def n_r(self) -> int:
        return len(self.r_nodes)

    def radial(self, r: np.ndarray, l: int | None = None) -> np.ndarray:
        """R_ln(r), shape (L+1, N, ...) or (N, ...) for one l; zero beyond a."""
        r = np.asarray(r, dtype=np.float64)
        ls = range(self.L_max + 1) if l is None else [l]
        out = np.stack([np.stack([spherical_jn(ll, self.k[ll, n] * r) / np.sqrt(self.norm[ll, n])
                                  for n in range(self.N_max)]) for ll in ls])
        out = np.where(r <= self.a, out, 0.0)
        return out if l is None else out[0]

    def radial_table(self, samples: int = 8192):
        """R_ln tabulated on a uniform grid of [0, a] for fast synthesis."""
        r = np.linspace(0.0, self.a, samples)
        return r, self.radial(r)

    def orthonormality_residual(self) -> tuple[float, float]:
        """Max deviations of the radial and angular Gram matrices from identity."""
        R = self.radial(self.r_nodes)                      # (L+1, N, n_r)
        rad = 0.0
        for l in range(self.L_max + 1):
            G = (R[l] * self.r_weights) @ R[l].T
            rad = max(rad, float(np.abs(G - np.eye(self.N_max)).max()))
        P = legendre_table(self.L_max, self.cos_theta)     # (L+1, L+1, n_theta)
        ang = 0.0
        for m in range(self.L_max + 1):
            A = P[m:, m] * np.sqrt(self.theta_weights)
            G = 2 * np.pi * (A @ A.T)
            ang = max(ang, float(np.abs(G - np.eye(len(G))).max()))
        return rad, ang


def build_basis(a: float, L_max: int, N_max: int, n_r: int | None = None, n_theta: int | None = None,
                n_phi: int | None = None) -> SwdBasis:
    """Dirichlet spherical-wave basis on the ball of radius ``a`` (mm).

    Radial nodes are Gauss-Legendre on [0, a]; angular nodes are
    Gauss-Legendre in cos(theta) times uniform phi.
    """
    if L_max < 0 or N_max < 1:
        raise ValueError("need L_max >= 0 and N_max >= 1")
    if a <= 0:
        raise ValueError("radius must be positive")
    n_r = n_r if n_r is not None else 2 * N_max + L_max + 16
    n_theta = n_theta if n_theta is not None else 2 * (L_max + 1)
    n_phi = n_phi if n_phi is not None else 2 * L_max + 2
    if n_theta < 2 * (L_max + 1) or n_phi < 2 * L_max + 1:
        raise QuadratureTooCoarse(f"angular nodes {n_theta}x{n_phi} too few for L_max={L_max} "
                                  f"(need >= {2 * (L_max + 1)}x{2 * L_max + 1})")
    if n_r < N_max + L_max // 2 + 1:
        raise QuadratureTooCoarse(f"{n_r} radial nodes too few for N_max={N_max}, L_max={L_max}")
    k = np.empty((L_max + 1, N_max))
    norm = np.empty_like(k)
    for l in range(L_max + 1):
        z = bessel_zeros(l, N_max)
        k[l] = z / a
        norm[l] = 0.5 * a ** 3 * spherical_jn(l + 1, z) ** 2
    xr, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * a * (xr + 1)
    wr = 0.5 * a * wr * r * r
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    for arr in (k, norm, r, wr, ct, wt):
        arr.setflags(write=False)
    return SwdBasis(float(a), int(L_max), int(N_max), k, norm, r, wr, ct, wt, int(n_phi))


# ---------------------------------------------------------------------------
# transforms


@dataclass
class SwdCoefficients:
    basis: SwdBasis
    f: np.ndarray                 # (L+1, 2L+1, N) complex
    center: tuple

    def get(self, l: int, m: int, n: int) -> complex:
        return complex(self.f[l, m + self.basis.L_max, n - 1])

    def truncated(self, L: int, N: int, basis: SwdBasis | None = None) -> "SwdCoefficients":
        """Keep modes l <= L, n <= N on a matching smaller basis."""
        b = basis or build_basis(self.basis.a, L, N)
        Lm = self.basis.L_max
        f = self.f[:L + 1, Lm - L:Lm + L + 1, :N].copy()
        return SwdCoefficients(b, f, self.center)


def intensity_centroid(v: ScalarVolume) -> np.ndarray:
    w = np.clip(v.data, 0, None)
    total = w.sum()
    if total <= 0:
        return np.asarray(v.geometry.center)
    x = v.geometry.grid()
    return np.array([np.sum(w * x[i]) for i in range(3)]) / total


def default_radius(geometry: GridGeometry) -> float:
    """Radius of the sphere inscribed in the voxel-centre box."""
    return float(0.5 * min(geometry.extent))


def _node_points(basis: SwdBasis, center) -> np.ndarray:
    """World coordinates of the quadrature nodes, shape (3, n_r, n_theta, n_phi)."""
    phi = 2 * np.pi * np.arange(basis.n_phi) / basis.n_phi
    st = np.sqrt(1 - basis.cos_theta ** 2)
    dirs = np.stack([st[:, None] * np.cos(phi)[None, :],
                     st[:, None] * np.sin(phi)[None, :],
                     np.broadcast_to(basis.cos_theta[:, None], (basis.n_theta, basis.n_phi))])
    c = np.asarray(center, dtype=np.float64)
    return c[:, None, None, None] + basis.r_nodes[None, :, None, None] * dirs[:, None, :, :]


def sample_cubic(v: ScalarVolume, points: np.ndarray, coeffs: np.ndarray | None = None) -> np.ndarray:
    """Cubic B-spline interpolation at world points; zero outside the grid box."""
    if coeffs is None:
        coeffs = ndimage.spline_filter(v.data, order=3, mode="mirror")
    shape = points.shape[1:]
    idx = v.geometry.to_index(points.reshape(3, -1))
    out = ndimage.map_coordinates(coeffs, idx, order=3, mode="mirror", prefilter=False)
    lim = np.asarray(v.geometry.dims, dtype=float)[:, None] - 1
    outside = np.any((idx < -1e-9) | (idx > lim + 1e-9), axis=0)
    out[outside] = 0.0
    return out.reshape(shape)


def forward_swd(v: ScalarVolume, basis: SwdBasis, center=None) -> SwdCoefficients:
    """Project ``v`` onto the basis about ``center`` (volume centre by default).

    The volume is sampled at the quadrature nodes by cubic B-spline
    interpolation; samples outside the grid count as zero.
    """
    c = np.asarray(v.geometry.center if center is None else center, dtype=np.float64)
    vals = sample_cubic(v, _node_points(basis, c))            # (n_r, n_theta, n_phi)
    return _project(vals, basis, tuple(float(x) for x in c))


def _project(vals: np.ndarray, basis: SwdBasis, center) -> SwdCoefficients:
    L, N = basis.L_max, basis.N_max
    # phi sums by FFT: F[r, t, m] = dphi * sum_k v exp(-i m phi_k)
    F = np.fft.fft(vals, axis=2) * (2 * np.pi / basis.n_phi)
    P = legendre_table(L, basis.cos_theta)                   # (L+1, L+1, n_theta)
    R = basis.radial(basis.r_nodes)                          # (L+1, N, n_r)
    f = np.zeros((L + 1, 2 * L + 1, N), dtype=np.complex128)
    for m in range(L + 1):
        Fm = F[:, :, m]                                      # (n_r, n_theta)
        g = np.einsum("lt,t,rt->lr", P[m:, m], basis.theta_weights, Fm)   # (l, n_r)
        for i, l in enumerate(range(m, L + 1)):
            coef = (R[l] * basis.r_weights) @ g[i]          # (N,)
            f[l, L + m] = coef
            if m > 0:
                f[l, L - m] = (-1) ** m * np.conj(coef)
    return SwdCoefficients(basis, f, center)


@dataclass(frozen=True)
class FilterSpec:
    """Per-mode multipliers, or a pass band on l and n (inclusive)."""

    multipliers: np.ndarray | None = None
    l_band: tuple = (0, None)
    n_band: tuple = (1, None)

    def array(self, basis: SwdBasis) -> np.ndarray:
        L, N = basis.L_max, basis.N_max
        if self.multipliers is not None:
            M = np.asarray(self.multipliers)
            if M.shape != (L + 1, 2 * L + 1, N) or not np.all(np.isfinite(M)):
                raise ValueError("filter multipliers must be finite with shape (L+1, 2L+1, N)")
            return M
        l = np.arange(L + 1)[:, None, None]
        n = np.arange(1, N + 1)[None, None, :]
        lo, hi = self.l_band
        nlo, nhi = self.n_band
        keep = (l >= lo) & (l <= (L if hi is None else hi)) & (n >= nlo) & (n <= (N if nhi is None else nhi))
        return np.broadcast_to(keep, (L + 1, 2 * L + 1, N)).astype(np.float64)

    @classmethod
    def lowpass(cls, l_max: int | None = None, n_max: int | None = None) -> "FilterSpec":
        return cls(l_band=(0, l_max), n_band=(1, n_max))

    @classmethod
    def bandpass(cls, l_range=(0, None), n_range=(1, None)) -> "FilterSpec":
        return cls(l_band=tuple(l_range), n_band=tuple(n_range))


def synthesize_points(c: SwdCoefficients, points: np.ndarray, filt: FilterSpec | None = None,
                      table_samples: int = 8192) -> np.ndarray:
    """Evaluate the (filtered) expansion at world points, zero beyond radius a."""
    basis = c.basis
    L, N = basis.L_max, basis.N_max
    coef = c.f if filt is None else c.f * filt.array(basis)
    points = np.asarray(points, dtype=np.float64)
    shape = points.shape[1:]
    rel_all = points.reshape(3, -1) - np.asarray(c.center)[:, None]
    keep = np.sum(rel_all * rel_all, axis=0) <= basis.a ** 2
    rel = rel_all[:, keep]
    r_tab, R_tab = basis.radial_table(table_samples)
    dr = r_tab[1] - r_tab[0]
    R_rows = np.ascontiguousarray(R_tab.reshape((L + 1) * N, -1).T)   # (samples, (L+1) N)
    if not np.any(coef):
        return np.zeros(shape)

    def work(a, b):
        d = rel[:, a:b]
        r = np.sqrt(np.sum(d * d, axis=0))
        inside = r <= basis.a
        safe = np.where(r > 0, r, 1.0)
        x = np.where(r > 0, d[2] / safe, 1.0)
        phi = np.arctan2(d[1], d[0])
        # linear interpolation in the radial table
        t = np.clip(r / dr, 0, len(r_tab) - 1 - 1e-9)
        i0 = t.astype(np.intp)
        w = t - i0
        P = legendre_table(L, x)
        Rr = ((1 - w)[:, None] * R_rows[i0] + w[:, None] * R_rows[i0 + 1]).reshape(-1, L + 1, N)
        hr = np.zeros((L + 1, b - a))
        hi = np.zeros((L + 1, b - a))
        for l in range(L + 1):
            cl = coef[l, L:L + l + 1]                   # m = 0..l, (l+1, N)
            if not np.any(cl):
                continue
            Rl = Rr[:, l, :].T
            hr[:l + 1] += (cl.real @ Rl) * P[l, :l + 1]
            hi[:l + 1] += (cl.imag @ Rl) * P[l, :l + 1]
        out = hr[0].copy()
        e1 = np.exp(1j * phi)
        em = np.ones_like(e1)
        for m in range(1, L + 1):
            em = em * e1
            out += 2 * (hr[m] * em.real - hi[m] * em.imag)
        return np.where(inside, out, 0.0)

    full = np.zeros(rel_all.shape[1])
    if rel.shape[1]:
        full[keep] = parallel.chunked(work, rel.shape[1], chunk=1 << 14)
    return full.reshape(shape)


def inverse_swd(c: SwdCoefficients, filt: FilterSpec | None = None, target: GridGeometry | None = None) -> ScalarVolume:
    """Synthesize the expansion on the voxel centres of ``target``."""
    if target is None:
        raise ValueError("a target geometry is required")
    return ScalarVolume(target, synthesize_points(c, target.grid(), filt))


def relative_l2(a: ScalarVolume, b: ScalarVolume, mask: np.ndarray | None = None) -> float:
    d = a.data - b.data
    if mask is not None:
        d = d[mask]
        ref = b.data[mask]
    else:
        ref = b.data
    return float(np.sqrt(np.sum(d * d) / np.sum(ref * ref)))


# ---------------------------------------------------------------------------
# partial profiles


def radial_profile(c: SwdCoefficients, r, N: int | None = None) -> np.ndarray:
    """(l, m) = (0, 0) partial sum: the spherical mean of the volume at radius r."""
    N = c.basis.N_max if N is None else N
    r = np.asarray(r, dtype=np.float64)
    R0 = c.basis.radial(r, 0)[:N]
    val = np.tensordot(c.f[0, c.basis.L_max, :N].real, R0, axes=1)
    return val / (2 * np.sqrt(np.pi))


def angular_profile(c: SwdCoefficients, theta, phi, L: int | None = None) -> np.ndarray:
    """n = 1 partial sum, sum_lm f_lm1 Y_lm / sqrt(N_l1), at (theta, phi)."""
    L = c.basis.L_max if L is None else L
    Lb = c.basis.L_max
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    P = legendre_table(L, np.cos(theta))
    out = np.zeros(np.broadcast(theta, phi).shape)
    for l in range(L + 1):
        s = 1 / np.sqrt(c.basis.norm[l, 0])
        out = out + s * (c.f[l, Lb, 0].real * P[l, 0])
        for m in range(1, l + 1):
            out = out + s * 2 * (c.f[l, Lb + m, 0] * P[l, m] * np.exp(1j * m * phi)).real
    return out


# ---------------------------------------------------------------------------
# similarity estimation


@dataclass(frozen=True)
class SimilarityParams:
    """T(y) = center + translation + s R (y - center), R = Rz(phi) Ry(theta)."""

    s_r: float = 1.0
    theta_r: float = 0.0
    phi_r: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    psi_r: float = 0.0     # optional third angle, Rz(phi) Ry(theta) Rz(psi)

    def __post_init__(self):
        if not self.s_r > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "theta_r", _wrap(self.theta_r))
        object.__setattr__(self, "phi_r", _wrap(self.phi_r))
        object.__setattr__(self, "psi_r", _wrap(self.psi_r))

    def rotation(self) -> np.ndarray:
        return _rz(self.phi_r) @ _ry(self.theta_r) @ _rz(self.psi_r)

    def forward(self, y: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)[:, None]
        t = np.asarray(self.translation)[:, None]
        shape = y.shape
        return (c + t + self.s_r * self.rotation() @ (y.reshape(3, -1) - c)).reshape(shape)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)[:, None]
        t = np.asarray(self.translation)[:, None]
        shape = x.shape
        return (c + self.rotation().T @ (x.reshape(3, -1) - c - t) / self.s_r).reshape(shape)


def _wrap(a: float) -> float:
    return float((a + np.pi) % (2 * np.pi) - np.pi)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


SCALE_BOUNDS = (0.5, 2.0)


def estimate_scale(c0: SwdCoefficients, c1: SwdCoefficients, N: int | None = None, samples: int = 256) -> float:
    """s minimising the integral over [0, a/2] of (P0(r) - P1(s r))^2."""
    a = min(c0.basis.a, c1.basis.a)
    r = np.linspace(0.0, a / 2, samples)
    p0 = radial_profile(c0, r, N)
    if np.sum(p0 * p0) <= 1e-20 * max(1.0, samples):
        raise DegenerateProfile("radial profile of the reference has no energy")

    def cost(s):
        d = p0 - radial_profile(c1, s * r, N)
        return float(np.trapezoid(d * d, r))

    grid = np.exp(np.linspace(np.log(SCALE_BOUNDS[0]), np.log(SCALE_BOUNDS[1]), 61))
    vals = [cost(s) for s in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(cost, bracket=None, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-6})
    s = float(res.x) if res.fun <= vals[i] else float(grid[i])
    return s


def _angular_grid(L: int):
    nt = 2 * (L + 1) + 8
    npf = 2 * L + 8
    ct, wt = np.polynomial.legendre.leggauss(nt)
    theta = np.arccos(ct)
    phi = 2 * np.pi * np.arange(npf) / npf
    return theta, phi, wt * (2 * np.pi / npf)


def estimate_rotation(c0: SwdCoefficients, c1: SwdCoefficients, L: int | None = None,
                      start=None, coarse: bool = True) -> tuple[float, float]:
    """(theta, phi) minimising the angular-profile mismatch A1 vs A0 shifted by (theta, phi).

    The shift ``A0(theta - theta_r, phi - phi_r)`` is the profile of the
    reference moved forward; profiles are compared after normalisation to
    unit norm so that a scale change does not bias the angles.
    """
    L = min(c0.basis.L_max, c1.basis.L_max) if L is None else L
    th, ph, w = _angular_grid(L)
    T, Ph = np.meshgrid(th, ph, indexing="ij")
    W = np.broadcast_to(w[:, None], T.shape)
    a1 = angular_profile(c1, T, Ph, L)
    n1 = np.sqrt(np.sum(W * a1 * a1))
    if n1 <= 1e-300:
        raise DegenerateProfile("angular profile has no energy")
    a1 = a1 / n1

    def cost(x):
        a0 = angular_profile(c0, T - x[0], Ph - x[1], L)
        n0 = np.sqrt(np.sum(W * a0 * a0))
        if n0 <= 1e-300:
            return 4.0
        d = a0 / n0 - a1
        return float(np.sum(W * d * d))

    if coarse:
        best = None
        for t in np.deg2rad(np.arange(-90, 91, 10)):
            for p in np.deg2rad(np.arange(-180, 180, 10)):
                val = cost((t, p))
                if best is None or val < best[0]:
                    best = (val, t, p)
        x0 = np.array(best[1:])
    else:
        x0 = np.asarray(start if start is not None else (0.0, 0.0), dtype=float)
    res = optimize.minimize(cost, x0, method="Nelder-Mead",
                            options={"xatol": 1e-5, "fatol": 1e-12, "maxiter": 400})
    return float(res.x[0]), float(res.x[1])


def estimate_similarity(c0: SwdCoefficients, c1: SwdCoefficients, coarse_order: int = 8) -> SimilarityParams:
    """Similarity taking the volume of ``c0`` to the volume of ``c1``.

    Scale comes from the radial profiles, the two angles from the angular
    profiles: a coarse pass at order ``min(coarse_order, L/N_max)`` then a
    refinement at full order.  The transform centre is ``c0.center`` and
    the translation maps it to ``c1.center``.
    """
    Lc = min(coarse_order, c0.basis.L_max, c1.basis.L_max)
    Nc = min(coarse_order, c0.basis.N_max, c1.basis.N_max)
    s_coarse = estimate_scale(c0, c1, Nc)
    s = _refine_scale(c0, c1, s_coarse)
    t, p = estimate_rotation(c0, c1, Lc, coarse=True)
    t, p = estimate_rotation(c0, c1, None, start=(t, p), coarse=False)
    trans = tuple(float(x) for x in np.asarray(c1.center) - np.asarray(c0.center))
    return SimilarityParams(s, t, p, tuple(c0.center), trans)


def _refine_scale(c0, c1, s0: float) -> float:
    a = min(c0.basis.a, c1.basis.a)
    r = np.linspace(0.0, a / 2, 512)
    p0 = radial_profile(c0, r)

    def cost(s):
        d = p0 - radial_profile(c1, s * r)
        return float(np.trapezoid(d * d, r))

    lo, hi = max(SCALE_BOUNDS[0], s0 / 1.08), min(SCALE_BOUNDS[1], s0 * 1.08)
    res = optimize.minimize_scalar(cost, bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
    return float(res.x)


def apply_similarity(v: ScalarVolume, params: SimilarityParams, target: GridGeometry | None = None,
                     method: str = "swd", L_max: int = 16, N_max: int = 16, radius: float | None = None) -> ScalarVolume:
    """Resample ``v`` under T: output(x) = v(T^-1(x)) on ``target``.

    ``method="swd"`` expands ``v`` about the transform centre and
    synthesizes at the pulled-back points (zero beyond the expansion
    radius); ``"trilinear"`` samples the voxels directly.
    """
    target = v.geometry if target is None else target
    src = params.inverse(target.grid())
    if method == "trilinear":
        return ScalarVolume(target, sample_points(v, src))
    if method != "swd":
        raise ValueError(f"unknown resampling method {method!r}")
    a = default_radius(v.geometry) if radius is None else radius
    basis = build_basis(a, L_max, N_max)
    c = forward_swd(v, basis, params.center)
    return ScalarVolume(target, synthesize_points(c, src))


def refine_rotation_3d(v0: ScalarVolume, v1: ScalarVolume, params: SimilarityParams,
                       step_deg: float = 15.0, span_deg: float = 30.0) -> SimilarityParams:
    """Three-angle refinement scored by voxel RMSD (trilinear resampling).

    An exhaustive grid of Euler-angle offsets around ``params`` picks the
    start for a Nelder-Mead polish over (theta, phi, psi).
    """
    def score(x):
        p = SimilarityParams(params.s_r, x[0], x[1], params.center, params.translation, x[2])
        out = apply_similarity(v0, p, v1.geometry, method="trilinear")
        d = (out.data - v1.data).ravel()
        return float(np.sqrt(np.mean(d * d)))

    base = np.array([params.theta_r, params.phi_r, params.psi_r])
    offs = np.deg2rad(np.arange(-span_deg, span_deg + 1e-9, step_deg))
    best = (score(base), base)
    for dt in offs:
        for dp in offs:
            for ds in offs:
                x = base + np.array([dt, dp, ds])
                val = score(x)
                if val < best[0]:
                    best = (val, x)
    res = optimize.minimize(score, best[1], method="Nelder-Mead",
                            options={"xatol": 1e-4, "fatol": 1e-10, "maxiter": 300})
    x = res.x if res.fun <= best[0] else best[1]
    return SimilarityParams(params.s_r, x[0], x[1], params.center, params.translation, x[2])


# ---------------------------------------------------------------------------
# coefficient files


def save_coefficients(c: SwdCoefficients, path) -> None:
    """SREGSWD1 header (a, L_max, N_max, centre) then complex64 f in (l, m, n) order."""
    b = c.basis
    L = b.L_max
    parts = [_DUMP_HEADER.pack(SWD_MAGIC, b.a, L, b.N_max, *c.center)]
    for l in range(L + 1):
        parts.append(c.f[l, L - l:L + l + 1, :].astype("<c8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_coefficients(path) -> SwdCoefficients:
    from .io import MalformedHeader, TruncatedPayload
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise MalformedHeader("coefficient file shorter than its header")
    magic, a, L, N, cx, cy, cz = _DUMP_HEADER.unpack_from(raw)
    if magic != SWD_MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}")
    need = _DUMP_HEADER.size + 8 * N * (L + 1) ** 2
    if len(raw) < need:
        raise TruncatedPayload("coefficient payload truncated")
    basis = build_basis(a, L, N)
    f = np.zeros((L + 1, 2 * L + 1, N), dtype=np.complex128)
    off = _DUMP_HEADER.size
    for l in range(L + 1):
        cnt = (2 * l + 1) * N
        f[l, L - l:L + l + 1, :] = np.frombuffer(raw, "<c8", cnt, off).reshape(2 * l + 1, N)
        off += 8 * cnt
    return SwdCoefficients(basis, f, (cx, cy, cz))
