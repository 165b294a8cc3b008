"""Synthetic ground truth: the C-versus-ball pair and five analytic warps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .volume import GridGeometry, ScalarVolume, sample_points

WARP_KINDS = ("whirl", "stretch_anterior", "twist", "compress_axial", "compress_longitudinal")

# largest |h| of the compression profiles
H_MAX = 0.45
# minimum analytic Jacobian determinant accepted at construction
DET_FLOOR = 0.05


class WarpInversionError(RuntimeError):
    pass


def _ramp(d):
    """1-voxel linear edge: 1 inside (d > 0.5), 0 outside (d < -0.5)."""
    return np.clip(d + 0.5, 0.0, 1.0)


def make_c_sphere_pair(dims=(64, 64, 64), radii=(12.0, 22.0), gap_angle=60.0, ball_radius=None,
                       spacing=(1.0, 1.0, 1.0)):
    """Return ``(C, ball)`` sharing one geometry, intensities in [0, 1].

    ``radii`` are the inner and outer shell radii in voxels; the C is the
    shell minus a cone of full aperture ``gap_angle`` degrees opening
    along +x.  The ball has radius ``ball_radius`` (outer radius by default).
    """
    r_in, r_out = map(float, radii)
    g = GridGeometry(tuple(dims), tuple(spacing))
    if not 0 <= r_in < r_out:
        raise ValueError("shell radii must satisfy 0 <= inner < outer")
    if r_out >= min(g.dims) / 2:
        raise ValueError("outer radius must be below half the smallest dimension")
    if not 0 <= gap_angle < 360:
        raise ValueError("gap_angle must lie in [0, 360)")
    rb = r_out if ball_radius is None else float(ball_radius)
    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in g.dims], indexing="ij"))
    c = (np.asarray(g.dims, dtype=float) - 1) / 2
    rel = idx - c[:, None, None, None]
    r = np.sqrt(np.sum(rel * rel, axis=0))
    shell = np.minimum(_ramp(r_out - r), _ramp(r - r_in))
    if gap_angle > 0:
        half = np.deg2rad(gap_angle) / 2
        ang = np.arctan2(np.hypot(rel[1], rel[2]), rel[0])  # angle from +x
        # arc distance from the cone surface, in voxels
        shell = np.minimum(shell, _ramp(r * (ang - half)))
    ball = _ramp(rb - r)
    return ScalarVolume(g, shell), ScalarVolume(g, ball)


def textured_phantom(dims=(96, 96, 96), seed=0, spacing=(1.0, 1.0, 1.0), texture_sigma=3.0):
    """Smooth random texture inside a soft ellipsoid, intensities in [0, 1]."""
    g = GridGeometry(tuple(dims), tuple(spacing))
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.standard_normal(g.dims), texture_sigma, mode="wrap")
    noise /= np.abs(noise).max()
    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in g.dims], indexing="ij"))
    c = (np.asarray(g.dims, dtype=float) - 1) / 2
    semi = np.asarray(g.dims, dtype=float) * np.array([0.36, 0.42, 0.34])
    rho = np.sqrt(np.sum(((idx - c[:, None, None, None]) / semi[:, None, None, None]) ** 2, axis=0))
    mask = 0.5 * (1 - np.tanh((rho - 1.0) / 0.05))
    body = mask * (0.6 + 0.4 * noise)
    body = ndimage.gaussian_filter(body, 1.0)
    return ScalarVolume(g, np.clip(body, 0.0, None) / max(body.max(), 1e-12))


# ---------------------------------------------------------------------------
# analytic warps


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _dsmoothstep(u):
    inside = (u > 0) & (u < 1)
    return np.where(inside, 6 * u * (1 - u), 0.0)


@dataclass(frozen=True)
class AnalyticWarp:
    kind: str
    amplitude: float
    center: tuple
    extent: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in WARP_KINDS:
            raise ValueError(f"unknown warp kind {self.kind!r}")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if len(self.center) != 3:
            raise ValueError("center must be a world triple")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        lo = self.min_det_bound()
        if not lo > DET_FLOOR:
            raise ValueError(f"{self.kind} amplitude {self.amplitude} breaks the diffeomorphism bound "
                             f"(det lower bound {lo:.3g} <= {DET_FLOOR})")

    def min_det_bound(self) -> float:
        """Analytic lower bound of det(dW/dx) over all space."""
        A = self.amplitude
        if self.kind in ("whirl", "twist"):
            return 1.0
        if self.kind == "stretch_anterior":
            return min(1.0, 1.0 + A)
        if self.kind == "compress_axial":
            return min(1.0, 1.0 - A * H_MAX) ** 2 if 1.0 - A * H_MAX > 0 else 0.0
        return min(1.0, 1.0 - A * H_MAX)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AnalyticWarp":
        d = json.loads(text)
        return cls(d["kind"], float(d["amplitude"]), tuple(d["center"]), float(d["extent"]), int(d.get("seed", 0)))


def _h(u, e):
    s = (u + e) / (2 * e)
    return H_MAX * _smoothstep(s), H_MAX * _dsmoothstep(s) / (2 * e)


def eval_warp(w: AnalyticWarp, x, jacobian: bool = False):
    """Forward warp of world points ``x`` (shape (3, ...)); optionally the 3x3 Jacobian field."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(w.center).reshape((3,) + (1,) * (x.ndim - 1))
    d = x - c
    A, e = w.amplitude, w.extent
    y = x.copy()
    J = np.zeros((3, 3) + x.shape[1:])
    for i in range(3):
        J[i, i] = 1.0
    if w.kind in ("whirl", "twist"):
        r = np.hypot(d[0], d[1])
        if w.kind == "twist":
            t = np.tanh(d[2] / e)
            alpha = A * t
            da_dr = np.zeros_like(r)
            da_dz = A * (1 - t * t) / e
        else:
            ez = 2 * e
            inside = np.abs(d[2]) < ez
            cz = np.where(inside, np.cos(np.pi * d[2] / (2 * ez)), 0.0)
            sz = np.where(inside, np.sin(np.pi * d[2] / (2 * ez)), 0.0)
            radial = np.minimum(r / e, 1.0)
            alpha = A * radial * cz * cz
            da_dr = np.where(r < e, A * cz * cz / e, 0.0)
            da_dz = -A * radial * 2 * cz * sz * np.pi / (2 * ez)
        ca, sa = np.cos(alpha), np.sin(alpha)
        y[0] = c[0] + ca * d[0] - sa * d[1]
        y[1] = c[1] + sa * d[0] + ca * d[1]
        if jacobian:
            with np.errstate(invalid="ignore", divide="ignore"):
                drdx = np.where(r > 0, d[0] / np.where(r > 0, r, 1), 0.0)
                drdy = np.where(r > 0, d[1] / np.where(r > 0, r, 1), 0.0)
            grad_a = (da_dr * drdx, da_dr * drdy, da_dz)
            # d(R d)/d alpha = R' d
            ry0 = -sa * d[0] - ca * d[1]
            ry1 = ca * d[0] - sa * d[1]
            J[0, 0], J[0, 1] = ca, -sa
            J[1, 0], J[1, 1] = sa, ca
            for j in range(3):
                J[0, j] = J[0, j] + ry0 * grad_a[j]
                J[1, j] = J[1, j] + ry1 * grad_a[j]
    elif w.kind == "stretch_anterior":
        t = np.tanh(d[1] / e)
        y[1] = x[1] + A * e * t
        J[1, 1] = 1 + A * (1 - t * t)
    elif w.kind == "compress_axial":
        h, dh = _h(d[2], e)
        s = 1 - A * h
        y[0] = c[0] + d[0] * s
        y[1] = c[1] + d[1] * s
        J[0, 0] = J[1, 1] = s
        J[0, 2] = -A * dh * d[0]
        J[1, 2] = -A * dh * d[1]
    else:  # compress_longitudinal
        h, dh = _h(d[0], e)
        s = 1 - A * h
        y[2] = c[2] + d[2] * s
        J[2, 2] = s
        J[2, 0] = -A * dh * d[2]
    if jacobian:
        return y, J
    return y


def invert_warp(w: AnalyticWarp, y, tol: float = 1e-6, max_iter: int = 100):
    """Solve eval_warp(x) = y by damped Newton iteration (vectorised over points)."""
    y = np.asarray(y, dtype=np.float64)
    shape = y.shape
    yf = y.reshape(3, -1)
    x = yf.copy()
    for _ in range(max_iter):
        fx, J = eval_warp(w, x, jacobian=True)
        r = fx - yf
        err = np.sqrt(np.sum(r * r, axis=0))
        if err.max() <= tol:
            return x.reshape(shape)
        step = np.linalg.solve(np.moveaxis(J, (0, 1), (-2, -1)), np.moveaxis(r, 0, -1)[..., None])[..., 0].T
        # damp large Newton steps so the iteration stays in the basin
        norm = np.sqrt(np.sum(step * step, axis=0))
        cap = np.maximum(1.0, norm / (0.5 * w.extent))
        x = x - step / cap
    fx = eval_warp(w, x)
    err = np.sqrt(np.sum((fx - yf) ** 2, axis=0))
    if err.max() <= tol:
        return x.reshape(shape)
    raise WarpInversionError(f"warp inversion did not converge (max residual {err.max():.3g})")


def warp_volume_analytic(v: ScalarVolume, w: AnalyticWarp) -> ScalarVolume:
    """Pull-back: output(x) = v(W^-1(x)), so features move forward under W."""
    src = invert_warp(w, v.geometry.grid())
    return ScalarVolume(v.geometry, sample_points(v, src))


def max_displacement(w: AnalyticWarp, geometry: GridGeometry, n: int = 24) -> float:
    pts = _lattice(geometry, n)
    return float(np.sqrt(np.sum((eval_warp(w, pts) - pts) ** 2, axis=0)).max())


def min_det(w: AnalyticWarp, geometry: GridGeometry, n: int = 32) -> float:
    from .flow import det3
    pts = _lattice(geometry, n)
    return float(det3(eval_warp(w, pts, jacobian=True)[1]).min())


def _lattice(geometry: GridGeometry, n: int) -> np.ndarray:
    axes = [np.linspace(o, o + ext, n) for o, ext in zip(geometry.origin, geometry.extent)]
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)


# amplitudes that give a maximum displacement of 1/16 of the grid size with
# extent = a quarter of the smallest physical side (scale invariant)
DEFAULT_AMPLITUDES = {
    "whirl": 0.09,
    "stretch_anterior": 0.26,
    "twist": 0.092,
    "compress_axial": 0.2,
    "compress_longitudinal": 0.28,
}


def default_warp(kind: str, geometry: GridGeometry, amplitude: float | None = None, seed: int = 0) -> AnalyticWarp:
    extent = float(min(np.asarray(geometry.extent))) / 4
    A = DEFAULT_AMPLITUDES[kind] if amplitude is None else amplitude
    return AnalyticWarp(kind, A, tuple(geometry.center), extent, seed)


def generate_panel(v: ScalarVolume, seeds=None, amplitude_scale: float = 1.0):
    """All five warp kinds at default amplitudes: list of ``(warped, warp)``."""
    seeds = list(range(len(WARP_KINDS))) if seeds is None else list(seeds)
    if len(seeds) != len(WARP_KINDS):
        raise ValueError("need one seed per warp kind")
    out = []
    for kind, seed in zip(WARP_KINDS, seeds):
        w = default_warp(kind, v.geometry, DEFAULT_AMPLITUDES[kind] * amplitude_scale, seed)
        out.append((warp_volume_analytic(v, w), w))
    return out
