"""Symplectomorphic flow: Hamiltonian integration in energy shells.

Each voxel of the fixed grid carries canonical coordinates ``q`` (where
the moving image is sampled), momenta ``p`` and the shell Jacobian
``J = dq/dx``.  Within a shell the flow integrates

    dp/dt = (I0 - I1(q)) dI1/dq J^-1      (optionally rho-smoothed)
    dq/dt = v        (v = p, or rho-smoothed p)
    dJ/dt = dv/dx

with semi-implicit Euler steps.  A shell ends when ``det J`` leaves
``(eps, 1/eps)``, when its step budget is spent, or when the image
mismatch starts to rise; the next shell restarts from the frozen
coordinates with ``p = 0`` and ``J = I``.  Shells stop once the
mismatch no longer decreases.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import esp
from .io import GEOMETRY_HEADER, MalformedHeader, TruncatedPayload, pack_geometry, unpack_geometry
from .volume import (GridGeometry, ScalarVolume, VectorVolume, check_same_geometry, gradient_array,
                     sample_points)

log = logging.getLogger(__name__)

MAP_MAGIC = b"SREGMAP1"


class IntegrationError(RuntimeError):
    """The flow produced a non-finite state."""

    def __init__(self, message, shell=None, step=None):
        where = f" (shell {shell}, step {step})" if shell is not None else ""
        super().__init__(message + where)
        self.shell = shell
        self.step = step


class SingularJacobian(ValueError):
    pass


# ---------------------------------------------------------------------------
# 3x3 fields; matrices are stored with the two matrix axes first


def identity_field(dims) -> np.ndarray:
    J = np.zeros((3, 3) + tuple(dims))
    for i in range(3):
        J[i, i] = 1.0
    return J


def det3(J: np.ndarray) -> np.ndarray:
    """Closed-form determinant of a 3x3 matrix or a field of them."""
    return (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
            - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
            + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))


def inv3(J: np.ndarray) -> np.ndarray:
    """Adjugate inverse of a 3x3 matrix or matrix field."""
    d = det3(J)
    if np.any(d == 0):
        raise SingularJacobian("singular Jacobian")
    adj = np.empty_like(J)
    adj[0, 0] = J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1]
    adj[0, 1] = J[0, 2] * J[2, 1] - J[0, 1] * J[2, 2]
    adj[0, 2] = J[0, 1] * J[1, 2] - J[0, 2] * J[1, 1]
    adj[1, 0] = J[1, 2] * J[2, 0] - J[1, 0] * J[2, 2]
    adj[1, 1] = J[0, 0] * J[2, 2] - J[0, 2] * J[2, 0]
    adj[1, 2] = J[0, 2] * J[1, 0] - J[0, 0] * J[1, 2]
    adj[2, 0] = J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]
    adj[2, 1] = J[0, 1] * J[2, 0] - J[0, 0] * J[2, 1]
    adj[2, 2] = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return adj / d


def matmul3(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("ik...,kj...->ij...", A, B)


# ---------------------------------------------------------------------------
# state


@dataclass
class PhaseSpaceField:
    geometry: GridGeometry
    q: np.ndarray          # (3, nx, ny, nz), world mm
    p: np.ndarray          # (3, nx, ny, nz)
    J: np.ndarray          # (3, 3, nx, ny, nz)
    t: float = 0.0

    @classmethod
    def start(cls, geometry: GridGeometry, q: np.ndarray | None = None) -> "PhaseSpaceField":
        """Shell-start state: given coordinates (identity by default), p = 0, J = I."""
        q = geometry.grid() if q is None else np.array(q, dtype=np.float64)
        if not np.all(np.isfinite(q)):
            raise ValueError("start coordinates must be finite")
        return cls(geometry, q, np.zeros_like(q), identity_field(geometry.dims), 0.0)

    def copy(self) -> "PhaseSpaceField":
        return PhaseSpaceField(self.geometry, self.q.copy(), self.p.copy(), self.J.copy(), self.t)


@dataclass
class ShellRecord:
    index: int
    duration: float
    energy_end: float
    mismatch_end: float
    steps: int = 0
    level: int = 0
    stop_reason: str = ""
    final_q: VectorVolume | None = None
    final_J: np.ndarray | None = field(default=None, repr=False)


@dataclass
class DeformationMap:
    geometry: GridGeometry
    q_total: np.ndarray                       # (3, nx, ny, nz)
    J_total: np.ndarray = field(repr=False)   # (3, 3, nx, ny, nz)
    shells: list[ShellRecord] = field(default_factory=list)

    @classmethod
    def identity(cls, geometry: GridGeometry) -> "DeformationMap":
        return cls(geometry, geometry.grid(), identity_field(geometry.dims), [])

    def displacement(self) -> np.ndarray:
        return self.q_total - self.geometry.grid()

    def det(self) -> np.ndarray:
        return det3(self.J_total)


@dataclass
class EspSpec:
    """Recipe for building the ESP regulariser on any pyramid level."""

    kind: str = "adjacency"          # adjacency | image-weighted | gaussian-stationary
    connectivity: int = 6
    beta: float = 1.0
    sigma: float = 1.0               # mm, gaussian-stationary only
    image: str = "fixed"             # which image weights the coupling
    self_coupling: bool = True       # add lambda * delta to Q: rho -> (delta + rho) / 2

    def build(self, geometry: GridGeometry, fixed: ScalarVolume, moving: ScalarVolume) -> esp.TransitionKernel:
        if self.kind == "adjacency":
            Q = esp.build_adjacency_coupling(geometry, self.connectivity)
        elif self.kind == "image-weighted":
            img = fixed if self.image == "fixed" else moving
            Q = esp.build_image_weighted_coupling(img, self.connectivity, self.beta)
        elif self.kind == "gaussian-stationary":
            Q = esp.build_gaussian_coupling(geometry, sigma=self.sigma)
        else:
            raise ValueError(f"unknown ESP coupling {self.kind!r}")
        rho = esp.transition_kernel(Q)
        return _LazyKernel(rho) if self.self_coupling else rho


class _LazyKernel:
    """Transition kernel of Q + lambda * I: same psi, rho' = (delta + rho) / 2.

    A neighbour-only coupling on a grid is bipartite, so its rho has an
    eigenvalue -1 and can flip checkerboard components of the force into
    an ascent direction; the self-coupled kernel has a non-negative spectrum.
    """

    def __init__(self, rho: esp.TransitionKernel):
        self.rho = rho
        self.geometry = rho.coupling.geometry

    def apply(self, f: np.ndarray) -> np.ndarray:
        return 0.5 * (f + esp.nonlocal_force(f, self.rho))


def _smooth(f, rho):
    if rho is None:
        return f
    if isinstance(rho, _LazyKernel):
        return rho.apply(f)
    return esp.nonlocal_force(f, rho)


@dataclass
class RegistrationConfig:
    epsilon: float = 0.01
    max_shells: int = 60
    max_steps_per_shell: int = 60
    dt_init: float = 1000.0           # upper bound on the time step
    dt_max_displacement: float = 0.4  # voxels per step
    regularizer: EspSpec | esp.TransitionKernel | None = None
    convergence_tol: float = 1e-4    # minimum relative mismatch decrease per shell
    levels: int = 1                  # pyramid levels (factor 2 each)
    pyramid_sigma: float = 1.0       # smoothing, in coarse voxels, before downsampling
    min_level_size: int = 8
    stop_on_rebound: bool = True
    max_halvings: int = 4
    nonlocal_position: bool = False
    keep_history: bool = False

    def validate(self) -> "RegistrationConfig":
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.dt_init <= 0 or self.dt_max_displacement <= 0:
            raise ValueError("time step bounds must be positive")
        if self.max_shells < 1 or self.max_steps_per_shell < 1:
            raise ValueError("max_shells and max_steps_per_shell must be >= 1")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        return self


# ---------------------------------------------------------------------------
# energy and forces


def _mismatch_from_values(I0: ScalarVolume, values: np.ndarray) -> float:
    r = (I0.data - values).ravel()
    return float(np.sum(r * r)) * I0.geometry.voxel_volume


def mismatch(I0: ScalarVolume, I1: ScalarVolume, q: np.ndarray) -> float:
    """Integral of (I0(x) - I1(q(x)))^2 over the grid."""
    return _mismatch_from_values(I0, sample_points(I1, q))


def hamiltonian_energy(state: PhaseSpaceField, I0: ScalarVolume, I1: ScalarVolume) -> float:
    """(1/2V) * integral of |p|^2 + (I0 - I1(q))^2."""
    g = check_same_geometry(I0, I1)
    if not g.same_as(state.geometry):
        raise ValueError("state geometry differs from the images")
    r = (I0.data - sample_points(I1, state.q)).ravel()
    p2 = np.sum(state.p * state.p, axis=0).ravel()
    # dV / V = 1 / N on a uniform grid
    return 0.5 * float(np.sum(p2 + r * r)) / g.n_voxels


def local_force(state: PhaseSpaceField, I0: ScalarVolume, I1: ScalarVolume, sampled=None) -> np.ndarray:
    """(I0 - I1(q)) dI1/dq J^-1 at every voxel, shape (3, nx, ny, nz).

    ``dI1/dq`` is the gradient of the trilinear interpolant of I1 at q.
    ``sampled`` may carry precomputed ``(values, gradient)`` at q.
    """
    vals, grad = sampled if sampled is not None else sample_points(I1, state.q, gradient=True)
    r = I0.data - vals
    Jinv = inv3(state.J)
    # row vector grad times J^-1
    f = np.einsum("i...,ij...->j...", grad, Jinv) * r
    return f


def flow_step(state: PhaseSpaceField, I0: ScalarVolume, I1: ScalarVolume, dt: float,
              regularizer: esp.TransitionKernel | None = None, sampled=None,
              nonlocal_position: bool = False) -> PhaseSpaceField:
    """One semi-implicit Euler step: p first, then q and J from the new p."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = local_force(state, I0, I1, sampled)
    f = _smooth(f, regularizer)
    if not np.all(np.isfinite(f)):
        raise IntegrationError("non-finite force")
    p = state.p + dt * f
    vel = _smooth(p, regularizer) if nonlocal_position else p
    q = state.q + dt * vel
    # dJ/dt is the spatial gradient of dq/dt (p itself unless the velocity is smoothed)
    dv = np.stack([gradient_array(vel[i], state.geometry.spacing) for i in range(3)])
    J = state.J + dt * dv
    return PhaseSpaceField(state.geometry, q, p, J, state.t + dt)


@dataclass(frozen=True)
class GuardResult:
    ok: bool
    violations: np.ndarray  # (K, 3) voxel indices

    def __bool__(self):
        return self.ok


def jacobian_guard(state_or_J, epsilon: float) -> GuardResult:
    """Check eps < det J < 1/eps at every voxel."""
    J = state_or_J.J if isinstance(state_or_J, PhaseSpaceField) else state_or_J
    d = det3(J)
    bad = ~((d > epsilon) & (d < 1.0 / epsilon))
    if not bad.any():
        return GuardResult(True, np.empty((0, 3), dtype=np.intp))
    return GuardResult(False, np.argwhere(bad))


def shell_restart(state: PhaseSpaceField, dmap: DeformationMap, energy: float | None = None,
                  mismatch_value: float = float("nan"), steps: int = 0, level: int = 0,
                  reason: str = "", keep_fields: bool = False):
    """Freeze the shell: record it, compose ``J_total <- J @ J_total`` and restart.

    Returns ``(new_state, updated_map)``; the new state starts at the final
    coordinates with zero momentum and identity Jacobian.
    """
    rec = ShellRecord(
        index=len(dmap.shells), duration=state.t,
        energy_end=float("nan") if energy is None else energy,
        mismatch_end=mismatch_value, steps=steps, level=level, stop_reason=reason,
        final_q=VectorVolume(state.geometry, state.q) if keep_fields else None,
        final_J=state.J.copy() if keep_fields else None)
    new_map = DeformationMap(dmap.geometry, state.q.copy(), matmul3(state.J, dmap.J_total),
                             dmap.shells + [rec])
    return PhaseSpaceField.start(state.geometry, state.q), new_map


def convergence_check(I0: ScalarVolume, I1: ScalarVolume, q_new: np.ndarray, q_prev: np.ndarray) -> bool:
    """True (keep going) iff the squared mismatch strictly decreased."""
    check_same_geometry(I0, I1)
    return mismatch(I0, I1, q_new) - mismatch(I0, I1, q_prev) < 0


def metric_tensor(J: np.ndarray) -> np.ndarray:
    """G = (J^-1)^T J^-1 for a 3x3 matrix or matrix field."""
    J = np.asarray(J, dtype=np.float64)
    Jinv = inv3(J)
    return np.einsum("ki...,kj...->ij...", Jinv, Jinv)


def curve_length(curve: np.ndarray, G, geometry: GridGeometry | None = None, at: np.ndarray | None = None) -> float:
    """Length of a sampled curve in q-coordinates under the metric G.

    ``curve`` has shape (M, 3), uniformly spaced in the curve parameter
    s in [0, 1].  ``G`` is a constant 3x3 matrix or a field
    (3, 3, nx, ny, nz) on ``geometry``, interpolated componentwise at the
    points ``at`` (the curve itself by default).  The speed
    sqrt(g_ij dq^i/ds dq^j/ds) is integrated with the trapezoid rule.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 2 or curve.shape[1] != 3 or len(curve) < 2:
        raise ValueError("curve needs at least two 3-D samples")
    s = np.linspace(0.0, 1.0, len(curve))
    dq = np.gradient(curve, s, axis=0, edge_order=2 if len(curve) > 2 else 1)
    G = np.asarray(G, dtype=np.float64)
    if G.shape == (3, 3):
        g = np.broadcast_to(G[:, :, None], (3, 3, len(curve)))
    else:
        if geometry is None:
            raise ValueError("a metric field needs its geometry")
        pts = curve if at is None else np.asarray(at, dtype=np.float64)
        idx = geometry.to_index(pts.T)
        lim = np.asarray(geometry.dims)[:, None] - 1
        if np.any(idx < -1e-9) or np.any(idx > lim + 1e-9):
            raise ValueError("curve sample outside the domain")
        g = np.stack([np.stack([ndimage.map_coordinates(G[i, j], idx, order=1, mode="nearest")
                                for j in range(3)]) for i in range(3)])
    speed = np.sqrt(np.maximum(np.einsum("mi,ijm,mj->m", dq, g, dq), 0.0))
    return float(np.trapezoid(speed, s))


# ---------------------------------------------------------------------------
# registration driver


@dataclass
class ShellDiagnostics:
    level: int
    index: int
    steps: int
    duration: float
    energy_end: float
    rmsd_end: float
    wall_seconds: float
    stop_reason: str


CSV_HEADER = "index,level,steps,duration,energy_end,rmsd_end,wall_seconds,stop_reason"


def diagnostics_csv(rows: list[ShellDiagnostics]) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(f"{r.index},{r.level},{r.steps},{r.duration:.9g},{r.energy_end:.9g},"
                     f"{r.rmsd_end:.9g},{r.wall_seconds:.3f},{r.stop_reason}")
    return "\n".join(lines) + "\n"


def _smooth_resample(v: ScalarVolume, geometry: GridGeometry, sigma_coarse_vox: float) -> ScalarVolume:
    if geometry.same_as(v.geometry):
        return v
    sig = [sigma_coarse_vox * gc / gf for gc, gf in zip(geometry.spacing, v.geometry.spacing)]
    sm = ScalarVolume(v.geometry, ndimage.gaussian_filter(v.data, sig, mode="nearest"))
    return ScalarVolume(geometry, sample_points(sm, geometry.grid()))


def _resample_field(field_arr: np.ndarray, src: GridGeometry, dst: GridGeometry) -> np.ndarray:
    """Trilinear resampling of a (..., nx, ny, nz) field onto another grid."""
    if dst.same_as(src):
        return field_arr.copy()
    lead = field_arr.shape[:-3]
    flat = field_arr.reshape((-1,) + src.dims)
    pts = dst.grid()
    out = np.stack([sample_points(ScalarVolume(src, comp), pts) for comp in flat])
    return out.reshape(lead + dst.dims)


def pyramid(geometry: GridGeometry, levels: int, min_size: int = 8) -> list[GridGeometry]:
    """Grids from coarsest to finest (the finest is ``geometry`` itself)."""
    out = [geometry]
    for lev in range(1, levels):
        g = geometry.downsampled(2 ** lev)
        if min(g.dims) < min_size:
            break
        out.append(g)
    return out[::-1]


class _ShellRunner:
    """Integrates shells on one pyramid level."""

    def __init__(self, I0, I1, cfg: RegistrationConfig, rho, on_step=None, level=0):
        self.I0, self.I1, self.cfg, self.rho = I0, I1, cfg, rho
        self.on_step, self.level = on_step, level
        self.geometry = I0.geometry
        self.max_disp = cfg.dt_max_displacement * min(self.geometry.spacing)

    def choose_dt(self, p, f) -> float:
        P = float(np.sqrt(np.max(np.sum(p * p, axis=0))))
        F = float(np.sqrt(np.max(np.sum(f * f, axis=0))))
        D = self.max_disp
        if P == 0 and F == 0:
            return self.cfg.dt_init
        # largest dt with (P + dt F) dt <= D
        dt = 2 * D / (P + np.sqrt(P * P + 4 * F * D))
        return min(dt, self.cfg.dt_init)

    def run_shell(self, q0, shell_index):
        """Integrate one shell from q0. Returns (state, steps, reason)."""
        cfg = self.cfg
        state = PhaseSpaceField.start(self.geometry, q0)
        sampled = sample_points(self.I1, state.q, gradient=True)
        current = _mismatch_from_values(self.I0, sampled[0])
        reason = "budget"
        steps = 0
        while steps < cfg.max_steps_per_shell:
            f = local_force(state, self.I0, self.I1, sampled)
            f = _smooth(f, self.rho)
            if not np.all(np.isfinite(f)):
                raise IntegrationError("non-finite force", shell_index, steps)
            dt = self.choose_dt(state.p, f)
            accepted = None
            reason = "jacobian"
            for _ in range(cfg.max_halvings + 1):
                cand = self._advance(state, f, dt)
                dt *= 0.5
                if not jacobian_guard(cand.J, cfg.epsilon):
                    reason = "jacobian"
                    continue
                if not np.all(np.isfinite(cand.q)):
                    raise IntegrationError("non-finite coordinates", shell_index, steps)
                cand_sampled = sample_points(self.I1, cand.q, gradient=True)
                value = _mismatch_from_values(self.I0, cand_sampled[0])
                if cfg.stop_on_rebound and value > current:
                    reason = "rebound"
                    continue
                accepted = cand
                break
            if accepted is None:
                break
            reason = "budget"
            state, sampled, current = accepted, cand_sampled, value
            steps += 1
            if self.on_step is not None:
                self.on_step(self.level, shell_index, state)
        return state, steps, reason

    def _advance(self, state, f, dt):
        p = state.p + dt * f
        vel = _smooth(p, self.rho) if self.cfg.nonlocal_position else p
        q = state.q + dt * vel
        sp = self.geometry.spacing
        dv = np.stack([gradient_array(vel[i], sp) for i in range(3)])
        return PhaseSpaceField(self.geometry, q, p, state.J + dt * dv, state.t + dt)


def register(I0: ScalarVolume, I1: ScalarVolume, config: RegistrationConfig | None = None,
             return_diagnostics: bool = False, on_step=None):
    """Register moving ``I1`` onto fixed ``I0``; returns the composed map.

    ``on_step(level, shell, state)`` is called after every accepted step.

    The map satisfies ``I1(q_total(x)) ~ I0(x)``.  Shells are accepted only
    while the full-resolution mismatch strictly decreases (by at least
    ``convergence_tol`` relative), so end-of-shell mismatch is monotone.
    """
    cfg = (config or RegistrationConfig()).validate()
    geom = check_same_geometry(I0, I1)
    levels = pyramid(geom, cfg.levels, cfg.min_level_size)
    dmap = DeformationMap.identity(geom)
    diagnostics: list[ShellDiagnostics] = []
    best = mismatch(I0, I1, dmap.q_total)
    shell_index = 0

    q_level = None
    prev_geom = None
    for lev, g in enumerate(levels):
        fine = g.same_as(geom)
        I0l = I0 if fine else _smooth_resample(I0, g, cfg.pyramid_sigma)
        I1l = I1 if fine else _smooth_resample(I1, g, cfg.pyramid_sigma)
        x_l = g.grid()
        if q_level is None:
            q_level = x_l.copy()
        else:
            q_level = x_l + _resample_field(q_level - prev_geom.grid(), prev_geom, g)
        prev_geom = g
        rho = _level_regularizer(cfg.regularizer, g, I0l, I1l)
        runner = _ShellRunner(I0l, I1l, cfg, rho, on_step, lev)

        while shell_index < cfg.max_shells:
            t0 = time.perf_counter()
            state, steps, reason = runner.run_shell(q_level, shell_index)
            q_fine = state.q if fine else x_fine_of(geom) + _resample_field(state.q - x_l, g, geom)
            value = mismatch(I0, I1, q_fine)
            if steps == 0 or not value < best * (1.0 - cfg.convergence_tol):
                log.debug("level %d: shell rejected (%s, mismatch %.6g vs %.6g)", lev, reason, value, best)
                break
            energy = 0.5 * value / (geom.voxel_volume * geom.n_voxels)
            # shells are composed on the full-resolution grid
            J_fine = state.J if fine else _resample_field(state.J, g, geom)
            frozen = PhaseSpaceField(geom, q_fine, None, J_fine, state.t)
            _, dmap = shell_restart(frozen, dmap, energy, value, steps, lev, reason,
                                    keep_fields=cfg.keep_history)
            q_level = state.q
            best = value
            wall = time.perf_counter() - t0
            diagnostics.append(ShellDiagnostics(lev, shell_index, steps, state.t, energy,
                                                float(np.sqrt(value / (geom.voxel_volume * geom.n_voxels))),
                                                wall, reason))
            log.info("shell %d (level %d): %d steps, %s, rmsd %.5g", shell_index, lev, steps, reason,
                     diagnostics[-1].rmsd_end)
            shell_index += 1

    for i, rec in enumerate(dmap.shells):
        rec.index = i
    result = dmap
    if return_diagnostics:
        return result, diagnostics
    return result


_x_cache: dict = {}


def x_fine_of(geometry: GridGeometry) -> np.ndarray:
    key = (geometry.dims, geometry.spacing, geometry.origin)
    if key not in _x_cache:
        _x_cache.clear()
        _x_cache[key] = geometry.grid()
    return _x_cache[key]


def _level_regularizer(reg, geometry, I0l, I1l):
    if reg is None:
        return None
    if isinstance(reg, (esp.TransitionKernel, _LazyKernel)):
        if not reg.geometry.same_as(geometry):
            raise ValueError("a prebuilt transition kernel only fits single-level runs on its own grid")
        return reg
    return reg.build(geometry, I0l, I1l)


def fold_fraction(dmap: DeformationMap) -> float:
    """Fraction of voxels where the finite-difference Jacobian of q_total has det <= 0.

    The shell product J_total bounds each shell's own Jacobian; this
    measures the composed coordinates directly.
    """
    sp = dmap.geometry.spacing
    d = det3(np.stack([gradient_array(dmap.q_total[i], sp) for i in range(3)]))
    return float(np.mean(d <= 0))


def warp_volume(v: ScalarVolume, dmap: DeformationMap) -> ScalarVolume:
    """output(x) = v(q_total(x)) by trilinear sampling."""
    if not v.geometry.same_as(dmap.geometry):
        raise ValueError("volume and map geometries differ")
    return ScalarVolume(v.geometry, sample_points(v, dmap.q_total))


def compose_residual(forward: DeformationMap, inverse: DeformationMap, mask: np.ndarray | None = None) -> float:
    """RMS of |q_fwd(q_inv(x)) - x| in voxels of the finest spacing, over ``mask`` if given."""
    g = forward.geometry
    x = g.grid()
    pts = inverse.q_total
    comp = np.stack([sample_points(ScalarVolume(g, forward.q_total[i]), pts) for i in range(3)])
    err2 = np.sum((comp - x) ** 2, axis=0)
    if mask is not None:
        err2 = err2[mask]
    return float(np.sqrt(np.mean(err2)) / min(g.spacing))


def invert_map(I0: ScalarVolume, I1: ScalarVolume, config: RegistrationConfig | None = None,
               forward: DeformationMap | None = None):
    """Inverse map by registering with the roles of the images exchanged.

    Returns ``(inverse_map, residual)`` where the residual is the RMS
    deviation of ``q_fwd o q_inv`` from the identity in voxels (``nan``
    when no forward map is given).
    """
    inverse = register(I1, I0, config)
    residual = compose_residual(forward, inverse) if forward is not None else float("nan")
    return inverse, residual


# ---------------------------------------------------------------------------
# map files


def save_map(dmap: DeformationMap, path) -> None:
    """SREGMAP1: geometry header, q (3 x f32/voxel), J (9 x f32/voxel), JSON trailer."""
    g = dmap.geometry
    q = dmap.q_total.ravel(order="F").astype("<f4")
    J = np.swapaxes(dmap.J_total, 0, 1).ravel(order="F").astype("<f4")  # row-major per voxel
    meta = {"shells": [{"index": s.index, "level": s.level, "steps": s.steps,
                        "duration": s.duration, "energy_end": s.energy_end,
                        "mismatch_end": s.mismatch_end, "stop_reason": s.stop_reason}
                       for s in dmap.shells]}
    trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(pack_geometry(MAP_MAGIC, g) + q.tobytes() + J.tobytes()
                           + trailer + struct.pack("<Q", len(trailer)))


def load_map(path) -> DeformationMap:
    raw = Path(path).read_bytes()
    g = unpack_geometry(raw, MAP_MAGIC)
    n = g.n_voxels
    off = GEOMETRY_HEADER.size
    need = off + 48 * n + 8
    if len(raw) < need:
        raise TruncatedPayload("map file truncated")
    (tlen,) = struct.unpack("<Q", raw[-8:])
    if off + 48 * n + tlen + 8 != len(raw):
        raise MalformedHeader("map trailer length does not match the file size")
    q = np.frombuffer(raw, "<f4", 3 * n, off).astype(np.float64).reshape((3,) + g.dims, order="F")
    J = np.frombuffer(raw, "<f4", 9 * n, off + 12 * n).astype(np.float64).reshape((3, 3) + g.dims, order="F")
    J = np.swapaxes(J, 0, 1)
    meta = json.loads(raw[off + 48 * n:-8].decode("utf-8"))
    shells = [ShellRecord(index=s["index"], duration=s["duration"], energy_end=s["energy_end"],
                          mismatch_end=s["mismatch_end"], steps=s["steps"], level=s["level"],
                          stop_reason=s["stop_reason"]) for s in meta["shells"]]
    return DeformationMap(g, q, J, shells)
