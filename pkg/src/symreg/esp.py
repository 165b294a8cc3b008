"""Entropy spectrum pathways (ESP) coupling kernels.

A coupling density Q over grid locations gives a dominant eigenpair
(lambda, psi).  From it follow the transition kernel

    rho(x', x) = Q(x, x') psi(x') / (lambda psi(x))

and the equilibrium probability mu = psi**2 (normalised).  The flow uses
rho to smooth the local image force.

Couplings are matrix-free: stencil kinds store one weight array per
neighbour offset, Gaussian kinds are applied as separable correlations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse

from .volume import GeometryMismatch, GridGeometry, ScalarVolume, VectorVolume

CONNECTIVITY = {6: 1, 18: 2, 26: 3}


class EigenSolverError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def neighbor_offsets(connectivity: int) -> np.ndarray:
    """Offsets ``(K, 3)`` of the 6-, 18- or 26-neighbourhood."""
    if connectivity not in CONNECTIVITY:
        raise ValueError("connectivity must be 6, 18 or 26")
    max_l1 = CONNECTIVITY[connectivity]
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3)
            if o != (0, 0, 0) and sum(map(abs, o)) <= max_l1]
    return np.array(offs, dtype=np.intp)


def _shift(a: np.ndarray, off) -> np.ndarray:
    """``out[x] = a[x + off]`` with zeros where ``x + off`` leaves the grid."""
    out = np.zeros_like(a)
    src, dst = [], []
    for o, n in zip(off, a.shape):
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = a[tuple(src)]
    return out


@dataclass(eq=False)
class CouplingKernel:
    """Coupling density Q(x, x') on a grid.

    ``kind`` is ``"adjacency"``, ``"image-weighted"`` or
    ``"gaussian-stationary"``.  Stencil kinds carry ``offsets`` and
    ``weights[k][x] = Q(x, x + offsets[k])``.  The Gaussian kind carries the
    quadratic form ``S`` (1/mm^2), the per-axis truncation radius in voxels
    and the boundary rule (``"reflect"`` or ``"wrap"``).
    """

    kind: str
    geometry: GridGeometry
    offsets: np.ndarray | None = None
    weights: np.ndarray | None = field(default=None, repr=False)
    S: np.ndarray | None = None
    radius: tuple[int, int, int] | None = None
    boundary: str = "reflect"
    connectivity: int | None = None

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Apply Q: ``out(x) = sum_x' Q(x, x') v(x')``."""
        if v.shape != self.geometry.dims:
            raise GeometryMismatch("vector does not match kernel geometry")
        if self.kind == "gaussian-stationary":
            return self._gaussian_apply(v)
        out = np.zeros_like(v, dtype=np.float64)
        for off, w in zip(self.offsets, self.weights):
            out += w * _shift(v, off)
        return out

    def _gaussian_apply(self, v):
        mode = "wrap" if self.boundary == "wrap" else "reflect"
        if self._separable():
            out = np.asarray(v, dtype=np.float64)
            for axis, taps in enumerate(self._axis_taps()):
                out = ndimage.correlate1d(out, taps, axis=axis, mode=mode)
            return out
        return ndimage.correlate(np.asarray(v, dtype=np.float64), self._full_stencil(), mode=mode)

    def _separable(self) -> bool:
        return np.count_nonzero(self.S - np.diag(np.diag(self.S))) == 0

    def _axis_taps(self):
        taps = []
        for a in range(3):
            d = np.arange(-self.radius[a], self.radius[a] + 1) * self.geometry.spacing[a]
            taps.append(np.exp(-self.S[a, a] * d * d))
        return taps

    def _full_stencil(self):
        axes = [np.arange(-r, r + 1) * s for r, s in zip(self.radius, self.geometry.spacing)]
        d = np.stack(np.meshgrid(*axes, indexing="ij"))
        return np.exp(-np.einsum("i...,ij,j...->...", d, self.S, d))

    def row_sums(self) -> np.ndarray:
        return self.matvec(np.ones(self.geometry.dims))

    def neighbor_count(self) -> np.ndarray:
        """Number of nonzero couplings per voxel (stencil kinds)."""
        if self.weights is None:
            raise TypeError("neighbour counts are defined for stencil couplings only")
        return np.count_nonzero(self.weights, axis=0)

    def to_sparse(self) -> sparse.csr_matrix:
        """Explicit matrix in x-fastest voxel order (small grids only)."""
        n = self.geometry.n_voxels
        if self.kind == "gaussian-stationary":
            cols = [self.matvec(np.eye(1, n, k).reshape(self.geometry.dims, order="F")).ravel(order="F")
                    for k in range(n)]
            return sparse.csr_matrix(np.array(cols).T)
        dims = self.geometry.dims
        index = np.arange(n).reshape(dims, order="F")
        rows, cols, vals = [], [], []
        for off, w in zip(self.offsets, self.weights):
            nz = w != 0
            src = np.nonzero(nz)
            dst = tuple(s + o for s, o in zip(src, off))
            rows.append(index[src])
            cols.append(index[dst])
            vals.append(w[src])
        return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(n, n))

    def check_symmetric(self, atol=1e-12) -> None:
        if self.weights is None:
            return
        lookup = {tuple(o): k for k, o in enumerate(self.offsets)}
        for k, off in enumerate(self.offsets):
            back = self.weights[lookup[tuple(-off)]]
            if not np.allclose(self.weights[k], _shift(back, off), atol=atol, rtol=0):
                raise ValueError("coupling is not symmetric")


def _stencil_weights(geometry: GridGeometry, offsets, pair_weight) -> np.ndarray:
    dims = geometry.dims
    weights = np.zeros((len(offsets),) + dims)
    for k, off in enumerate(offsets):
        valid = np.ones(dims, dtype=bool)
        for a, o in enumerate(off):
            if o == 0:
                continue
            sl = [slice(None)] * 3
            if o > 0:
                sl[a] = slice(dims[a] - o, None)
            else:
                sl[a] = slice(0, -o)
            valid[tuple(sl)] = False
        weights[k][valid] = pair_weight(off)[valid] if pair_weight is not None else 1.0
    return weights


def build_adjacency_coupling(geometry: GridGeometry, connectivity: int = 6) -> CouplingKernel:
    """Q(x, x') = 1 for grid neighbours, 0 otherwise."""
    offsets = neighbor_offsets(connectivity)
    return CouplingKernel("adjacency", geometry, offsets, _stencil_weights(geometry, offsets, None),
                          connectivity=connectivity)


def build_image_weighted_coupling(image: ScalarVolume, connectivity: int = 6, beta: float = 1.0) -> CouplingKernel:
    """Q(x, x') = exp(-beta |I(x) - I(x')|) for neighbours."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    offsets = neighbor_offsets(connectivity)
    data = image.data

    def pair(off):
        return np.exp(-beta * np.abs(data - _shift(data, off)))

    weights = _stencil_weights(image.geometry, offsets, pair if beta > 0 else None)
    k = CouplingKernel("image-weighted", image.geometry, offsets, weights, connectivity=connectivity)
    k.check_symmetric()
    return k


def build_gaussian_coupling(geometry: GridGeometry, sigma=None, S=None, truncate: float = 4.0,
                            boundary: str = "reflect") -> CouplingKernel:
    """Stationary coupling exp(-d^T S d), d in mm, truncated at ``truncate`` sigma.

    Give either ``sigma`` (mm, scalar or per axis; S = diag(1 / (2 sigma^2)))
    or the SPD matrix ``S`` directly.
    """
    if boundary not in ("reflect", "wrap"):
        raise ValueError("boundary must be 'reflect' or 'wrap'")
    if S is None:
        if sigma is None:
            raise ValueError("need sigma or S")
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
        S = np.diag(1.0 / (2.0 * sig ** 2))
    S = np.asarray(S, dtype=float)
    _check_spd(S)
    # marginal standard deviation along each axis
    sig_axis = np.sqrt(np.diag(np.linalg.inv(2.0 * S)))
    radius = tuple(int(np.ceil(truncate * s / h)) for s, h in zip(sig_axis, geometry.spacing))
    if boundary == "wrap" and any(2 * r + 1 > n for r, n in zip(radius, geometry.dims)):
        raise ValueError("periodic Gaussian stencil wider than the grid")
    return CouplingKernel("gaussian-stationary", geometry, S=S, radius=radius, boundary=boundary)


def _check_spd(S):
    if S.shape != (3, 3) or not np.allclose(S, S.T):
        raise ValueError("S must be a symmetric 3x3 matrix")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError("S must be positive definite") from exc


# ---------------------------------------------------------------------------
# eigenproblem


@dataclass(frozen=True)
class EspSolution:
    lam: float
    psi: ScalarVolume
    mu: ScalarVolume
    iterations: int = 0
    residual: float = 0.0


def _path_perron(n: int, self_loop: bool):
    """Perron pair of a path graph on n nodes (plus identity if self_loop)."""
    k = np.arange(1, n + 1)
    vec = np.sin(np.pi * k / (n + 1))
    lam = 2.0 * np.cos(np.pi / (n + 1)) + (1.0 if self_loop else 0.0)
    return lam, vec / np.linalg.norm(vec)


def _separable_adjacency(Q: CouplingKernel):
    """Closed form for 6- and 26-adjacency (Kronecker sum / product of paths)."""
    dims = Q.geometry.dims
    if Q.connectivity == 6:
        pairs = [_path_perron(n, False) for n in dims]
        lam = sum(p[0] for p in pairs)
    else:
        pairs = [_path_perron(n, True) for n in dims]
        lam = np.prod([p[0] for p in pairs]) - 1.0
    psi = np.einsum("i,j,k->ijk", *(p[1] for p in pairs))
    return lam, psi


def dominant_eigenpair(Q: CouplingKernel, tol: float = 1e-12, max_iter: int = 5000,
                       method: str = "auto", accelerate: bool = True,
                       x0: np.ndarray | None = None) -> EspSolution:
    """Largest eigenvalue and positive eigenvector of a symmetric coupling.

    ``method="power"`` iterates from a positive start vector.  Without
    acceleration it is plain power iteration on ``Q + c I`` with ``c`` the
    largest row sum, which keeps the spectrum non-negative so bipartite
    grid graphs still converge.  With ``accelerate=True`` every step is a
    Rayleigh-Ritz projection onto the iterate, its residual and the
    previous search direction, which converges far faster on large grids.
    The iteration stops once both the relative change of the Rayleigh
    quotient and the relative residual ``|Q psi - lam psi| / lam`` are
    below ``tol``.

    ``method="auto"`` uses the closed form (products of path-graph Perron
    vectors) for 6- and 26-adjacency and the iteration otherwise.
    """
    if method == "auto":
        if Q.kind == "adjacency" and Q.connectivity in (6, 26):
            lam, psi = _separable_adjacency(Q)
            return _finish(Q, lam, psi, 0)
        method = "power"
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    if Q.weights is not None and np.any(Q.neighbor_count() == 0):
        raise ValueError("coupling has isolated voxels; the grid graph must be connected")

    x = np.ones(Q.geometry.dims) if x0 is None else np.array(x0, dtype=float)
    x /= np.linalg.norm(x)
    ax = Q.matvec(x)
    theta = float(np.vdot(x, ax))
    shift = float(Q.row_sums().max())
    direction = None
    res = np.inf
    for it in range(1, max_iter + 1):
        if accelerate:
            x, direction = _ritz_step(Q, x, ax, theta, direction)
        else:
            y = ax + shift * x
            x = y / np.linalg.norm(y)
        ax = Q.matvec(x)
        theta_new = float(np.vdot(x, ax))
        res = float(np.linalg.norm(ax - theta_new * x)) / abs(theta_new)
        change = abs(theta_new - theta) / abs(theta_new)
        theta = theta_new
        if res <= tol and change <= tol:
            return _finish(Q, theta, x, it, res)
    raise EigenSolverError(f"power iteration did not converge in {max_iter} iterations", res)


def _ritz_step(Q, x, ax, theta, direction):
    basis = [x, ax - theta * x] + ([direction] if direction is not None else [])
    vecs = []
    for b in basis:
        w = b.copy()
        for v in vecs:
            w -= np.vdot(v, w) * v
        nw = np.linalg.norm(w)
        if nw > 1e-14 * max(1.0, np.linalg.norm(b)):
            vecs.append(w / nw)
    if len(vecs) == 1:
        return x, None
    avecs = [ax] + [Q.matvec(v) for v in vecs[1:]]
    gram = np.array([[np.vdot(u, av) for av in avecs] for u in vecs])
    _, v_eig = np.linalg.eigh(0.5 * (gram + gram.T))
    c = v_eig[:, -1]
    if c[0] < 0:
        c = -c
    x_new = sum(ci * v for ci, v in zip(c, vecs))
    norm = np.linalg.norm(x_new)
    x_new /= norm
    direction = x_new - (c[0] / norm) * x
    return x_new, direction if np.linalg.norm(direction) > 0 else None


def _finish(Q: CouplingKernel, lam: float, psi: np.ndarray, iterations: int, residual=None) -> EspSolution:
    psi = psi / np.linalg.norm(psi)
    if psi.sum() < 0:
        psi = -psi
    if residual is None:
        residual = float(np.linalg.norm(Q.matvec(psi) - lam * psi)) / lam
    if not lam > 0:
        raise ValueError("dominant eigenvalue is not positive")
    if psi.min() <= 0:
        raise ValueError("dominant eigenvector is not strictly positive; is the coupling irreducible?")
    g = Q.geometry
    mu = psi * psi
    mu /= mu.sum()
    return EspSolution(float(lam), ScalarVolume(g, psi), ScalarVolume(g, mu), iterations, residual)


def equilibrium_probability(sol: EspSolution) -> ScalarVolume:
    """mu = psi^2 normalised to unit sum."""
    return sol.mu


def gaussian_kernel_eigen(S) -> tuple[float, bool]:
    """Closed-form dominant eigenvalue of exp(-d^T S d) on the infinite 3-D domain.

    Returns ``(sqrt(pi^3 / det S), True)``; the flag records that the
    eigenvector is constant.
    """
    S = np.asarray(S, dtype=float)
    _check_spd(S)
    return float(np.sqrt(np.pi ** 3 / np.linalg.det(S))), True


# ---------------------------------------------------------------------------
# transition kernel


@dataclass(frozen=True)
class TransitionKernel:
    coupling: CouplingKernel
    solution: EspSolution

    @property
    def geometry(self) -> GridGeometry:
        return self.coupling.geometry

    def propagate(self, f: np.ndarray) -> np.ndarray:
        """``out(x) = sum_x' rho(x', x) f(x')`` -- weights sum to one at each x."""
        psi = self.solution.psi.data
        return self.coupling.matvec(psi * f) / (self.solution.lam * psi)

    def row_sum_deviation(self) -> float:
        return float(np.abs(self.propagate(np.ones(self.geometry.dims)) - 1.0).max())

    def stationarity_residual(self) -> float:
        """max_x' |sum_x rho(x', x) mu(x) - mu(x')|."""
        psi = self.solution.psi.data
        mu = self.solution.mu.data
        # sum over the second argument: psi(x') / lam * sum_x Q(x, x') mu(x) / psi(x)
        out = psi / self.solution.lam * self.coupling.matvec(mu / psi)
        return float(np.abs(out - mu).max())

    def dense(self) -> np.ndarray:
        """Matrix P with ``P[x, x'] = rho(x', x)`` (x-fastest order, small grids)."""
        Qd = self.coupling.to_sparse().toarray()
        psi = self.solution.psi.flat()
        return Qd * psi[None, :] / (self.solution.lam * psi[:, None])


def transition_kernel(Q: CouplingKernel, sol: EspSolution | None = None, **solver_kw) -> TransitionKernel:
    return TransitionKernel(Q, sol if sol is not None else dominant_eigenpair(Q, **solver_kw))


def nonlocal_force(local_force: VectorVolume | np.ndarray, rho: TransitionKernel):
    """rho-weighted average of a vector field, applied per component."""
    arr = local_force.data if isinstance(local_force, VectorVolume) else np.asarray(local_force)
    if arr.shape[1:] != rho.geometry.dims:
        raise GeometryMismatch("force field does not match the kernel geometry")
    out = np.stack([rho.propagate(arr[c]) for c in range(arr.shape[0])])
    if isinstance(local_force, VectorVolume):
        return VectorVolume(local_force.geometry, out)
    return out
