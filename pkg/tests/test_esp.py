import numpy as np
import pytest

from symreg.esp import (EigenSolverError, build_adjacency_coupling, build_gaussian_coupling,
                        build_image_weighted_coupling, dominant_eigenpair, equilibrium_probability,
                        gaussian_kernel_eigen, nonlocal_force, transition_kernel)
from symreg.volume import GridGeometry, ScalarVolume, VectorVolume


def dense_dominant(Q):
    """Dense symmetric eigensolver oracle."""
    w, V = np.linalg.eigh(Q.to_sparse().toarray())
    v = V[:, -1]
    return w[-1], v * np.sign(v.sum())


@pytest.mark.parametrize("conn,center,corner", [(6, 6, 3), (18, 18, 6), (26, 26, 7)])
def test_neighbor_counts(conn, center, corner):
    Q = build_adjacency_coupling(GridGeometry((3, 3, 3)), conn)
    counts = Q.neighbor_count()
    assert counts[1, 1, 1] == center
    assert counts[0, 0, 0] == corner


def test_adjacency_symmetric():
    Q = build_adjacency_coupling(GridGeometry((4, 3, 5)), 18)
    Q.check_symmetric()
    M = Q.to_sparse()
    assert (M != M.T).nnz == 0


def test_image_weighted_reduces_to_adjacency():
    rng = np.random.default_rng(0)
    g = GridGeometry((4, 4, 3))
    adj = build_adjacency_coupling(g, 26).weights
    img = ScalarVolume(g, rng.normal(size=g.dims))
    assert np.array_equal(build_image_weighted_coupling(img, 26, beta=0.0).weights, adj)
    const = ScalarVolume(g, np.full(g.dims, 5.0))
    assert np.array_equal(build_image_weighted_coupling(const, 26, beta=3.0).weights, adj)


def test_image_weighted_two_voxel_weight():
    g = GridGeometry((2, 2, 2))
    data = np.zeros(g.dims)
    data[1] = np.log(2.0)
    Q = build_image_weighted_coupling(ScalarVolume(g, data), 6, beta=1.0)
    M = Q.to_sparse().toarray()
    # voxel (0,0,0) is flat index 0, voxel (1,0,0) is flat index 1 (x fastest)
    assert M[0, 1] == pytest.approx(0.5, abs=1e-15)
    assert M[0, 2] == 1.0


def test_regular_cube_graph():
    g = GridGeometry((2, 2, 2))
    sol = dominant_eigenpair(build_adjacency_coupling(g), method="power")
    # each voxel has 3 neighbours: regular graph, lambda = 3, psi uniform
    assert sol.lam == pytest.approx(3.0, rel=1e-12)
    assert np.allclose(sol.psi.data, 1 / np.sqrt(8), rtol=1e-12)


def test_two_voxel_eigensystem_via_weights():
    # Q = [[0,1],[1,0]] realised on a 2x2x2 grid by zeroing all but one link
    g = GridGeometry((2, 2, 2))
    Q = build_adjacency_coupling(g, 6)
    Q.weights[:] = 0
    Q.weights[5][0, 0, 0] = 1.0  # offset (+1,0,0)
    Q.weights[0][1, 0, 0] = 1.0  # offset (-1,0,0)
    v = np.zeros(g.dims)
    v[0, 0, 0] = v[1, 0, 0] = 1.0
    out = Q.matvec(v)
    assert out[0, 0, 0] == 1.0 and out[1, 0, 0] == 1.0
    with pytest.raises(ValueError):
        dominant_eigenpair(Q, method="power")  # other voxels isolated: reducible


def test_path_of_three_nodes():
    # 3x2x2 grid: lambda = sqrt(2) (x path) + 1 + 1 (two 2-node paths)
    sol = dominant_eigenpair(build_adjacency_coupling(GridGeometry((3, 2, 2))), method="power")
    assert sol.lam == pytest.approx(np.sqrt(2.0) + 2.0, rel=1e-12)
    x_profile = sol.psi.data[:, 0, 0]
    assert x_profile / x_profile[0] == pytest.approx([1.0, np.sqrt(2.0), 1.0], rel=1e-10)


@pytest.mark.parametrize("dims", [(2, 2, 2), (3, 4, 5), (6, 6, 6), (9, 7, 8), (12, 12, 12)])
@pytest.mark.parametrize("method", ["power", "auto"])
def test_matches_dense_oracle(dims, method):
    Q = build_adjacency_coupling(GridGeometry(dims), 6)
    sol = dominant_eigenpair(Q, method=method)
    lam, v = dense_dominant(Q)
    assert abs(sol.lam - lam) / lam <= 1e-8
    assert v @ sol.psi.flat() >= 1 - 1e-8
    assert sol.psi.data.min() > 0


def test_26_adjacency_closed_form_matches_dense():
    Q = build_adjacency_coupling(GridGeometry((5, 4, 6)), 26)
    sol = dominant_eigenpair(Q)
    lam, v = dense_dominant(Q)
    assert abs(sol.lam - lam) / lam <= 1e-12
    assert v @ sol.psi.flat() >= 1 - 1e-12


def test_image_weighted_matches_dense_oracle():
    rng = np.random.default_rng(1)
    g = GridGeometry((6, 5, 7))
    Q = build_image_weighted_coupling(ScalarVolume(g, rng.uniform(0, 3, g.dims)), 18, beta=0.7)
    sol = dominant_eigenpair(Q)
    lam, v = dense_dominant(Q)
    assert abs(sol.lam - lam) / lam <= 1e-10
    assert v @ sol.psi.flat() >= 1 - 1e-10


def test_plain_power_iteration_agrees():
    Q = build_adjacency_coupling(GridGeometry((5, 6, 4)), 6)
    a = dominant_eigenpair(Q, method="power", accelerate=False, max_iter=20000)
    b = dominant_eigenpair(Q)
    assert a.lam == pytest.approx(b.lam, rel=1e-12)
    assert a.psi.flat() @ b.psi.flat() >= 1 - 1e-12


def test_non_convergence_reports_residual():
    Q = build_adjacency_coupling(GridGeometry((10, 10, 10)), 6)
    with pytest.raises(EigenSolverError) as info:
        dominant_eigenpair(Q, method="power", accelerate=False, max_iter=3)
    assert info.value.residual > 0


def test_equilibrium_probability_examples():
    g = GridGeometry((2, 2, 2))
    mu = equilibrium_probability(dominant_eigenpair(build_adjacency_coupling(g)))
    assert np.allclose(mu.data, 1 / 8)
    assert mu.data.sum() == pytest.approx(1.0, abs=1e-12)
    # periodic (regular) Gaussian coupling: uniform equilibrium
    gg = GridGeometry((8, 8, 8))
    Qg = build_gaussian_coupling(gg, sigma=0.6, boundary="wrap")
    mu_g = equilibrium_probability(dominant_eigenpair(Qg))
    assert np.allclose(mu_g.data, 1 / 512, rtol=1e-10)


@pytest.mark.parametrize("kind", ["adjacency", "image"])
def test_transition_kernel_laws(kind):
    g = GridGeometry((8, 8, 8))
    if kind == "adjacency":
        Q = build_adjacency_coupling(g, 6)
    else:
        rng = np.random.default_rng(2)
        Q = build_image_weighted_coupling(ScalarVolume(g, rng.uniform(0, 2, g.dims)), 26, beta=1.5)
    rho = transition_kernel(Q)
    assert rho.row_sum_deviation() <= 1e-10
    assert rho.stationarity_residual() <= 1e-10
    # the same laws checked on the explicit matrix
    P = rho.dense()
    assert np.abs(P.sum(axis=1) - 1).max() <= 1e-10
    mu = rho.solution.mu.flat()
    assert np.abs(P.T @ mu - mu).max() <= 1e-10


def test_nonlocal_force_constant_preserved():
    g = GridGeometry((6, 7, 5))
    rho = transition_kernel(build_adjacency_coupling(g))
    f0 = np.array([1.5, -2.0, 0.25])
    field = np.broadcast_to(f0[:, None, None, None], (3,) + g.dims)
    out = nonlocal_force(VectorVolume(g, field), rho).data
    assert np.abs(out - field).max() <= 1e-12


def test_nonlocal_force_matches_dense_product():
    rng = np.random.default_rng(3)
    g = GridGeometry((6, 6, 6))
    rho = transition_kernel(build_adjacency_coupling(g))
    f = rng.normal(size=(3,) + g.dims)
    out = nonlocal_force(f, rho)
    P = rho.dense()
    for c in range(3):
        ref = (P @ f[c].ravel(order="F")).reshape(g.dims, order="F")
        assert np.abs(out[c] - ref).max() <= 1e-12


def test_nonlocal_force_delta_kernel_is_identity():
    g = GridGeometry((6, 5, 4))
    # a Gaussian narrow enough that off-centre taps underflow to zero
    rho = transition_kernel(build_gaussian_coupling(g, sigma=0.01, truncate=4.0))
    f = np.random.default_rng(4).normal(size=(3,) + g.dims)
    assert np.allclose(nonlocal_force(f, rho), f, atol=1e-15)


def test_gaussian_closed_form():
    lam, flag = gaussian_kernel_eigen(np.eye(3))
    assert lam == pytest.approx(np.pi ** 1.5) and flag
    assert lam == pytest.approx(5.568, abs=1e-3)
    assert gaussian_kernel_eigen(np.diag([4.0, 1, 1]))[0] == pytest.approx(np.sqrt(np.pi ** 3 / 4))
    with pytest.raises(ValueError):
        gaussian_kernel_eigen(np.diag([1.0, -1, 1]))


def test_gaussian_reflect_kernel_symmetric_and_stochastic():
    g = GridGeometry((7, 6, 5), (1.0, 1.5, 1.0))
    Q = build_gaussian_coupling(g, sigma=1.2)
    M = Q.to_sparse().toarray()
    assert np.allclose(M, M.T, atol=1e-14)
    rho = transition_kernel(Q)
    assert rho.row_sum_deviation() <= 1e-12


def test_gaussian_non_separable_matches_separable_when_diagonal():
    g = GridGeometry((9, 8, 7))
    S = np.diag([0.3, 0.5, 0.2])
    Q = build_gaussian_coupling(g, S=S)
    v = np.random.default_rng(5).normal(size=g.dims)
    full = Q._full_stencil()
    from scipy import ndimage
    assert np.allclose(Q.matvec(v), ndimage.correlate(v, full, mode="reflect"), atol=1e-12)
