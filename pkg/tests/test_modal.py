import numpy as np
import pytest
import scipy.sparse as sp

from modalshape.errors import InvalidRequestError
from modalshape.mesh import (AssembledSystem, EllipsoidSpec, MaterialParams, assemble_system,
                             generate_ellipsoid_mesh, generate_box_mesh)
from modalshape.modal import load_basis, rectified_projection, save_basis, solve_modes


def _residuals(sys, basis):
    K, M = sys.K, sys.M
    Knorm = abs(K).sum(axis=0).max()
    R = K @ basis.Phi - (M @ basis.Phi) * basis.freqs
    return np.linalg.norm(R, axis=0) / (Knorm * np.linalg.norm(basis.Phi, axis=0))


def test_stock_basis_invariants(stock_system, stock_basis):
    b = stock_basis
    G = b.Phi.T @ (stock_system.M @ b.Phi)
    assert np.abs(G - np.eye(b.m)).max() <= 1e-8
    assert np.all(_residuals(stock_system, b) <= 1e-8)
    assert np.all(np.diff(b.freqs) >= 0)
    assert np.all(b.freqs[:6] <= 1e-6 * b.freqs[-1])
    assert b.freqs[6] > 0
    Kt = b.Phi.T @ (stock_system.K @ b.Phi)
    off = Kt - np.diag(np.diag(Kt))
    assert np.abs(off).max() <= 1e-6 * np.abs(np.diag(Kt)).max()


def test_two_node_spring_mass():
    k, m1, m2 = 3.0, 2.0, 5.0
    K = sp.csr_matrix(np.kron(np.array([[k, -k], [-k, k]]), np.eye(3)))
    M = sp.diags(np.repeat([m1, m2], 3)).tocsr()
    sys = AssembledSystem(K, M, np.array([[0.0, 0, 0], [1, 0, 0]]))
    b = solve_modes(sys, 6)
    np.testing.assert_allclose(b.freqs[:3], 0.0, atol=1e-12)
    np.testing.assert_allclose(b.freqs[3:], k * (1 / m1 + 1 / m2), rtol=1e-12)
    np.testing.assert_allclose(b.Phi.T @ M @ b.Phi, np.eye(6), atol=1e-12)


def test_full_basis_on_single_tet():
    mesh = generate_box_mesh([1.0, 1.0, 1.0], [1, 1, 1])
    sys = assemble_system(mesh, MaterialParams(10.0, 0.3, 2.0))
    n = mesh.n_dofs
    b = solve_modes(sys, n)
    assert b.m == n
    assert np.abs(b.Phi.T @ (sys.M @ b.Phi) - np.eye(n)).max() <= 1e-8
    assert np.all(_residuals(sys, b) <= 1e-8)


def test_request_errors(small_mesh):
    sys = assemble_system(small_mesh, MaterialParams(1.0, 0.3, 1.0))
    with pytest.raises(InvalidRequestError):
        solve_modes(sys, small_mesh.n_dofs + 1)
    with pytest.raises(InvalidRequestError):
        solve_modes(sys, 0)


def test_truncation_consistency(stock_system, stock_basis):
    small = solve_modes(stock_system, 12)
    assert np.array_equal(small.freqs, stock_basis.freqs[:12]) or np.allclose(small.freqs, stock_basis.freqs[:12],
                                                                             rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(small.Phi, stock_basis.Phi[:, :12], atol=1e-8 * np.abs(small.Phi).max())
    t = stock_basis.truncate(12)
    assert np.array_equal(t.Phi, stock_basis.Phi[:, :12])


def test_dense_and_sparse_paths_agree(stock_system, stock_basis):
    assert stock_system.K.shape[0] > 600       # default takes the sparse path
    dense = solve_modes(stock_system, 30, dense_limit=10 ** 6)
    np.testing.assert_allclose(dense.freqs, stock_basis.freqs, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(dense.Phi, stock_basis.Phi, atol=1e-7 * np.abs(dense.Phi).max())


def test_degenerate_modes_canonical_on_symmetric_ellipsoid():
    # a_x = a_y gives repeated eigenvalues; the result must not depend on
    # how the solver happens to pick vectors inside each eigenspace
    mesh = generate_ellipsoid_mesh(EllipsoidSpec(2.0, 2.0, 1.0, n_lat=6, n_lon=8, n_rad=1))
    sys = assemble_system(mesh, MaterialParams(50.0, 0.45, 20.0))
    a = solve_modes(sys, 18)
    perm = np.random.default_rng(0).permutation(mesh.n_nodes)
    # relabel nodes: same physics, different dof order
    inv = np.argsort(perm)
    from modalshape.mesh import SolidMesh
    relabeled = SolidMesh(mesh.nodes[perm], inv[mesh.tets], inv[mesh.surface_tris], mesh.center)
    b = solve_modes(assemble_system(relabeled, MaterialParams(50.0, 0.45, 20.0)), 18)
    np.testing.assert_allclose(a.freqs, b.freqs, rtol=1e-9, atol=1e-9)
    assert np.any(np.abs(np.diff(a.freqs[6:])) <= 1e-8 * a.freqs[-1])   # there are repeats
    again = solve_modes(sys, 18)
    assert np.array_equal(a.Phi, again.Phi)


def test_sign_convention(stock_basis):
    for j in range(stock_basis.m):
        col = stock_basis.Phi[:, j]
        big = np.abs(col).max()
        first = np.flatnonzero(np.abs(col) >= big * (1 - 1e-8))[0]
        assert col[first] > 0


def test_rectifier(stock_basis):
    b = stock_basis
    shifted = np.diag(b.freqs) + np.diag([1.0] * 6 + [0.0] * (b.m - 6))
    assert np.abs(b.rectifier @ shifted - np.eye(b.m)).max() <= 1e-12
    np.testing.assert_array_equal(b.rectifier_diag[:6], 1.0)


def test_rectified_projection(stock_basis, stock_mesh):
    rows = np.arange(stock_mesh.n_nodes)
    D = rectified_projection(stock_basis, rows)
    assert D.shape == (30, stock_mesh.n_dofs)
    oracle = np.linalg.inv(stock_basis.K_tilde + np.diag([1.0] * 6 + [0.0] * 24)) @ stock_basis.Phi.T
    assert np.abs(D - oracle).max() <= 1e-12 * np.abs(oracle).max()
    assert rectified_projection(stock_basis, [5]).shape == (30, 3)
    with pytest.raises(InvalidRequestError):
        rectified_projection(stock_basis, [])
    # a scaled single-mode displacement, M-weighted, comes back as the
    # rectified coefficient of that mode only
    j, c = 10, 2.5
    u = c * stock_basis.Phi[:, j]
    sys_M = assemble_system(stock_mesh, MaterialParams(50.0, 0.45, 20.0)).M
    s = D @ (sys_M @ u)
    expected = np.zeros(30)
    expected[j] = c * stock_basis.rectifier_diag[j]
    assert np.abs(s - expected).max() <= 1e-9 * abs(expected[j])


def test_save_load_bit_identical(tmp_path, small_basis):
    p = tmp_path / "b.modes"
    save_basis(small_basis, p)
    back = load_basis(p)
    assert np.array_equal(back.Phi, small_basis.Phi)
    assert np.array_equal(back.freqs, small_basis.freqs)
    assert back.n_rigid == small_basis.n_rigid
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(InvalidRequestError):
        load_basis(p)


def test_basis_is_read_only(small_basis):
    with pytest.raises(ValueError):
        small_basis.Phi[0, 0] = 1.0
