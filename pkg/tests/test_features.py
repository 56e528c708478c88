import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import surface_points
from modalshape.errors import DegenerateInputError, InvalidInputError
from modalshape.features import SamplingSet, compute_features, error_norm, feature_error, resample_polyline
from modalshape.mapping import build_allocation, build_feature_projector, project_points
from modalshape.mesh import (EllipsoidSpec, MaterialParams, RigidTransform, assemble_system,
                             generate_ellipsoid_mesh)
from modalshape.modal import solve_modes

MESH = generate_ellipsoid_mesh(EllipsoidSpec(2.0, 1.5, 1.0, n_lat=6, n_lon=8, n_rad=1))
BASIS = solve_modes(assemble_system(MESH, MaterialParams(50.0, 0.45, 20.0)), 24)
POINTS = surface_points(MESH, 12, seed=11)
PROJ = build_feature_projector(BASIS, build_allocation(MESH, project_points(MESH, POINTS)))


def test_resample_segment():
    out = resample_polyline([[0, 0, 0], [1, 0, 0]], 3).reshape(-1, 3)
    np.testing.assert_allclose(out[:, 0], [0.0, 0.5, 1.0])


def test_resample_closed_square():
    sq = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    out = resample_polyline(sq, 4, closed=True).reshape(-1, 3)
    np.testing.assert_allclose(out, sq, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 1000))
def test_resample_uniform_vertices_reproduced(n, seed):
    rng = np.random.default_rng(seed)
    steps = rng.normal(size=(n - 1, 3))
    steps /= np.linalg.norm(steps, axis=1)[:, None]
    P = np.vstack([np.zeros(3), np.cumsum(steps, axis=0)])
    np.testing.assert_allclose(resample_polyline(P, n).reshape(-1, 3), P, atol=1e-12)


def test_resample_errors():
    with pytest.raises(DegenerateInputError):
        resample_polyline([[1, 1, 1], [1, 1, 1]], 3)
    with pytest.raises(DegenerateInputError):
        resample_polyline([[0, 0, 0]], 3)
    with pytest.raises(DegenerateInputError):
        resample_polyline([[0, 0, 0], [1, 0, 0]], 1)


def test_features_zero_at_rest():
    assert np.all(compute_features(PROJ, PROJ.rest_eta) == 0.0)


def test_features_dense_oracle():
    alloc = build_allocation(MESH, project_points(MESH, POINTS), BASIS)
    N = alloc.N_sparse.toarray()
    oracle = np.diag(BASIS.rectifier_diag) @ BASIS.rows(alloc.node_ids).T @ N.T
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = PROJ.rest_eta + rng.normal(size=PROJ.rest_eta.size)
        s = compute_features(PROJ, x)
        assert np.abs(s - oracle @ (x - PROJ.rest_eta)).max() <= 1e-12 * max(1.0, np.abs(s).max())


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 10_000))
def test_features_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    u1, u2 = rng.normal(size=(2, PROJ.rest_eta.size))
    s1 = compute_features(PROJ, PROJ.rest_eta + u1)
    s2 = compute_features(PROJ, PROJ.rest_eta + u2)
    s = compute_features(PROJ, PROJ.rest_eta + a * u1 + b * u2)
    scale = max(1.0, np.abs(s1).max(), np.abs(s2).max()) * (1 + abs(a) + abs(b))
    assert np.abs(s - (a * s1 + b * s2)).max() <= 1e-12 * scale


def test_features_scale_exactly():
    u = np.random.default_rng(3).normal(size=PROJ.rest_eta.size)
    s = compute_features(PROJ, PROJ.rest_eta + u)
    np.testing.assert_allclose(compute_features(PROJ, PROJ.rest_eta + 2.5 * u), 2.5 * s,
                               rtol=1e-12, atol=1e-12 * np.abs(s).max())


def test_world_frame_measurements():
    pose = RigidTransform.from_euler_deg([20, -35, 60], [0.4, -1.0, 2.0])
    x_base = (PROJ.rest_eta + 0.05 * np.random.default_rng(4).normal(size=PROJ.rest_eta.size)).reshape(-1, 3)
    x_world = pose.apply(x_base)
    s_native = compute_features(PROJ, x_base.ravel())
    s_world = compute_features(PROJ, pose.apply_inverse(x_world).ravel())
    assert np.abs(s_world - s_native).max() <= 1e-12 * max(1.0, np.abs(s_native).max())


def test_rigid_offset_absorbed_by_rigid_modes(stock_mesh, stock_basis):
    """Most of a uniform translation's feature response sits in modes 1-6."""
    for seed in range(5):
        P = surface_points(stock_mesh, 20, seed=seed)
        proj = build_feature_projector(stock_basis, build_allocation(stock_mesh, project_points(stock_mesh, P)))
        for d in np.eye(3).tolist() + [[0.3, -0.7, 0.2]]:
            ds = proj.matrix() @ np.tile(d, 20)
            assert (ds[6:] ** 2).sum() <= 0.05 * (ds ** 2).sum()


def test_sampling_set_checks():
    with pytest.raises(InvalidInputError):
        SamplingSet(np.zeros(4))
    with pytest.raises(InvalidInputError):
        SamplingSet(np.zeros(6), ids=(1,))
    s = SamplingSet(PROJ.rest_eta, ids=tuple(range(12)))
    np.testing.assert_array_equal(compute_features(PROJ, s), 0.0)
    with pytest.raises(InvalidInputError):
        compute_features(PROJ, np.zeros(3 * 11))
    ids_proj = build_feature_projector(BASIS, build_allocation(MESH, project_points(MESH, POINTS)),
                                       sample_ids=tuple(range(100, 112)))
    with pytest.raises(InvalidInputError):
        compute_features(ids_proj, s)


def test_feature_error():
    rng = np.random.default_rng(5)
    s, s_star = rng.normal(size=(2, 24))
    assert np.all(feature_error(s, s) == 0) and error_norm(feature_error(s, s)) == 0
    np.testing.assert_array_equal(feature_error(s, np.zeros(24)), s)
    assert error_norm(feature_error(s, s_star)) == pytest.approx(np.linalg.norm(s - s_star), abs=1e-15)
    with pytest.raises(InvalidInputError):
        feature_error(s, s_star[:5])
