import numpy as np
import pytest
from scipy.linalg import polar
from hypothesis import given, settings
from hypothesis import strategies as st

from modalshape.errors import ConfigurationError, InvalidInputError, NumericError
from modalshape.mesh import (MaterialParams, SolidMesh, _orient_tets, boundary_faces, element_stiffness,
                             generate_box_mesh)
from modalshape.plant import Plant, generate_desired, plant_metrics, plant_step

MAT = MaterialParams(100.0, 0.3, 1.0)


def _two_tets():
    X = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0.8, 0.8, 0.8]])
    tets = _orient_tets(X, [[0, 1, 2, 3], [1, 2, 3, 4]])
    return SolidMesh(X, tets, boundary_faces(X, tets))


def _bar_plant(**kw):
    mesh = generate_box_mesh([1.0, 4.0, 0.5], [2, 8, 1])
    fixed = np.flatnonzero(mesh.nodes[:, 1] < 1e-12)
    tip = np.flatnonzero(mesh.nodes[:, 1] > 4 - 1e-12)
    return Plant(mesh, MAT, fixed, tip[:2], **kw)


def test_two_tet_hand_solve():
    mesh = _two_tets()
    plant = Plant(mesh, MAT, [0, 1, 2], [4])
    d = np.array([0.1, -0.05, 0.2])
    plant_step(plant, d / 0.5, 0.5)
    # dense assembly from element matrices, then eliminate by hand
    Ke, _ = element_stiffness(mesh.nodes, mesh.tets, MAT.E, MAT.v)
    K = np.zeros((15, 15))
    for t, k in zip(mesh.tets, Ke):
        dofs = (3 * t[:, None] + np.arange(3)).ravel()
        K[np.ix_(dofs, dofs)] += k
    free = [9, 10, 11]
    u3 = np.linalg.solve(K[np.ix_(free, free)], -K[np.ix_(free, [12, 13, 14])] @ d)
    np.testing.assert_allclose(plant.state[3] - mesh.nodes[3], u3, atol=1e-14)
    np.testing.assert_allclose(plant.state[4], mesh.nodes[4] + d, atol=1e-15)
    assert np.array_equal(plant.state[:3], mesh.nodes[:3])


def test_zero_command_is_bit_identical():
    plant = _bar_plant()
    plant_step(plant, np.full(6, 0.3), 0.1)
    before = plant.state.copy()
    for _ in range(5):
        obs = plant_step(plant, np.zeros(6), 0.1)
    assert np.array_equal(plant.state, before)
    assert np.array_equal(obs.full_state, before)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_constraints_exact_and_superposition(seed):
    rng = np.random.default_rng(seed)
    v1, v2 = rng.normal(size=(2, 6))
    a = _bar_plant()
    plant_step(a, v1, 0.1)
    plant_step(a, v2, 0.1)
    b = _bar_plant()
    plant_step(b, v1 + v2, 0.1)
    np.testing.assert_allclose(a.state, b.state, atol=1e-10)
    assert np.array_equal(a.state[a.fixed], a.rest[a.fixed])
    np.testing.assert_allclose(a.state[a.manip], a.targets, atol=1e-12)


def test_energy_sanity():
    plant = _bar_plant()
    assert plant.elastic_energy() == 0.0
    plant_step(plant, np.array([0.0, 0, 1, 0, 0, 1]), 0.1)
    assert plant.elastic_energy() > 0


def test_observe():
    plant = _bar_plant()
    plant_step(plant, np.ones(6), 0.1)
    obs = plant.observe([3, 5])
    np.testing.assert_array_equal(obs.sample_positions, plant.state[[3, 5]])
    np.testing.assert_array_equal(obs.manip_positions, plant.state[plant.manip])
    obs.full_state[0] = 99.0
    assert plant.state[0, 0] != 99.0


def test_step_errors():
    plant = _bar_plant()
    with pytest.raises(InvalidInputError):
        plant_step(plant, np.zeros(3), 0.1)
    with pytest.raises(NumericError):
        plant_step(plant, np.full(6, np.nan), 0.1)


def test_configuration_errors():
    mesh = generate_box_mesh([1.0, 1.0, 1.0], [2, 2, 2])
    with pytest.raises(ConfigurationError):
        Plant(mesh, MAT, [0, 1, 2], [2])               # overlap
    with pytest.raises(ConfigurationError):
        Plant(mesh, MAT, [0, 1], [20])                 # too few fixed
    with pytest.raises(ConfigurationError):
        Plant(mesh, MAT, [0, 1, 2], [])                # nothing to grasp
    with pytest.raises(ConfigurationError):
        Plant(mesh, MAT, [0, 1, 2, 3], [999])          # id out of range
    with pytest.raises(ConfigurationError):
        Plant(mesh, MAT, [0, 1, 3], [20, 20])          # duplicate
    line = np.flatnonzero((mesh.nodes[:, 1] == 0) & (mesh.nodes[:, 2] == 0))
    with pytest.raises(ConfigurationError):
        Plant(mesh, MAT, line, [26])                   # collinear


def test_metrics():
    plant = _bar_plant()
    e_x, e_d = plant_metrics(plant, plant.rest, plant.rest[plant.manip])
    assert e_x == 0 and np.all(e_d == 0)
    desired = plant.rest.copy()
    desired[7] += [1.0, 0.0, 0.0]
    assert plant_metrics(plant, desired, plant.rest[plant.manip])[0] == 1.0
    rng = np.random.default_rng(0)
    plant_step(plant, rng.normal(size=6), 0.1)
    xd = plant.rest + rng.normal(size=plant.rest.shape)
    rd = rng.normal(size=(2, 3))
    e_x, e_d = plant_metrics(plant, xd, rd)
    assert e_x == pytest.approx(sum(float(((plant.state[i] - xd[i]) ** 2).sum()) for i in range(len(xd))),
                                rel=1e-12)
    np.testing.assert_allclose(e_d, (plant.state[plant.manip] - rd).ravel(), atol=0)
    with pytest.raises(InvalidInputError):
        plant_metrics(plant, xd[:3], rd)


def test_generate_desired():
    plant = _bar_plant()
    d = np.array([0.3, -0.2, 0.5])
    one = generate_desired(plant, d, steps=1)
    many = generate_desired(plant, d, steps=100)
    assert np.abs(one.full_state - many.full_state).max() <= 1e-10
    np.testing.assert_allclose(one.manip_positions, plant.rest[plant.manip] + d, atol=1e-15)
    assert np.array_equal(plant.state, plant.rest)        # plant put back at rest
    rest = generate_desired(plant, np.zeros(3))
    assert np.array_equal(rest.full_state, plant.rest)
    with pytest.raises(InvalidInputError):
        generate_desired(plant, np.zeros(9))
    with pytest.raises(InvalidInputError):
        generate_desired(plant, d, steps=0)


def test_corotational_plant():
    lin = _bar_plant()
    cor = _bar_plant(corotational=True)
    small = np.full(6, 1e-6)
    plant_step(lin, small, 1.0)
    plant_step(cor, small, 1.0)
    assert np.abs(lin.state - cor.state).max() <= 1e-9
    # a large bend: fixed nodes stay put and the grasped nodes reach their targets
    big = np.array([0.0, -1.0, 2.0, 0.0, -1.0, 2.0])
    plant_step(cor, big, 1.0)
    assert np.array_equal(cor.state[cor.fixed], cor.rest[cor.fixed])
    np.testing.assert_allclose(cor.state[cor.manip], cor.targets, atol=1e-12)
    # the result is an equilibrium of the warped forces R Ke (R^T x - X)
    mesh = cor.mesh
    Ke, _ = element_stiffness(mesh.nodes, mesh.tets, MAT.E, MAT.v)
    f = np.zeros(mesh.n_dofs)
    scale = 0.0
    for t, k in zip(mesh.tets, Ke):
        Dm = (mesh.nodes[t[1:]] - mesh.nodes[t[0]]).T
        Ds = (cor.state[t[1:]] - cor.state[t[0]]).T
        R, _ = polar(Ds @ np.linalg.inv(Dm))
        Rb = np.kron(np.eye(4), R)
        fe = Rb @ k @ (Rb.T @ cor.state[t].ravel() - mesh.nodes[t].ravel())
        f[(3 * t[:, None] + np.arange(3)).ravel()] += fe
        scale = max(scale, np.abs(fe).max())
    free = np.setdiff1d(np.arange(mesh.n_nodes), np.concatenate([cor.fixed, cor.manip]))
    assert np.abs(f.reshape(-1, 3)[free]).max() <= 1e-8 * scale
    # the linear plant is not in that equilibrium
    plant_step(lin, big, 1.0)
    assert np.abs(lin.state - cor.state).max() > 0.1
