from pathlib import Path

import numpy as np
import pytest

from modalshape.harness import BasisCache
from modalshape.mesh import EllipsoidSpec, MaterialParams, assemble_system, generate_ellipsoid_mesh
from modalshape.modal import solve_modes

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

BASE_MATERIAL = MaterialParams(50.0, 0.45, 20.0)


@pytest.fixture(scope="session")
def small_mesh():
    # 43 nodes: dense eigen path, cheap to build
    return generate_ellipsoid_mesh(EllipsoidSpec(2.0, 1.5, 1.0, n_lat=6, n_lon=8, n_rad=1))


@pytest.fixture(scope="session")
def small_basis(small_mesh):
    return solve_modes(assemble_system(small_mesh, BASE_MATERIAL), 24)


@pytest.fixture(scope="session")
def stock_mesh():
    return generate_ellipsoid_mesh(EllipsoidSpec(5.0, 4.0, 3.0))


@pytest.fixture(scope="session")
def stock_system(stock_mesh):
    return assemble_system(stock_mesh, BASE_MATERIAL)


@pytest.fixture(scope="session")
def stock_basis(stock_system):
    return solve_modes(stock_system, 30)


@pytest.fixture(scope="session")
def shared_cache():
    return BasisCache()


def surface_points(mesh, count, seed=0, scale=1.3):
    """Random points outside the mesh, spread over all directions."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return mesh.center + scale * np.abs(mesh.nodes - mesh.center).max() * d
