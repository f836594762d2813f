import numpy as np
import pytest

from neurodyn.mesh import (
    TriangleMesh,
    build_laplacian,
    compute_eigenmodes,
    icosphere,
    tetrahedron,
)


@pytest.fixture(scope="session")
def tetra():
    return tetrahedron()


@pytest.fixture(scope="session")
def sphere2():
    return icosphere(2)


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3)


@pytest.fixture(scope="session")
def tetra_basis(tetra):
    stiffness, mass = build_laplacian(tetra)
    return compute_eigenmodes(stiffness, mass, 4)


@pytest.fixture(scope="session")
def sphere2_basis(sphere2):
    stiffness, mass = build_laplacian(sphere2)
    return compute_eigenmodes(stiffness, mass, 16)


def bumpy_mesh(seed=0):
    """Icosphere with radial noise; guaranteed to contain obtuse triangles."""
    mesh = icosphere(2)
    rng = np.random.default_rng(seed)
    radii = 1.0 + 0.25 * rng.standard_normal(mesh.n_vertices)
    return TriangleMesh(mesh.vertices * radii[:, None], mesh.faces)
