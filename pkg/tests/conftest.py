import numpy as np
import pytest

from udfgen.corpus import ShapeSpec, generate_shape
from udfgen.geometry import DistanceIndex, Mesh


@pytest.fixture(scope="session")
def sphere_mesh():
    return generate_shape(ShapeSpec("sphere", {"radius": 0.5}))


@pytest.fixture(scope="session")
def sphere_index(sphere_mesh):
    return DistanceIndex(sphere_mesh)


@pytest.fixture(scope="session")
def torus_mesh():
    return generate_shape(ShapeSpec("torus", {"major": 0.6, "minor": 0.2}))


@pytest.fixture
def single_triangle():
    return Mesh(
        np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        np.array([[0, 1, 2]]),
    )


def brute_force_distance(mesh: Mesh, x):
    """O(n*m) reference: exact min over every triangle."""
    from udfgen.geometry import point_triangle_distances

    d, cp = point_triangle_distances(np.asarray(x, dtype=float), mesh.triangle_corners)
    j = int(np.argmin(d))
    return float(d[j]), cp[j]
