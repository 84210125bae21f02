import numpy as np
import pytest

from stokes_rb import assembly, geometry


@pytest.fixture(scope="session")
def tiny_mesh():
    return geometry.generate_reference_mesh(1)


@pytest.fixture(scope="session")
def tiny_spaces(tiny_mesh):
    return assembly.build_truth_spaces(tiny_mesh)


@pytest.fixture(scope="session")
def tiny_ops(tiny_mesh, tiny_spaces):
    return assembly.assemble_affine_operators(tiny_mesh, tiny_spaces)


@pytest.fixture(scope="session")
def tiny_grid():
    return assembly.TimeGrid(T=1.0, K=20)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
