import numpy as np
import pytest

from ifenn.constitutive import DamageParams, ElasticParams, Material, StrainMeasure
from ifenn.mesh import DirichletBC, Mesh, build_mesh, generate_structured


@pytest.fixture
def lemaitre_material():
    return Material(ElasticParams(125000.0, 0.2), StrainMeasure("lemaitre"),
                    DamageParams("mazars-original", 0.7, 1.0e4, 1.0e-4))


@pytest.fixture
def mvm_material():
    return Material(ElasticParams(125000.0, 0.2), StrainMeasure("modified-von-mises", 10.0),
                    DamageParams("mazars-modified", 0.99, 400.0, 1.0e-4))


@pytest.fixture
def unit_square():
    return generate_structured(1.0, 1.0, 1, 1, 0.0)


def distorted_quad(rng, jitter=0.2):
    """A single convex element with randomly perturbed corners."""
    base = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]])
    coords = base + rng.uniform(-jitter, jitter, base.shape)
    return build_mesh(coords, np.array([[0, 1, 2, 3]]), lambda mid, n: "free",
                      [DirichletBC(0, "ux", 0.0), DirichletBC(0, "uy", 0.0), DirichletBC(1, "uy", 0.0)])


def central_jacobian(fun, x, h):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((fun(x + e) - fun(x - e)) / (2.0 * h))
    return np.column_stack(cols)


def rel_frobenius(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


__all__ = ["ACCEPTANCE_LINES", "Mesh", "distorted_quad", "central_jacobian", "rel_frobenius"]
