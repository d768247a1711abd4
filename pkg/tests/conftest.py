import sys

import numpy as np
import pytest

from afflow import manifold as mf
from afflow.flow import FlowOperator, distance_field
from afflow.graph import WeightField, build_grid


def random_weights(graph, rng, spread=1.0):
    return WeightField(graph, mf.exp_map(np.full((graph.n_pixels, graph.patch_size), 1.0 / graph.patch_size),
                                         spread * rng.standard_normal((graph.n_pixels, graph.patch_size))))


def small_operator(rng, height=2, width=2, n_labels=2, random_omega=True, rho=1.0):
    """Random flow operator on a tiny torus; returns (op, image, labels)."""
    g = build_grid(height, width)
    image = rng.uniform(0, 1, size=(height, width, 3))
    labels = rng.uniform(0, 1, size=(n_labels, 3))
    omega = random_weights(g, rng) if random_omega else WeightField(g, np.full((g.n_pixels, 9), 1 / 9))
    return FlowOperator(g, omega, distance_field(image, labels, rho)), image, labels


def random_tangent_patches(rng, op):
    return mf.project_tangent(rng.standard_normal(op.graph.neighbor_index.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        status, detail = mod.RESULTS[n]
        terminalreporter.write_line("criterion %d: %s  %s" % (n, status, detail))
