"""Shared fixtures and the randomized-instance generator used by the
solver property tests and the acceptance suite."""

import numpy as np
import pytest

from radident.forward import Assignment, Radiograph, direct, scatter_basis
from radident.geometry import (
    DetectorGrid,
    Scene,
    SphericalShell,
    slab_from_box,
    trace_scene,
)
from radident.materials import (
    EnergyGrid,
    MaterialTable,
    build_synthetic_table,
    cobalt60_spectrum,
    make_spectrum_response,
)


@pytest.fixture(scope="session")
def table20():
    return build_synthetic_table()


@pytest.fixture(scope="session")
def q_co60():
    return cobalt60_spectrum()


def random_table(rng, n_materials, n_energies):
    energies = np.sort(rng.uniform(0.3, 7.0, size=n_energies))
    # keep the grid strictly increasing even for near-duplicates
    energies += np.arange(n_energies) * 1e-6
    grid = EnergyGrid(energies)
    names = tuple(f"mat_{chr(ord('a') + i)}" for i in range(n_materials))
    mu = rng.uniform(0.05, 1.5, size=(n_materials, n_energies))
    return MaterialTable(grid, names, mu)


def random_scene(rng, n_objects, grid_px):
    grid = DetectorGrid(grid_px, grid_px, pitch_cm=0.25)
    fov = grid_px * grid.pitch_cm
    objects = []
    for _ in range(n_objects):
        if rng.random() < 0.6:
            r_out = rng.uniform(0.15, 0.4) * fov
            r_in = rng.uniform(0.0, 0.8) * r_out
            center = (
                rng.uniform(-0.2, 0.2) * fov,
                rng.uniform(-0.2, 0.2) * fov,
                rng.uniform(8.0, 12.0),
            )
            objects.append(SphericalShell(center, r_in, r_out))
        else:
            u0 = int(rng.integers(0, grid_px - 3))
            v0 = int(rng.integers(0, grid_px - 3))
            u1 = int(rng.integers(u0 + 2, grid_px))
            v1 = int(rng.integers(v0 + 2, grid_px))
            objects.append(slab_from_box(grid, u0, v0, u1, v1,
                                         thickness_cm=rng.uniform(0.5, 4.0)))
    return Scene(grid, source_to_detector_cm=60.0, objects=tuple(objects))


def random_instance(rng, n_objects=None, n_materials=None, grid_px=24,
                    order=2, noise=None, beam="parallel", mask_holes=False):
    """A full synthetic identification problem with known generating truth.

    Returns (radiograph, paths, table, spectrum, truth_assignment).  The
    scatter truth is a random polynomial of the fitted order, so the
    generating assignment has zero residual at zero noise.
    """
    if n_objects is None:
        n_objects = int(rng.integers(1, 5))
    if n_materials is None:
        n_materials = int(rng.integers(2, 7))
    n_energies = int(rng.integers(1, 4))
    table = random_table(rng, n_materials, n_energies)
    spectrum = make_spectrum_response(
        table.grid, rng.uniform(0.2, 1.0, size=n_energies)
    )
    scene = random_scene(rng, n_objects, grid_px)
    paths = trace_scene(scene, beam)
    truth = Assignment(tuple(rng.choice(table.names, size=n_objects)))
    d = direct(truth, paths, table, spectrum)
    scatter = np.zeros(scene.grid.shape)
    for img in scatter_basis(order, scene.grid):
        scatter += rng.uniform(-0.05, 0.08) * img
    values = d + scatter
    if noise is None:
        noise = float(rng.choice([0.0, 0.002, 0.02]))
    if noise > 0:
        values = values + noise * rng.standard_normal(values.shape)
    valid = None
    if mask_holes or rng.random() < 0.3:
        valid = rng.random(values.shape) > 0.05
        if not valid.any():
            valid[0, 0] = True
    return Radiograph(values, valid), paths, table, spectrum, truth
