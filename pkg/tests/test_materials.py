import logging

import numpy as np
import pytest

from radident.errors import ValidationError
from radident.materials import (
    COBALT60_ENERGIES_MEV,
    REFERENCE_MATERIALS,
    EnergyGrid,
    MaterialTable,
    SpectrumResponse,
    bremsstrahlung_spectrum,
    build_synthetic_table,
    load_material_table,
    load_spectrum_response,
    make_spectrum_response,
    save_material_table,
    save_spectrum_response,
)


def test_energy_grid_invariants():
    EnergyGrid(np.array([0.5]))
    with pytest.raises(ValidationError):
        EnergyGrid(np.array([1.0, 1.0]))
    with pytest.raises(ValidationError):
        EnergyGrid(np.array([2.0, 1.0]))
    with pytest.raises(ValidationError):
        EnergyGrid(np.array([-1.0, 1.0]))
    with pytest.raises(ValidationError):
        EnergyGrid(np.array([]))


def test_twenty_material_file_loads(tmp_path, table20):
    # the reference list has the expected twenty names, air through uranium
    assert table20.n_materials == 20
    assert "air" in table20.names and "uranium" in table20.names
    path = tmp_path / "materials.csv"
    save_material_table(table20, path)
    back = load_material_table(path)
    assert back.names == table20.names
    assert back.n_materials == 20


def test_single_zero_attenuation_material_is_valid():
    # vacuum-like material: one energy, mu = 0
    table = MaterialTable(EnergyGrid(np.array([1.0])), ("vacuum",), np.array([[0.0]]))
    assert table.mu_for("vacuum")[0] == 0.0


def test_negative_mu_names_offending_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("energy_MeV,a,b\n1.0,0.5,-0.1\n", encoding="utf-8")
    with pytest.raises(ValidationError, match=r"row 2, column 3"):
        load_material_table(path)


def test_duplicate_names_rejected():
    with pytest.raises(ValidationError, match="duplicate"):
        MaterialTable(
            EnergyGrid(np.array([1.0])), ("a", "a"), np.array([[0.1], [0.2]])
        )


def test_mismatched_vector_length_rejected():
    with pytest.raises(ValidationError):
        MaterialTable(
            EnergyGrid(np.array([1.0, 2.0])), ("a",), np.array([[0.1]])
        )


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    for trial in range(5):
        n_m, n_e = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        grid = EnergyGrid(np.sort(rng.uniform(0.1, 7.0, n_e)) + np.arange(n_e) * 1e-9)
        names = tuple(f"m{i}" for i in range(n_m))
        table = MaterialTable(grid, names, rng.uniform(0, 2, (n_m, n_e)))
        path = tmp_path / f"t{trial}.csv"
        save_material_table(table, path)
        back = load_material_table(path)
        assert np.array_equal(back.mu, table.mu)
        assert np.array_equal(back.grid.energies, table.grid.energies)


def test_cobalt_two_line_spectrum(tmp_path):
    path = tmp_path / "co60.csv"
    path.write_text("energy_MeV,weight\n1.17,0.5\n1.33,0.5\n", encoding="utf-8")
    grid = EnergyGrid(np.array(COBALT60_ENERGIES_MEV))
    q = load_spectrum_response(path, grid)
    assert np.allclose(q.product, [0.5, 0.5])


def test_unnormalized_spectrum_renormalized(tmp_path, caplog):
    path = tmp_path / "q.csv"
    path.write_text("energy_MeV,weight\n1.17,2.0\n1.33,2.0\n", encoding="utf-8")
    grid = EnergyGrid(np.array(COBALT60_ENERGIES_MEV))
    with caplog.at_level(logging.INFO):
        q = load_spectrum_response(path, grid)
    assert np.allclose(q.product, [0.5, 0.5])
    # renormalization factor (raw sum 4) is reported
    assert any("4.0" in rec.getMessage() for rec in caplog.records)


def test_bremsstrahlung_101_bins_accepted():
    q = bremsstrahlung_spectrum(7.0, 101)
    assert q.grid.n_energies == 101
    assert abs(float(q.product.sum()) - 1.0) <= 1e-12
    table = build_synthetic_table(("iron", "lead"), q.grid.energies)
    assert table.mu.shape == (2, 101)


def test_grid_mismatch_rejected(tmp_path):
    path = tmp_path / "q.csv"
    path.write_text("energy_MeV,weight\n1.0,1.0\n2.0,1.0\n", encoding="utf-8")
    grid = EnergyGrid(np.array([1.0, 2.5]))
    with pytest.raises(ValidationError, match="do not match"):
        load_spectrum_response(path, grid)


def test_all_zero_spectrum_rejected(tmp_path):
    path = tmp_path / "q.csv"
    path.write_text("energy_MeV,weight\n1.0,0.0\n2.0,0.0\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="zero"):
        load_spectrum_response(path, EnergyGrid(np.array([1.0, 2.0])))


def test_normalization_holds_after_every_constructor(tmp_path):
    rng = np.random.default_rng(3)
    for _ in range(10):
        n_e = int(rng.integers(1, 12))
        grid = EnergyGrid(np.sort(rng.uniform(0.1, 7, n_e)) + np.arange(n_e) * 1e-9)
        q = make_spectrum_response(grid, rng.uniform(0, 3, n_e) + 1e-3)
        assert abs(float(q.product.sum()) - 1.0) <= 1e-12
        path = tmp_path / "rt.csv"
        save_spectrum_response(q, path)
        back = load_spectrum_response(path, grid)  # reloading renormalizes
        assert abs(float(back.product.sum()) - 1.0) <= 1e-12
        assert np.allclose(back.product, q.product, rtol=1e-14, atol=0)


def test_direct_spectrum_response_constructor_enforces_sum():
    grid = EnergyGrid(np.array([1.0, 2.0]))
    with pytest.raises(ValidationError, match="sum to 1"):
        SpectrumResponse(grid, np.array([0.5, 0.6]))


def test_packaged_data_matches_builder():
    # shipped CSVs are generated from the same deterministic builder
    from radident.materials import cobalt60_spectrum, packaged_data_path

    table = load_material_table(packaged_data_path("materials_co60.csv"))
    built = build_synthetic_table()
    assert table.names == built.names
    assert np.array_equal(table.mu, built.mu)
    q = load_spectrum_response(packaged_data_path("spectrum_co60.csv"), table.grid)
    assert np.array_equal(q.product, cobalt60_spectrum().product)
    brems = load_material_table(packaged_data_path("materials_brems7MeV.csv"))
    assert brems.grid.n_energies == 101
    with pytest.raises(ValidationError):
        packaged_data_path("nope.csv")


def test_reference_materials_cover_hardware_list():
    expected = {
        "air", "aluminum", "beryllium", "bismuth", "boron", "carbon", "copper",
        "gold", "high explosive", "iron", "lead", "lithium", "molybdenum",
        "plutonium", "polycarbonate", "tantalum", "tin", "titanium",
        "tungsten", "uranium",
    }
    assert set(REFERENCE_MATERIALS) == expected
