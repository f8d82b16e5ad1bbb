"""Energy grids, attenuation tables, and the spectrum-response product.

All attenuation values are linear coefficients in 1/cm so that
``mu * path_length_cm`` is a dimensionless optical depth.  The product of
source spectrum and detector response is stored pre-normalized to sum
exactly one, which is the convention the whole forward model relies on.

File formats (UTF-8, LF, decimal text at full round-trip precision):

* attenuation CSV: header ``energy_MeV,<name1>,<name2>,...``, one row per
  energy, values in 1/cm;
* spectrum CSV: header ``energy_MeV,weight``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

GRID_MATCH_RTOL = 1e-9
SPECTRUM_SUM_TOL = 1e-12


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class EnergyGrid:
    """Ascending photon energies in MeV shared by table and spectrum."""

    energies: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "energies", _frozen(self.energies))
        e = self.energies
        if e.ndim != 1 or e.size < 1:
            raise ValidationError("energy grid must be a non-empty 1-D vector")
        if not np.all(np.isfinite(e)) or np.any(e <= 0):
            raise ValidationError("energy grid entries must be finite and > 0")
        if e.size > 1 and not np.all(np.diff(e) > 0):
            raise ValidationError("energy grid must be strictly increasing")

    @property
    def n_energies(self) -> int:
        return int(self.energies.size)

    def matches(self, other: "EnergyGrid", rtol: float = GRID_MATCH_RTOL) -> bool:
        if self.n_energies != other.n_energies:
            return False
        return bool(np.allclose(self.energies, other.energies, rtol=rtol, atol=0.0))


@dataclass(frozen=True)
class MaterialTable:
    """Named set of materials with per-energy linear attenuation vectors."""

    grid: EnergyGrid
    names: tuple
    mu: np.ndarray  # shape (M, Ne), 1/cm

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "mu", _frozen(self.mu))
        if len(self.names) < 1:
            raise ValidationError("material table needs at least one material")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise ValidationError(f"duplicate material names: {dupes}")
        if self.mu.shape != (len(self.names), self.grid.n_energies):
            raise ValidationError(
                f"mu shape {self.mu.shape} does not match "
                f"{len(self.names)} materials x {self.grid.n_energies} energies"
            )
        if not np.all(np.isfinite(self.mu)) or np.any(self.mu < 0):
            bad = np.argwhere(~np.isfinite(self.mu) | (self.mu < 0))[0]
            raise ValidationError(
                f"attenuation for material '{self.names[bad[0]]}' at energy index "
                f"{bad[1]} is negative or non-finite"
            )

    @property
    def n_materials(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown material name: {name!r}") from None

    def mu_for(self, name: str) -> np.ndarray:
        return self.mu[self.index(name)]

    def subset(self, names) -> "MaterialTable":
        idx = [self.index(n) for n in names]
        return MaterialTable(self.grid, tuple(names), self.mu[idx])


@dataclass(frozen=True)
class SpectrumResponse:
    """Elementwise product of source spectrum and detector response.

    Entries are nonnegative and sum to one; the gain fitted downstream
    absorbs any overall scale, so only the shape carries information.
    """

    grid: EnergyGrid
    product: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "product", _frozen(self.product))
        q = self.product
        if q.shape != (self.grid.n_energies,):
            raise ValidationError(
                f"spectrum length {q.size} does not match grid ({self.grid.n_energies})"
            )
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise ValidationError("spectrum-response entries must be finite and >= 0")
        total = float(q.sum())
        if abs(total - 1.0) > SPECTRUM_SUM_TOL:
            raise ValidationError(
                f"spectrum-response must sum to 1 within {SPECTRUM_SUM_TOL}; got {total!r}"
            )


def make_spectrum_response(grid: EnergyGrid, weights) -> SpectrumResponse:
    """Normalize raw weights to sum one and wrap them as a SpectrumResponse."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (grid.n_energies,):
        raise ValidationError(
            f"weight vector length {w.size} does not match grid ({grid.n_energies})"
        )
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("spectrum weights must be finite and >= 0")
    total = float(w.sum())
    if total <= 0.0:
        raise ValidationError("spectrum weights are all zero")
    return SpectrumResponse(grid, w / total)


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_float(text: str, path, row: int, col: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValidationError(
            f"{path}: row {row}, column {col}: cannot parse {text!r} as a number"
        ) from None


def load_material_table(path) -> MaterialTable:
    """Load an attenuation CSV (see module docstring for the format)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty attenuation file")
    header = lines[0].split(",")
    if header[0] != "energy_MeV" or len(header) < 2:
        raise ValidationError(
            f"{path}: header must start with 'energy_MeV' followed by material names"
        )
    names = tuple(h.strip() for h in header[1:])
    energies = []
    rows = []
    for r, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise ValidationError(
                f"{path}: row {r}: expected {len(header)} columns, got {len(cells)}"
            )
        energies.append(_parse_float(cells[0], path, r, 1))
        row = []
        for c, cell in enumerate(cells[1:], start=2):
            value = _parse_float(cell, path, r, c)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(
                    f"{path}: row {r}, column {c} (material '{names[c - 2]}'): "
                    f"attenuation {value!r} is negative or non-finite"
                )
            row.append(value)
        rows.append(row)
    grid = EnergyGrid(np.asarray(energies))
    return MaterialTable(grid, names, np.asarray(rows).T)


def save_material_table(table: MaterialTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("energy_MeV," + ",".join(table.names) + "\n")
        for e_idx in range(table.grid.n_energies):
            cells = [repr(float(table.grid.energies[e_idx]))]
            cells += [repr(float(v)) for v in table.mu[:, e_idx]]
            fh.write(",".join(cells) + "\n")


def load_spectrum_response(path, grid: EnergyGrid) -> SpectrumResponse:
    """Load a spectrum CSV against a known grid and renormalize to sum one.

    The file energies must match the grid within relative 1e-9; the
    renormalization factor (raw sum) is reported via logging.
    """
    energies, weights = _read_spectrum_csv(path)
    file_grid = EnergyGrid(energies)
    if not grid.matches(file_grid):
        raise ValidationError(
            f"{path}: spectrum energies do not match the table grid "
            f"within relative {GRID_MATCH_RTOL}"
        )
    total = float(np.sum(weights))
    if total <= 0.0:
        raise ValidationError(f"{path}: spectrum weights are all zero")
    logger.info("loaded spectrum %s: renormalization factor %r", path, total)
    return make_spectrum_response(grid, weights)


def _read_spectrum_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split(",") != ["energy_MeV", "weight"]:
        raise ValidationError(f"{path}: spectrum header must be 'energy_MeV,weight'")
    energies, weights = [], []
    for r, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 2:
            raise ValidationError(f"{path}: row {r}: expected 2 columns")
        energies.append(_parse_float(cells[0], path, r, 1))
        w = _parse_float(cells[1], path, r, 2)
        if not math.isfinite(w) or w < 0:
            raise ValidationError(f"{path}: row {r}: weight must be finite and >= 0")
        weights.append(w)
    return np.asarray(energies), np.asarray(weights)


def save_spectrum_response(spectrum: SpectrumResponse, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("energy_MeV,weight\n")
        for e, w in zip(spectrum.grid.energies, spectrum.product):
            fh.write(f"{float(e)!r},{float(w)!r}\n")


# ---------------------------------------------------------------------------
# Synthetic reference data
#
# The repository does not vendor evaluated nuclear data.  For tests, demos,
# and the desk-scale analog scenes we generate plausible linear attenuation
# coefficients from a three-term model: Klein-Nishina incoherent scattering
# (the dominant process at MeV energies) plus small photoelectric-like and
# pair-production-like terms that spread the high-Z metals apart.

ELECTRON_REST_MEV = 0.510998950
AVOGADRO = 6.02214076e23
_KN_PREFACTOR = 2.0 * math.pi * (2.8179403262e-13) ** 2  # cm^2
_PHOTO_COEFF = 5.0e-9
_PAIR_COEFF = 1.5e-3
_PAIR_SCALE_MEV = 3.0
_PAIR_THRESHOLD_MEV = 2.0 * ELECTRON_REST_MEV

# name -> (density g/cm^3, effective Z, effective A); composites use
# electron-density-matched effective values.
REFERENCE_MATERIALS = {
    "air": (0.001205, 7.64, 15.31),
    "aluminum": (2.699, 13.0, 26.982),
    "beryllium": (1.848, 4.0, 9.012),
    "bismuth": (9.747, 83.0, 208.980),
    "boron": (2.370, 5.0, 10.811),
    "carbon": (2.267, 6.0, 12.011),
    "copper": (8.960, 29.0, 63.546),
    "gold": (19.320, 79.0, 196.967),
    "high explosive": (1.890, 7.22, 14.07),
    "iron": (7.874, 26.0, 55.845),
    "lead": (11.350, 82.0, 207.200),
    "lithium": (0.534, 3.0, 6.941),
    "molybdenum": (10.220, 42.0, 95.950),
    "plutonium": (19.840, 94.0, 244.000),
    "polycarbonate": (1.200, 6.30, 11.96),
    "tantalum": (16.654, 73.0, 180.948),
    "tin": (7.310, 50.0, 118.710),
    "titanium": (4.540, 22.0, 47.867),
    "tungsten": (19.300, 74.0, 183.840),
    "uranium": (19.050, 92.0, 238.029),
}

COBALT60_ENERGIES_MEV = (1.17, 1.33)


def klein_nishina_cm2(energy_mev) -> np.ndarray:
    """Total Klein-Nishina cross-section per electron in cm^2."""
    k = np.asarray(energy_mev, dtype=np.float64) / ELECTRON_REST_MEV
    one_two_k = 1.0 + 2.0 * k
    log_term = np.log(one_two_k)
    bracket = (
        (1.0 + k) / k**2 * (2.0 * (1.0 + k) / one_two_k - log_term / k)
        + log_term / (2.0 * k)
        - (1.0 + 3.0 * k) / one_two_k**2
    )
    return _KN_PREFACTOR * bracket


def synthetic_mu(density: float, z: float, a: float, energies_mev) -> np.ndarray:
    """Plausible linear attenuation (1/cm) for one material on a grid."""
    e = np.asarray(energies_mev, dtype=np.float64)
    compton = AVOGADRO * (z / a) * klein_nishina_cm2(e)
    photo = _PHOTO_COEFF * z**4.5 / a * e**-3
    pair = (
        _PAIR_COEFF
        * z**2
        / a
        * (1.0 - np.exp(-np.maximum(e - _PAIR_THRESHOLD_MEV, 0.0) / _PAIR_SCALE_MEV))
    )
    return density * (compton + photo + pair)


def build_synthetic_table(names=None, energies_mev=COBALT60_ENERGIES_MEV) -> MaterialTable:
    """Deterministic synthetic attenuation table for the reference materials."""
    if names is None:
        names = tuple(sorted(REFERENCE_MATERIALS))
    unknown = [n for n in names if n not in REFERENCE_MATERIALS]
    if unknown:
        raise ValidationError(f"no reference parameters for materials: {unknown}")
    grid = EnergyGrid(np.asarray(energies_mev, dtype=np.float64))
    mu = np.stack(
        [synthetic_mu(*REFERENCE_MATERIALS[n], grid.energies) for n in names]
    )
    return MaterialTable(grid, tuple(names), mu)


def cobalt60_spectrum(grid: EnergyGrid | None = None) -> SpectrumResponse:
    """Two-line cobalt-60 spectrum with equal weights."""
    if grid is None:
        grid = EnergyGrid(np.asarray(COBALT60_ENERGIES_MEV))
    return make_spectrum_response(grid, np.full(grid.n_energies, 1.0))


def bremsstrahlung_spectrum(
    endpoint_mev: float = 7.0, n_bins: int = 101
) -> SpectrumResponse:
    """Kramers-shaped synthetic spectrum on a uniform grid up to the endpoint."""
    grid = EnergyGrid(np.linspace(endpoint_mev / n_bins, endpoint_mev, n_bins))
    weights = (endpoint_mev - grid.energies) / grid.energies
    return make_spectrum_response(grid, weights)


def packaged_data_path(name: str) -> str:
    """Path to one of the synthetic CSV files shipped with the package."""
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", name)
    if not os.path.exists(path):
        raise ValidationError(f"no packaged data file named {name!r}")
    return path
