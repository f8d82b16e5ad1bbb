"""Synthetic radiographs with known ground truth, plus desk-scale analog
scenes and the thickness / polynomial-order sweep helpers.

Generated data follows the same decomposition the solver fits: a direct
Beer-Lambert term, an additive nonnegative scatter field (polynomial, or a
smooth Gaussian bump for out-of-model tests), and optional per-pixel
Gaussian noise given as a fraction of the open-beam level.  A detector
block additionally synthesizes raw dark/flat/scene frames so the pixel
calibration pipeline can be exercised end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .forward import Assignment, Radiograph, direct, scatter_basis, scatter_exponents
from .geometry import (
    PARALLEL,
    DetectorGrid,
    PathLengthSet,
    Scene,
    SphericalShell,
    slab_from_box,
    trace_scene,
)
from .materials import (
    MaterialTable,
    SpectrumResponse,
    build_synthetic_table,
    cobalt60_spectrum,
)

ANALOG_NAMES = (
    "al-cu-shells",
    "al-cu-cu-shells",
    "eight-cubes",
    "thickness-sweep",
    "order-sweep",
)

INCH_CM = 2.54


@dataclass(frozen=True)
class PolynomialScatter:
    """In-model scatter truth: coefficients over the fitted basis."""

    order: int
    theta: tuple  # ((m, n, value), ...)

    def render(self, grid: DetectorGrid) -> np.ndarray:
        images = scatter_basis(self.order, grid)
        exponents = scatter_exponents(self.order)
        out = np.zeros(grid.shape)
        coeff = {(m, n): v for m, n, v in self.theta}
        for (m, n), img in zip(exponents, images):
            out += coeff.get((m, n), 0.0) * img
        return out


@dataclass(frozen=True)
class BumpScatter:
    """Out-of-model scatter truth: a smooth Gaussian bump, never exactly
    representable by a finite polynomial order."""

    amplitude: float
    width: float  # in normalized [-1, 1] coordinates
    center_uv: tuple = (0.0, 0.0)

    def render(self, grid: DetectorGrid) -> np.ndarray:
        u = np.linspace(-1, 1, grid.width_px) if grid.width_px > 1 else np.zeros(1)
        v = np.linspace(-1, 1, grid.height_px) if grid.height_px > 1 else np.zeros(1)
        uu, vv = np.meshgrid(u, v)
        cu, cv = self.center_uv
        return self.amplitude * np.exp(
            -((uu - cu) ** 2 + (vv - cv) ** 2) / (2.0 * self.width**2)
        )


@dataclass(frozen=True)
class DetectorBlock:
    """Parameters for raw-frame synthesis (uniform or vignetted gain)."""

    gain_amplitude: float = 1000.0
    vignette: float = 0.2  # relative falloff of gain*profile toward corners
    dark_rate: float = 2.0
    offset: float = 100.0
    dark_times_s: tuple = (1.0, 10.0, 100.0)
    flat_times_s: tuple = (1.0, 10.0, 100.0)
    scene_time_s: float = 100.0
    noise_sigma_frac: float = 0.0  # of the flat level at scene_time

    def gain_profile(self, grid: DetectorGrid) -> np.ndarray:
        u = np.linspace(-1, 1, grid.width_px) if grid.width_px > 1 else np.zeros(1)
        v = np.linspace(-1, 1, grid.height_px) if grid.height_px > 1 else np.zeros(1)
        uu, vv = np.meshgrid(u, v)
        return self.gain_amplitude * (1.0 - self.vignette * (uu**2 + vv**2) / 2.0)


@dataclass(frozen=True)
class SimSpec:
    scene: Scene
    truth: Assignment
    spectrum: SpectrumResponse
    scatter: PolynomialScatter | BumpScatter | None
    noise_sigma: float = 0.0
    noise_model: str = "gaussian"  # "poisson" reserved, needs a counts scale
    beam: str = PARALLEL
    seed: int = 0
    detector: DetectorBlock | None = None

    def __post_init__(self):
        if not self.truth.is_full:
            raise ValidationError("simulation truth must be a full assignment")
        if self.truth.n_objects != self.scene.n_objects:
            raise ValidationError("truth length does not match scene object count")
        if self.noise_sigma < 0:
            raise ValidationError("noise sigma must be >= 0")
        if self.noise_model not in ("gaussian", "poisson"):
            raise ValidationError("noise_model must be 'gaussian' or 'poisson'")


@dataclass(frozen=True)
class SimulatedRadiograph:
    radiograph: Radiograph
    direct: np.ndarray
    scatter: np.ndarray
    paths: PathLengthSet


def simulate_radiograph(spec: SimSpec, table: MaterialTable) -> SimulatedRadiograph:
    """Generate t = direct(truth) + scatter + noise with ground truth attached."""
    paths = trace_scene(spec.scene, spec.beam)
    d = direct(spec.truth, paths, table, spec.spectrum)
    if spec.scatter is None:
        s = np.zeros(spec.scene.grid.shape)
    else:
        s = spec.scatter.render(spec.scene.grid)
        if np.any(s < 0):
            raise ValidationError("scatter truth must be nonnegative everywhere")
    t = d + s
    if spec.noise_sigma > 0:
        if spec.noise_model == "poisson":
            raise NotImplementedError(
                "poisson noise needs a photon-counts scale; only the gaussian "
                "model (sigma as a fraction of the open-beam level) is available"
            )
        rng = np.random.default_rng(spec.seed)
        t = t + spec.noise_sigma * rng.standard_normal(t.shape)
    return SimulatedRadiograph(Radiograph(t), d, s, paths)


def synthesize_frames(spec: SimSpec, table: MaterialTable):
    """Raw dark/flat frames plus the raw scene frame, per the detector block.

    Returns (frames, scene_raw, sim) where frames is a list of
    (image, exposure_time_s, kind) and sim is the underlying noiseless
    SimulatedRadiograph whose transmission the raw scene frame encodes.
    """
    if spec.detector is None:
        raise ValidationError("simulation spec has no detector block")
    det = spec.detector
    grid = spec.scene.grid
    gain = det.gain_profile(grid)
    rng = np.random.default_rng(spec.seed)
    noise_abs = det.noise_sigma_frac * float(
        np.mean(det.scene_time_s * gain + det.scene_time_s * det.dark_rate + det.offset)
    )

    def noisy(image):
        if noise_abs > 0:
            return image + noise_abs * rng.standard_normal(image.shape)
        return image

    frames = []
    for t_s in det.dark_times_s:
        frames.append((noisy(t_s * det.dark_rate + det.offset * np.ones(grid.shape)),
                       t_s, "dark"))
    for t_s in det.flat_times_s:
        frames.append((noisy(t_s * gain + t_s * det.dark_rate + det.offset), t_s, "flat"))

    noiseless = SimSpec(
        scene=spec.scene, truth=spec.truth, spectrum=spec.spectrum,
        scatter=spec.scatter, noise_sigma=0.0, beam=spec.beam, seed=spec.seed,
    )
    sim = simulate_radiograph(noiseless, table)
    transmission = sim.radiograph.values
    t_s = det.scene_time_s
    scene_raw = noisy(t_s * gain * transmission + t_s * det.dark_rate + det.offset)
    return frames, scene_raw, sim


# ---------------------------------------------------------------------------
# Desk-scale analogs of the validation scenes

# Mild order-2 field, strictly positive on the unit square.
_DEFAULT_SCATTER = PolynomialScatter(
    order=2,
    theta=(
        (0, 0, 0.08),
        (1, 0, 0.010),
        (0, 1, -0.012),
        (2, 0, 0.015),
        (1, 1, 0.008),
        (0, 2, 0.020),
    ),
)


def default_table() -> MaterialTable:
    """Synthetic 20-material table on the two cobalt-60 lines."""
    return build_synthetic_table()


def _shells_scene(grid_px: int, shells) -> Scene:
    # Field of view sized so the outer shell fills most of the image.
    outer = max(s[2] for s in shells)
    pitch = 2.6 * outer / grid_px
    grid = DetectorGrid(grid_px, grid_px, pitch)
    objects = tuple(
        SphericalShell(center_cm=center, inner_radius_cm=r_in, outer_radius_cm=r_out)
        for center, r_in, r_out in shells
    )
    return Scene(grid, source_to_detector_cm=100.0, objects=objects)


def make_validation_analog(
    name: str,
    noise_sigma: float = 0.002,
    seed: int = 0,
    thickness_cm: float | None = None,
) -> SimSpec:
    """Desk-scale analog of one of the validation scenes.

    Geometry is proportional to the hardware scenes: two nested shells
    (aluminum over copper), the same plus a small off-axis copper shell,
    eight disjoint one-inch cubes, a five-material concentric ball-and-shell
    phantom with equal thicknesses, and the shells scene with an out-of-model
    scatter bump for polynomial-order sweeps.
    """
    base = name
    if name.startswith("thickness-sweep(") and name.endswith(")"):
        base = "thickness-sweep"
        thickness_cm = float(name[len("thickness-sweep(") : -1])
    if base not in ANALOG_NAMES:
        raise ValidationError(f"unknown analog scene {name!r}; expected one of {ANALOG_NAMES}")

    spectrum = cobalt60_spectrum()
    if base in ("al-cu-shells", "al-cu-cu-shells", "order-sweep"):
        # Aluminum shell: 2.5 in outer radius, half-inch wall; copper shell
        # nested directly inside with a quarter-inch wall.
        al = ((0.0, 0.0, 17.5), 2.0 * INCH_CM, 2.5 * INCH_CM)
        cu = ((0.0, 0.0, 17.5), 1.75 * INCH_CM, 2.0 * INCH_CM)
        shells = [al, cu]
        truth = ["aluminum", "copper"]
        if base == "al-cu-cu-shells":
            shells.append(((1.2, 0.8, 17.5), 1.5, 2.5))
            truth.append("copper")
        scene = _shells_scene(128, shells)
        scatter = _DEFAULT_SCATTER
        if base == "order-sweep":
            scatter = BumpScatter(amplitude=0.12, width=0.55, center_uv=(0.15, -0.1))
        return SimSpec(
            scene=scene,
            truth=Assignment(tuple(truth)),
            spectrum=spectrum,
            scatter=scatter,
            noise_sigma=noise_sigma,
            seed=seed,
        )

    if base == "eight-cubes":
        grid_px = 256
        pitch = 20.5 / grid_px
        grid = DetectorGrid(grid_px, grid_px, pitch)
        half = int(round(INCH_CM / (2 * pitch)))
        centers_u = [-7.5, -2.5, 2.5, 7.5]
        centers_v = [-3.5, 3.5]
        slabs = []
        for cv in centers_v:
            for cu in centers_u:
                u_px = int(round(cu / pitch + grid.axis_u_px))
                v_px = int(round(cv / pitch + grid.axis_v_px))
                slabs.append(
                    slab_from_box(
                        grid, u_px - half, v_px - half, u_px + half, v_px + half,
                        thickness_cm=INCH_CM,
                    )
                )
        scene = Scene(grid, source_to_detector_cm=100.0, objects=tuple(slabs))
        truth = Assignment(
            ("copper", "bismuth", "iron", "tantalum",
             "titanium", "tungsten", "molybdenum", "aluminum")
        )
        return SimSpec(
            scene=scene, truth=truth, spectrum=spectrum,
            scatter=_DEFAULT_SCATTER, noise_sigma=noise_sigma, seed=seed,
        )

    # thickness-sweep: lithium ball inside equal-thickness shells, listed
    # outermost first so early branching determines the most pixels.
    if thickness_cm is None:
        raise ValidationError("thickness-sweep analog needs thickness_cm")
    t = float(thickness_cm)
    if not (t > 0):
        raise ValidationError("thickness must be > 0")
    center = (0.0, 0.0, 20.0 * t)
    shells = [
        (center, 4 * t, 5 * t),  # plutonium
        (center, 3 * t, 4 * t),  # iron
        (center, 2 * t, 3 * t),  # boron
        (center, 1 * t, 2 * t),  # polycarbonate
        (center, 0.0, 1 * t),  # lithium ball
    ]
    grid_px = 128
    pitch = 12.0 * t / grid_px
    grid = DetectorGrid(grid_px, grid_px, pitch)
    objects = tuple(
        SphericalShell(center_cm=c, inner_radius_cm=r_in, outer_radius_cm=r_out)
        for c, r_in, r_out in shells
    )
    scene = Scene(grid, source_to_detector_cm=100.0 * max(t, 1.0), objects=objects)
    truth = Assignment(("plutonium", "iron", "boron", "polycarbonate", "lithium"))
    return SimSpec(
        scene=scene, truth=truth, spectrum=spectrum,
        scatter=_DEFAULT_SCATTER, noise_sigma=noise_sigma, seed=seed,
    )


def contrast_table(
    materials, lengths_cm, spectrum: SpectrumResponse, table: MaterialTable
) -> np.ndarray:
    """Expected direct signal per (material, path length): the confusability
    chart; the smallest vertical gap between two rows bounds the tolerable
    measurement noise, the smallest horizontal gap the tolerable path-length
    error."""
    lengths = np.asarray(lengths_cm, dtype=np.float64)
    if np.any(lengths < 0):
        raise ValidationError("path lengths must be >= 0")
    out = np.empty((len(materials), lengths.size))
    for i, name in enumerate(materials):
        mu = table.mu_for(name)
        out[i] = spectrum.product @ np.exp(-np.outer(mu, lengths))
    return out


# ---------------------------------------------------------------------------
# Sweep drivers (rank of the generating truth under varying conditions)


def _rank_of_truth(result, truth: Assignment) -> int | None:
    for rank, entry in enumerate(result.ranked, start=1):
        if entry.assignment.entries == truth.entries:
            return rank
    return None


def sweep_polynomial_order(
    spec: SimSpec,
    table: MaterialTable,
    orders=range(0, 11),
    n_top: int = 20,
    n_incorrect: int = 10,
):
    """Re-run identification at each scatter order; one row per order with
    the truth's rank and error plus the best incorrect errors."""
    from .solver import SearchConfig, solve_topN

    sim = simulate_radiograph(spec, table)
    rows = []
    for order in orders:
        config = SearchConfig(n_top=max(n_top, n_incorrect + 1), scatter_order=order)
        result = solve_topN(sim.radiograph, sim.paths, table, spec.spectrum, config)
        rank = _rank_of_truth(result, spec.truth)
        truth_rmse = None
        if rank is not None:
            truth_rmse = result.ranked[rank - 1].fit.rmse
        incorrect = [
            e.fit.rmse
            for e in result.ranked
            if e.assignment.entries != spec.truth.entries
        ][:n_incorrect]
        rows.append(
            {
                "order": int(order),
                "truth_rank": rank,
                "truth_rmse": truth_rmse,
                "incorrect_rmse": incorrect,
            }
        )
    return rows


def sweep_thickness(
    thicknesses_cm,
    table: MaterialTable,
    seeds=range(10),
    noise_sigma: float = 0.002,
    n_top: int = 40,
    grid_px: int = 64,
):
    """Rank of the truth for the concentric phantom at each shell thickness,
    repeated over seeds.  Ranks beyond the top list are censored to
    n_top + 1."""
    from .solver import SearchConfig, solve_topN

    rows = []
    for thickness in thicknesses_cm:
        for seed in seeds:
            spec = make_validation_analog(
                "thickness-sweep", noise_sigma=noise_sigma, seed=seed,
                thickness_cm=thickness,
            )
            if grid_px != spec.scene.grid.height_px:
                spec = _rescale_grid(spec, grid_px)
            sim = simulate_radiograph(spec, table)
            config = SearchConfig(n_top=n_top, scatter_order=2)
            result = solve_topN(sim.radiograph, sim.paths, table, spec.spectrum, config)
            rank = _rank_of_truth(result, spec.truth)
            rows.append(
                {
                    "thickness_cm": float(thickness),
                    "seed": int(seed),
                    "truth_rank": rank if rank is not None else n_top + 1,
                    "censored": rank is None,
                }
            )
    return rows


def _rescale_grid(spec: SimSpec, grid_px: int) -> SimSpec:
    old = spec.scene.grid
    pitch = old.pitch_cm * old.height_px / grid_px
    grid = DetectorGrid(grid_px, grid_px, pitch)
    scene = Scene(grid, spec.scene.source_to_detector_cm, spec.scene.objects)
    return SimSpec(
        scene=scene, truth=spec.truth, spectrum=spec.spectrum,
        scatter=spec.scatter, noise_sigma=spec.noise_sigma,
        noise_model=spec.noise_model, beam=spec.beam, seed=spec.seed,
        detector=spec.detector,
    )


# ---------------------------------------------------------------------------
# SimSpec JSON


def sim_spec_to_json(spec: SimSpec) -> dict:
    from .geometry import scene_to_json

    doc = {
        "scene": scene_to_json(spec.scene, spec.beam),
        "truth": list(spec.truth.entries),
        "spectrum": {
            "energies_MeV": [float(e) for e in spec.spectrum.grid.energies],
            "weights": [float(w) for w in spec.spectrum.product],
        },
        "noise_sigma": spec.noise_sigma,
        "noise_model": spec.noise_model,
        "seed": spec.seed,
    }
    if isinstance(spec.scatter, PolynomialScatter):
        doc["scatter"] = {
            "kind": "polynomial",
            "order": spec.scatter.order,
            "theta": [[m, n, v] for m, n, v in spec.scatter.theta],
        }
    elif isinstance(spec.scatter, BumpScatter):
        doc["scatter"] = {
            "kind": "bump",
            "amplitude": spec.scatter.amplitude,
            "width": spec.scatter.width,
            "center_uv": list(spec.scatter.center_uv),
        }
    else:
        doc["scatter"] = None
    if spec.detector is not None:
        det = spec.detector
        doc["detector"] = {
            "gain_amplitude": det.gain_amplitude,
            "vignette": det.vignette,
            "dark_rate": det.dark_rate,
            "offset": det.offset,
            "dark_times_s": list(det.dark_times_s),
            "flat_times_s": list(det.flat_times_s),
            "scene_time_s": det.scene_time_s,
            "noise_sigma_frac": det.noise_sigma_frac,
        }
    return doc


def sim_spec_from_json(doc: dict) -> SimSpec:
    """Parse a simulation spec; an {"analog": name, ...} document is expanded
    through make_validation_analog first."""
    from .geometry import scene_from_json
    from .materials import EnergyGrid, make_spectrum_response

    if "analog" in doc:
        spec = make_validation_analog(
            doc["analog"],
            noise_sigma=float(doc.get("noise_sigma", 0.002)),
            seed=int(doc.get("seed", 0)),
            thickness_cm=doc.get("thickness_cm"),
        )
        if "detector" in doc and doc["detector"] is not None:
            spec = SimSpec(
                scene=spec.scene, truth=spec.truth, spectrum=spec.spectrum,
                scatter=spec.scatter, noise_sigma=spec.noise_sigma,
                beam=spec.beam, seed=spec.seed,
                detector=_detector_from_json(doc["detector"]),
            )
        return spec
    try:
        scene, beam = scene_from_json(doc["scene"])
        grid = EnergyGrid(np.asarray(doc["spectrum"]["energies_MeV"]))
        spectrum = make_spectrum_response(grid, np.asarray(doc["spectrum"]["weights"]))
        scatter_doc = doc.get("scatter")
        if scatter_doc is None:
            scatter = None
        elif scatter_doc["kind"] == "polynomial":
            scatter = PolynomialScatter(
                order=int(scatter_doc["order"]),
                theta=tuple((int(m), int(n), float(v)) for m, n, v in scatter_doc["theta"]),
            )
        elif scatter_doc["kind"] == "bump":
            scatter = BumpScatter(
                amplitude=float(scatter_doc["amplitude"]),
                width=float(scatter_doc["width"]),
                center_uv=tuple(scatter_doc.get("center_uv", (0.0, 0.0))),
            )
        else:
            raise ValidationError(f"unknown scatter kind {scatter_doc['kind']!r}")
        detector = None
        if doc.get("detector") is not None:
            detector = _detector_from_json(doc["detector"])
        return SimSpec(
            scene=scene,
            truth=Assignment(tuple(doc["truth"])),
            spectrum=spectrum,
            scatter=scatter,
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            noise_model=doc.get("noise_model", "gaussian"),
            beam=beam,
            seed=int(doc.get("seed", 0)),
            detector=detector,
        )
    except KeyError as exc:
        raise ValidationError(f"simulation spec is missing field {exc}") from exc


def _detector_from_json(doc: dict) -> DetectorBlock:
    return DetectorBlock(
        gain_amplitude=float(doc.get("gain_amplitude", 1000.0)),
        vignette=float(doc.get("vignette", 0.2)),
        dark_rate=float(doc.get("dark_rate", 2.0)),
        offset=float(doc.get("offset", 100.0)),
        dark_times_s=tuple(doc.get("dark_times_s", (1.0, 10.0, 100.0))),
        flat_times_s=tuple(doc.get("flat_times_s", (1.0, 10.0, 100.0))),
        scene_time_s=float(doc.get("scene_time_s", 100.0)),
        noise_sigma_frac=float(doc.get("noise_sigma_frac", 0.0)),
    )
