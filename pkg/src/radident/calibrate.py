"""Detector pixel calibration, radiograph preprocessing, and spectrum fitting.

Pixel calibration models a raw frame as

    raw[r] = t * gain[r] * transmission[r] + t * dark_rate[r] + offset[r]

and recovers (gain * profile, dark_rate, offset) per pixel from dark frames
(transmission 0) and flat frames (transmission = source profile, with flat
scatter taken as zero and the spectrum-response product normalized to one).
Stuck or dead pixels are rejected by an R-squared threshold.

Spectrum calibration adjusts the spectrum-response product to minimize the
fitted loss of a known ground-truth assignment by projected gradient
descent; the problem is ill-posed in general, so descent tracks the best
iterate and stops on sustained failure to improve.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .forward import Radiograph, basis_matrix, fit_gain_scatter
from .geometry import DetectorGrid, PathLengthSet
from .materials import MaterialTable, SpectrumResponse, make_spectrum_response
from .pfm import read_pfm, write_pfm

logger = logging.getLogger(__name__)

DEFAULT_R2_THRESHOLD = 0.95


@dataclass(frozen=True)
class ExposureSet:
    """Raw calibration frames: (image, exposure time in s, 'dark' or 'flat')."""

    frames: tuple

    def __post_init__(self):
        frames = []
        shape = None
        for i, (image, t_s, kind) in enumerate(self.frames):
            img = np.asarray(image, dtype=np.float64)
            if img.ndim != 2:
                raise ValidationError(f"frame {i}: image must be 2-D")
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise ValidationError(
                    f"frame {i}: shape {img.shape} differs from {shape}"
                )
            if not (float(t_s) > 0):
                raise ValidationError(f"frame {i}: exposure time must be > 0")
            if kind not in ("dark", "flat"):
                raise ValidationError(f"frame {i}: kind must be 'dark' or 'flat'")
            frames.append((img, float(t_s), kind))
        if len(frames) < 2:
            raise ValidationError("need at least two calibration frames")
        object.__setattr__(self, "frames", tuple(frames))

    @property
    def shape(self):
        return self.frames[0][0].shape

    def design_matrix(self) -> np.ndarray:
        """One row per frame: dark -> [0, t, 1], flat -> [t, t, 1]."""
        rows = []
        for _, t_s, kind in self.frames:
            rows.append([0.0 if kind == "dark" else t_s, t_s, 1.0])
        return np.asarray(rows)


@dataclass(frozen=True)
class PixelCalibration:
    gain_profile: np.ndarray  # gain * source profile, per pixel
    dark_rate: np.ndarray  # counts per second
    offset: np.ndarray  # counts
    r2: np.ndarray
    valid: np.ndarray
    r2_threshold: float

    def __post_init__(self):
        for name in ("gain_profile", "dark_rate", "offset", "r2", "valid"):
            arr = np.asarray(getattr(self, name))
            arr = arr.astype(bool if name == "valid" else np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return self.gain_profile.shape


def _missing_variation(design: np.ndarray, exposures: ExposureSet) -> str:
    kinds = {kind for _, _, kind in exposures.frames}
    if "flat" not in kinds:
        return "no flat-field frames (gain column is all zero)"
    if "dark" not in kinds and len({t for _, t, _ in exposures.frames}) < 2:
        return "flat frames only, all at one exposure time"
    if "dark" not in kinds:
        return "no dark-field frames (gain and dark rate are indistinguishable)"
    if len({t for _, t, _ in exposures.frames}) < 2:
        return "all exposure times identical"
    return "insufficient variation among frames"


def fit_pixel_calibration(
    exposures: ExposureSet, r2_threshold: float = DEFAULT_R2_THRESHOLD
) -> PixelCalibration:
    """Per-pixel least-squares fit of gain*profile, dark rate, and offset.

    The design matrix is shared by all pixels, so the fit is a single pseudo
    inverse applied to the stacked frames.  Pixels with R-squared below the
    threshold or a non-positive fitted gain are marked invalid.
    """
    design = exposures.design_matrix()
    if np.linalg.matrix_rank(design) < 3:
        raise NumericalError(
            "calibration design is rank-deficient: "
            + _missing_variation(design, exposures)
        )
    shape = exposures.shape
    stack = np.stack([img.ravel() for img, _, _ in exposures.frames])
    params = np.linalg.pinv(design) @ stack  # (3, n_pixels)
    fitted = design @ params
    ss_res = np.sum((stack - fitted) ** 2, axis=0)
    ss_tot = np.sum((stack - stack.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, 0.0)
    gain = params[0].reshape(shape)
    valid = (r2.reshape(shape) >= r2_threshold) & (gain > 0)
    return PixelCalibration(
        gain_profile=gain,
        dark_rate=params[1].reshape(shape),
        offset=params[2].reshape(shape),
        r2=r2.reshape(shape),
        valid=valid,
        r2_threshold=float(r2_threshold),
    )


def preprocess(raw: np.ndarray, t_s: float, cal: PixelCalibration) -> Radiograph:
    """Undo detector gain and pedestal and normalize by the source profile:
    prep = (raw - t*dark_rate - offset) / (t * gain_profile)."""
    if not (t_s > 0):
        raise ValidationError("exposure time must be > 0")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != cal.shape:
        raise ValidationError(
            f"raw shape {raw.shape} does not match calibration {cal.shape}"
        )
    if not cal.valid.any():
        raise NumericalError("no valid pixels in calibration")
    values = np.zeros_like(raw)
    v = cal.valid
    values[v] = (raw[v] - t_s * cal.dark_rate[v] - cal.offset[v]) / (
        t_s * cal.gain_profile[v]
    )
    return Radiograph(values, cal.valid)


# ---------------------------------------------------------------------------
# Pixel-calibration persistence: a directory of PFM images plus a manifest.

_CAL_IMAGES = ("gain_profile", "dark_rate", "offset", "r2")


def save_pixel_calibration(cal: PixelCalibration, directory, provenance=None):
    os.makedirs(directory, exist_ok=True)
    for name in _CAL_IMAGES:
        write_pfm(os.path.join(directory, f"{name}.pfm"), getattr(cal, name))
    write_pfm(os.path.join(directory, "valid.pfm"), cal.valid.astype(np.float64))
    manifest = {
        "r2_threshold": cal.r2_threshold,
        "n_valid": int(np.count_nonzero(cal.valid)),
        "provenance": provenance or {},
    }
    with open(os.path.join(directory, "calibration.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pixel_calibration(directory) -> PixelCalibration:
    with open(os.path.join(directory, "calibration.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    images = {
        name: read_pfm(os.path.join(directory, f"{name}.pfm")) for name in _CAL_IMAGES
    }
    valid = read_pfm(os.path.join(directory, "valid.pfm")) > 0.5
    return PixelCalibration(
        gain_profile=images["gain_profile"],
        dark_rate=images["dark_rate"],
        offset=images["offset"],
        r2=images["r2"],
        valid=valid,
        r2_threshold=float(manifest["r2_threshold"]),
    )


# ---------------------------------------------------------------------------
# Spectrum-response calibration


@dataclass
class SpectrumCalibration:
    """Outcome of spectrum-response descent; ``spectrum`` is the best iterate."""

    spectrum: SpectrumResponse
    loss_initial: float
    loss_final: float
    accepted_losses: list
    iterations: int
    diverged: bool
    step_history: list


def _attenuation_columns(paths, table, truth, valid_flat):
    mu = np.stack([table.mu_for(name) for name in truth.entries])
    ell = np.stack([p.ravel()[valid_flat] for p in paths.paths])
    return np.exp(-(mu.T @ ell))  # (Ne, n_valid): d = q @ columns


def spectrum_objective_and_gradient(
    weights: np.ndarray,
    radiograph: Radiograph,
    paths: PathLengthSet,
    table: MaterialTable,
    truth,
    order: int,
):
    """J(truth) as a function of the spectrum weights, with its exact gradient.

    The direct signal is linear in the weights, and the inner gain/scatter
    problem is a least-squares minimum, so by the envelope property the
    gradient is -2 * gain * (columns @ residual) with the inner fit held at
    its optimum.
    """
    if not truth.is_full:
        raise ValidationError("spectrum calibration needs a full ground-truth assignment")
    idx = np.flatnonzero(radiograph.valid.ravel())
    columns = _attenuation_columns(paths, table, truth, idx)
    shape = radiograph.shape
    d_img = np.zeros(shape)
    d_img.ravel()[idx] = np.asarray(weights) @ columns
    fit = fit_gain_scatter(radiograph, d_img, order)
    # Rebuild the fitted residual on the valid pixels.
    grid = DetectorGrid(shape[0], shape[1], 1.0)
    model = fit.alpha * d_img.ravel()[idx] + basis_matrix(order, grid)[idx] @ fit.theta
    residual = radiograph.values.ravel()[idx] - model
    grad = -2.0 * fit.alpha * (columns @ residual)
    return fit.sse, grad


def _project_simplex(weights: np.ndarray) -> np.ndarray:
    clipped = np.maximum(weights, 0.0)
    total = clipped.sum()
    if total <= 0:
        raise NumericalError("spectrum descent drove all weights to zero")
    return clipped / total


def calibrate_spectrum(
    radiograph: Radiograph,
    paths: PathLengthSet,
    table: MaterialTable,
    truth,
    q0: SpectrumResponse,
    order: int = 2,
    step_size: float = 1e-3,
    iterations: int = 200,
    patience: int = 20,
) -> SpectrumCalibration:
    """Fit the spectrum-response product to a known-truth radiograph.

    Projected gradient descent on the fitted loss of the ground-truth
    assignment: step, clip negatives, renormalize to sum one (the gain
    absorbs pure rescalings, so renormalization never changes the loss).
    Accepted iterates strictly improve; after `patience` consecutive
    failures the best iterate is returned with the diverged flag set.
    """
    if not table.grid.matches(q0.grid):
        raise ValidationError("initial spectrum grid does not match the table grid")
    weights = np.asarray(q0.product, dtype=np.float64).copy()
    j_best, _ = spectrum_objective_and_gradient(
        weights, radiograph, paths, table, truth, order
    )
    best = weights.copy()
    accepted = [j_best]
    steps = [step_size]
    fails = 0
    diverged = False
    step = step_size
    it = 0
    for it in range(1, iterations + 1):
        _, grad = spectrum_objective_and_gradient(
            best, radiograph, paths, table, truth, order
        )
        if not np.any(grad):
            break  # stationary (e.g. perfect fit): nothing to improve
        candidate = _project_simplex(best - step * grad)
        j_new, _ = spectrum_objective_and_gradient(
            candidate, radiograph, paths, table, truth, order
        )
        tol = 1e-12 * (1.0 + j_best)
        if j_new < j_best - tol:
            best = candidate
            j_best = j_new
            accepted.append(j_best)
            fails = 0
        elif j_new <= j_best + tol:
            break  # stagnant within roundoff: converged
        else:
            fails += 1
            step *= 0.5
            steps.append(step)
            if fails >= patience:
                diverged = True
                logger.warning(
                    "spectrum calibration stopped after %d non-improving steps; "
                    "returning best iterate (loss %.6g)", fails, j_best
                )
                break
    return SpectrumCalibration(
        spectrum=make_spectrum_response(table.grid, best),
        loss_initial=float(accepted[0]),
        loss_final=float(j_best),
        accepted_losses=[float(j) for j in accepted],
        iterations=it,
        diverged=diverged,
        step_history=[float(s) for s in steps],
    )
