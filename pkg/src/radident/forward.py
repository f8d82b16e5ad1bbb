"""Polyenergetic direct signal, polynomial scatter basis, and the fitted loss.

The loss for a full material assignment x is

    J(x) = min over (gain, theta) of sum over fitted pixels of
           (t - gain * d(x) - s(theta))^2

where d is the Beer-Lambert direct signal summed over the spectrum and s is
a 2-D polynomial field.  The inner problem is linear least squares with at
most 1 + (P+1)(P+2)/2 unknowns and is solved by orthogonal factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .geometry import DetectorGrid, PathLengthSet
from .materials import MaterialTable, SpectrumResponse

EMPTY = None  # unassigned marker in partial assignments


@dataclass(frozen=True)
class Radiograph:
    """Normalized transmission image with a validity mask."""

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).copy()
        if values.ndim != 2:
            raise ValidationError("radiograph values must be a 2-D image")
        if self.valid is None:
            valid = np.ones(values.shape, dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool).copy()
        if valid.shape != values.shape:
            raise ValidationError(
                f"valid mask shape {valid.shape} does not match values {values.shape}"
            )
        if not valid.any():
            raise ValidationError("radiograph has no valid pixels")
        if not np.all(np.isfinite(values[valid])):
            raise ValidationError("radiograph has non-finite values at valid pixels")
        values.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.values.shape

    def with_crop(self, u0: int, v0: int, u1: int, v1: int) -> "Radiograph":
        """Restrict the valid mask to a half-open pixel box."""
        height, width = self.shape
        if not (0 <= u0 < u1 <= width and 0 <= v0 < v1 <= height):
            raise ValidationError(f"crop box ({u0},{v0},{u1},{v1}) not inside image")
        keep = np.zeros(self.shape, dtype=bool)
        keep[v0:v1, u0:u1] = True
        return Radiograph(self.values, self.valid & keep)


@dataclass(frozen=True)
class Assignment:
    """Material choice per object; None marks a not-yet-assigned slot."""

    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if len(self.entries) < 1:
            raise ValidationError("assignment must cover at least one object")

    @property
    def n_objects(self) -> int:
        return len(self.entries)

    @property
    def is_full(self) -> bool:
        return EMPTY not in self.entries

    def first_empty(self) -> int:
        try:
            return self.entries.index(EMPTY)
        except ValueError:
            raise ValidationError("assignment is already full") from None

    def __str__(self):
        return "[" + ", ".join("-" if e is EMPTY else str(e) for e in self.entries) + "]"


@dataclass(frozen=True)
class FitResult:
    """Optimum of the inner least-squares problem for one direct image."""

    alpha: float
    theta: np.ndarray  # scatter coefficients in scatter_exponents order
    exponents: tuple  # ((m, n), ...) matching theta
    sse: float
    rmse: float
    n_pixels: int
    degenerate: bool = False


def scatter_exponents(order: int):
    """Exponent pairs (m, n) with m + n <= order, by total degree then by m
    descending, so order 2 reads 1, u, v, u^2, uv, v^2."""
    if order < 0:
        raise ValidationError("polynomial order must be >= 0")
    pairs = []
    for degree in range(order + 1):
        for m in range(degree, -1, -1):
            pairs.append((m, degree - m))
    return tuple(pairs)


def _normalized_coords(grid: DetectorGrid):
    # Pixel indices mapped affinely to [-1, 1]^2 to keep high powers
    # well-conditioned; an affine change of coordinates does not alter the
    # polynomial model class.
    u = np.linspace(-1.0, 1.0, grid.width_px) if grid.width_px > 1 else np.zeros(1)
    v = np.linspace(-1.0, 1.0, grid.height_px) if grid.height_px > 1 else np.zeros(1)
    return np.meshgrid(u, v)


def scatter_basis(order: int, grid: DetectorGrid):
    """List of (V, U) basis images u^m v^n in scatter_exponents order."""
    uu, vv = _normalized_coords(grid)
    return [uu**m * vv**n for m, n in scatter_exponents(order)]


def basis_matrix(order: int, grid: DetectorGrid) -> np.ndarray:
    """Flattened basis images stacked as columns, shape (V*U, n_basis)."""
    return np.stack([b.ravel() for b in scatter_basis(order, grid)], axis=1)


def direct(
    assignment: Assignment,
    paths: PathLengthSet,
    table: MaterialTable,
    spectrum: SpectrumResponse,
) -> np.ndarray:
    """Beer-Lambert direct signal image for a full assignment.

    d[r] = sum_e q[e] * exp(-sum_n mu_{x[n]}[e] * l_n[r]); with a normalized
    spectrum every value lies in (0, 1].
    """
    if not assignment.is_full:
        raise ValidationError("direct signal requires a full assignment")
    if assignment.n_objects != paths.n_objects:
        raise ValidationError(
            f"assignment covers {assignment.n_objects} objects but the scene has "
            f"{paths.n_objects}"
        )
    if not table.grid.matches(spectrum.grid):
        raise ValidationError("material table and spectrum use different energy grids")
    shape = paths.shape
    ell = np.stack([p.ravel() for p in paths.paths])  # (K, n)
    mu = np.stack([table.mu_for(name) for name in assignment.entries])  # (K, Ne)
    optical_depth = mu.T @ ell  # (Ne, n)
    d = spectrum.product @ np.exp(-optical_depth)
    return d.reshape(shape)


def fit_gain_scatter(
    radiograph: Radiograph,
    d: np.ndarray,
    order: int,
    extra_mask: np.ndarray | None = None,
) -> FitResult:
    """Jointly fit the gain and the polynomial scatter field.

    Fitted pixels are valid & extra_mask.  The design matrix is
    [d, basis...]; the solve uses an orthogonal (singular value)
    factorization and returns the minimum-norm solution when the design is
    rank-deficient (flagged degenerate, e.g. a constant d duplicating the
    constant basis column).  The fit is also flagged degenerate when it has
    at most one residual degree of freedom.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape != radiograph.shape:
        raise ValidationError(
            f"direct image shape {d.shape} does not match radiograph {radiograph.shape}"
        )
    mask = radiograph.valid
    if extra_mask is not None:
        extra_mask = np.asarray(extra_mask, dtype=bool)
        if extra_mask.shape != radiograph.shape:
            raise ValidationError("extra mask shape does not match radiograph")
        mask = mask & extra_mask
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        raise ValidationError("no pixels to fit: valid & extra_mask is empty")

    grid = DetectorGrid(radiograph.shape[0], radiograph.shape[1], 1.0)
    columns = np.concatenate(
        [d.ravel()[idx, None], basis_matrix(order, grid)[idx]], axis=1
    )
    target = radiograph.values.ravel()[idx]
    return _solve_fit(target, columns, scatter_exponents(order))


_RANK_RTOL = 1e-10


def _solve_fit(target: np.ndarray, columns: np.ndarray, exponents) -> FitResult:
    # Truncated SVD with the residual taken as the projection complement of
    # the kept left singular vectors.  Collinear designs (a constant direct
    # image duplicating the constant basis column is the common case) then
    # give the minimum-norm solution without amplifying roundoff through
    # near-zero singular values.
    n_pixels, n_unknowns = columns.shape
    if n_pixels < n_unknowns:
        raise NumericalError(
            f"{n_pixels} fitted pixels cannot determine {n_unknowns} unknowns"
        )
    u_mat, sing, vt = np.linalg.svd(columns, full_matrices=False)
    rank = int(np.count_nonzero(sing > sing[0] * _RANK_RTOL)) if sing[0] > 0 else 0
    proj = u_mat[:, :rank].T @ target
    residual = target - u_mat[:, :rank] @ proj
    sse = float(residual @ residual)
    coef = vt[:rank].T @ (proj / sing[:rank])
    degenerate = (
        rank < n_unknowns
        or sing[-1] <= sing[0] * 1e-7
        or n_pixels <= n_unknowns + 1
    )
    return FitResult(
        alpha=float(coef[0]),
        theta=coef[1:].copy(),
        exponents=tuple(exponents),
        sse=sse,
        rmse=float(np.sqrt(sse / n_pixels)),
        n_pixels=int(n_pixels),
        degenerate=bool(degenerate),
    )


def loss(
    assignment: Assignment,
    radiograph: Radiograph,
    paths: PathLengthSet,
    table: MaterialTable,
    spectrum: SpectrumResponse,
    order: int,
    extra_mask: np.ndarray | None = None,
) -> FitResult:
    """J(x): fit result for the direct signal of a full assignment."""
    d = direct(assignment, paths, table, spectrum)
    return fit_gain_scatter(radiograph, d, order, extra_mask)
