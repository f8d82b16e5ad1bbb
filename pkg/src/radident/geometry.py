"""Analytic path-length maps for shells and slabs on a detector grid.

Coordinate conventions: the detector lies in the z = 0 plane; pixel (u, v)
sits at ((u - u0) * pitch, (v - v0) * pitch, 0) with u increasing to the
right and v downward; the source sits on the optical axis at
(0, 0, source_to_detector).  Object positions are given in cm with z
measured from the detector toward the source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

PARALLEL = "parallel"
CONEBEAM = "conebeam"
BEAMS = (PARALLEL, CONEBEAM)


@dataclass(frozen=True)
class DetectorGrid:
    height_px: int
    width_px: int
    pitch_cm: float
    axis_u_px: float | None = None  # optical-axis pixel; defaults to center
    axis_v_px: float | None = None

    def __post_init__(self):
        if self.height_px < 1 or self.width_px < 1:
            raise ValidationError("detector grid needs at least one pixel per side")
        if not (self.pitch_cm > 0):
            raise ValidationError("pixel pitch must be > 0")
        if self.axis_u_px is None:
            object.__setattr__(self, "axis_u_px", (self.width_px - 1) / 2.0)
        if self.axis_v_px is None:
            object.__setattr__(self, "axis_v_px", (self.height_px - 1) / 2.0)

    @property
    def shape(self):
        return (self.height_px, self.width_px)

    def pixel_coords_cm(self):
        """Physical (x, y) coordinates of every pixel center, each (V, U)."""
        u = (np.arange(self.width_px) - self.axis_u_px) * self.pitch_cm
        v = (np.arange(self.height_px) - self.axis_v_px) * self.pitch_cm
        return np.meshgrid(u, v)


@dataclass(frozen=True)
class SphericalShell:
    """Concentric spherical shell; a solid sphere has inner radius zero."""

    center_cm: tuple  # (x, y, z), z measured from the detector toward the source
    inner_radius_cm: float
    outer_radius_cm: float

    def __post_init__(self):
        object.__setattr__(self, "center_cm", tuple(float(c) for c in self.center_cm))
        if len(self.center_cm) != 3:
            raise ValidationError("shell center must be a 3-D position")
        if not (0 <= self.inner_radius_cm < self.outer_radius_cm):
            raise ValidationError(
                "shell radii must satisfy 0 <= inner < outer; got "
                f"inner={self.inner_radius_cm}, outer={self.outer_radius_cm}"
            )


@dataclass(frozen=True)
class ConstantSlab:
    """Constant path length over a fixed pixel region (conebeam neglected)."""

    region_px: np.ndarray  # boolean (V, U)
    thickness_cm: float
    region_box_px: tuple | None = None  # (u0, v0, u1, v1) half-open, if rectangular

    def __post_init__(self):
        region = np.asarray(self.region_px, dtype=bool)
        region.flags.writeable = False
        object.__setattr__(self, "region_px", region)
        if region.ndim != 2:
            raise ValidationError("slab region must be a 2-D boolean mask")
        if not region.any():
            raise ValidationError("slab region mask is empty")
        if not (self.thickness_cm > 0):
            raise ValidationError("slab thickness must be > 0")


def slab_from_box(grid: DetectorGrid, u0: int, v0: int, u1: int, v1: int,
                  thickness_cm: float) -> ConstantSlab:
    """Build a rectangular slab from a half-open pixel box."""
    if not (0 <= u0 < u1 <= grid.width_px and 0 <= v0 < v1 <= grid.height_px):
        raise ValidationError(f"slab box ({u0},{v0},{u1},{v1}) not inside grid {grid.shape}")
    region = np.zeros(grid.shape, dtype=bool)
    region[v0:v1, u0:u1] = True
    return ConstantSlab(region, thickness_cm, region_box_px=(u0, v0, u1, v1))


@dataclass(frozen=True)
class Scene:
    grid: DetectorGrid
    source_to_detector_cm: float
    objects: tuple

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if len(self.objects) < 1:
            raise ValidationError("scene needs at least one object")
        if not (self.source_to_detector_cm > 0):
            raise ValidationError("source-to-detector distance must be > 0")
        for i, obj in enumerate(self.objects):
            if isinstance(obj, SphericalShell):
                _, _, z = obj.center_cm
                if z - obj.outer_radius_cm < 0:
                    raise ValidationError(f"object {i} extends behind the detector plane")
                if z + obj.outer_radius_cm >= self.source_to_detector_cm:
                    raise ValidationError(
                        f"object {i} is not strictly between source and detector"
                    )
            elif isinstance(obj, ConstantSlab):
                if obj.region_px.shape != self.grid.shape:
                    raise ValidationError(
                        f"object {i}: slab region shape {obj.region_px.shape} "
                        f"does not match grid {self.grid.shape}"
                    )
            else:
                raise ValidationError(f"object {i}: unsupported type {type(obj).__name__}")

    @property
    def n_objects(self) -> int:
        return len(self.objects)


@dataclass(frozen=True)
class PathLengthSet:
    """Per-object path-length images, traced once per scene and reused."""

    paths: tuple  # of (V, U) float arrays, cm

    def __post_init__(self):
        frozen = []
        for i, p in enumerate(self.paths):
            arr = np.asarray(p, dtype=np.float64)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValidationError(f"path-length image {i} has negative or non-finite values")
            arr = arr.copy()
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "paths", tuple(frozen))
        if len(self.paths) < 1:
            raise ValidationError("path-length set is empty")
        shapes = {p.shape for p in self.paths}
        if len(shapes) != 1:
            raise ValidationError(f"path-length images disagree in shape: {shapes}")

    @property
    def n_objects(self) -> int:
        return len(self.paths)

    @property
    def shape(self):
        return self.paths[0].shape

    def supports(self):
        """Boolean presence masks (path length > 0), one per object."""
        return tuple(p > 0 for p in self.paths)


def _chord_length(b_sq: np.ndarray, r_inner: float, r_outer: float) -> np.ndarray:
    outer = np.sqrt(np.maximum(r_outer**2 - b_sq, 0.0))
    inner = np.sqrt(np.maximum(r_inner**2 - b_sq, 0.0))
    return 2.0 * (outer - inner)


def trace_shell(shell: SphericalShell, scene: Scene, beam: str = PARALLEL) -> np.ndarray:
    """Path length through a shell at every pixel.

    For a ray whose closest approach to the shell center is b, the chord is
    2 * (sqrt(max(Ro^2 - b^2, 0)) - sqrt(max(Ri^2 - b^2, 0))).  Parallel rays
    run along the optical axis through each pixel; conebeam rays run from the
    point source through each pixel.
    """
    if beam not in BEAMS:
        raise ValidationError(f"unknown beam geometry {beam!r}; expected one of {BEAMS}")
    px, py = scene.grid.pixel_coords_cm()
    cx, cy, cz = shell.center_cm
    if beam == PARALLEL:
        b_sq = (px - cx) ** 2 + (py - cy) ** 2
    else:
        # Distance from the shell center to the source->pixel line.
        sz = scene.source_to_detector_cm
        dx, dy, dz = px, py, np.full_like(px, -sz)  # ray direction: pixel - source
        ox, oy, oz = cx, cy, cz - sz  # center relative to source
        cross_x = oy * dz - oz * dy
        cross_y = oz * dx - ox * dz
        cross_z = ox * dy - oy * dx
        b_sq = (cross_x**2 + cross_y**2 + cross_z**2) / (dx**2 + dy**2 + dz**2)
    return _chord_length(b_sq, shell.inner_radius_cm, shell.outer_radius_cm)


def trace_slab(slab: ConstantSlab, scene: Scene) -> np.ndarray:
    """Constant thickness inside the region mask, zero outside."""
    if slab.region_px.shape != scene.grid.shape:
        raise ValidationError(
            f"slab region shape {slab.region_px.shape} does not match grid {scene.grid.shape}"
        )
    return np.where(slab.region_px, slab.thickness_cm, 0.0)


def trace_scene(scene: Scene, beam: str = PARALLEL) -> PathLengthSet:
    """Trace every object, preserving scene order."""
    paths = []
    for obj in scene.objects:
        if isinstance(obj, SphericalShell):
            paths.append(trace_shell(obj, scene, beam))
        else:
            paths.append(trace_slab(obj, scene))
    return PathLengthSet(tuple(paths))


# ---------------------------------------------------------------------------
# Scene JSON (unit-annotated field names)


def scene_to_json(scene: Scene, beam: str = PARALLEL) -> dict:
    objects = []
    for i, obj in enumerate(scene.objects):
        if isinstance(obj, SphericalShell):
            objects.append(
                {
                    "type": "spherical_shell",
                    "center_cm": list(obj.center_cm),
                    "inner_radius_cm": obj.inner_radius_cm,
                    "outer_radius_cm": obj.outer_radius_cm,
                }
            )
        else:
            if obj.region_box_px is None:
                raise ValidationError(
                    f"object {i}: slab with a free-form mask cannot be serialized; "
                    "use a rectangular region"
                )
            u0, v0, u1, v1 = obj.region_box_px
            objects.append(
                {
                    "type": "constant_slab",
                    "region_px": {"u0": u0, "v0": v0, "u1": u1, "v1": v1},
                    "thickness_cm": obj.thickness_cm,
                }
            )
    return {
        "detector": {
            "height_px": scene.grid.height_px,
            "width_px": scene.grid.width_px,
            "pitch_cm": scene.grid.pitch_cm,
            "axis_u_px": scene.grid.axis_u_px,
            "axis_v_px": scene.grid.axis_v_px,
        },
        "source_to_detector_cm": scene.source_to_detector_cm,
        "beam": beam,
        "objects": objects,
    }


def scene_from_json(doc: dict):
    """Parse a scene document; returns (Scene, beam)."""
    try:
        det = doc["detector"]
        grid = DetectorGrid(
            height_px=int(det["height_px"]),
            width_px=int(det["width_px"]),
            pitch_cm=float(det["pitch_cm"]),
            axis_u_px=float(det["axis_u_px"]) if "axis_u_px" in det else None,
            axis_v_px=float(det["axis_v_px"]) if "axis_v_px" in det else None,
        )
        objects = []
        for i, spec in enumerate(doc["objects"]):
            kind = spec["type"]
            if kind == "spherical_shell":
                objects.append(
                    SphericalShell(
                        center_cm=tuple(spec["center_cm"]),
                        inner_radius_cm=float(spec["inner_radius_cm"]),
                        outer_radius_cm=float(spec["outer_radius_cm"]),
                    )
                )
            elif kind == "constant_slab":
                box = spec["region_px"]
                objects.append(
                    slab_from_box(
                        grid,
                        int(box["u0"]),
                        int(box["v0"]),
                        int(box["u1"]),
                        int(box["v1"]),
                        float(spec["thickness_cm"]),
                    )
                )
            else:
                raise ValidationError(f"object {i}: unknown type {kind!r}")
        scene = Scene(grid, float(doc["source_to_detector_cm"]), tuple(objects))
        beam = doc.get("beam", PARALLEL)
        if beam not in BEAMS:
            raise ValidationError(f"unknown beam geometry {beam!r}")
        return scene, beam
    except KeyError as exc:
        raise ValidationError(f"scene document is missing field {exc}") from exc


def load_scene(path):
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_json(json.load(fh))


def save_scene(scene: Scene, path, beam: str = PARALLEL) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_json(scene, beam), fh, indent=2, sort_keys=True)
        fh.write("\n")
