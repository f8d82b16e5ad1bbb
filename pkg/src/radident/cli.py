"""Command-line front end: simulate, identify, calibrate, report.

Every command writes a run manifest (command line, config, input hashes,
seed, version, wall time, output hashes) next to its outputs, making runs
reproducible and auditable.  Exit codes: 0 success, 2 input/validation
error, 3 numerical failure, 4 budget exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .calibrate import (
    ExposureSet,
    calibrate_spectrum,
    fit_pixel_calibration,
    preprocess,
    save_pixel_calibration,
)
from .errors import BudgetError, NumericalError, RadidentError, ValidationError
from .forward import Assignment, Radiograph, direct, scatter_basis
from .geometry import load_scene, trace_scene
from .materials import (
    load_material_table,
    load_spectrum_response,
    save_spectrum_response,
)
from .pfm import read_pfm, write_pfm
from .report import (
    dump_json,
    format_correctness_grid,
    format_ranked_table,
    load_json,
    plot_correctness_grid,
    plot_lineouts,
    plot_ranked,
    solve_result_from_json,
    solve_result_to_json,
    write_lineout_csv,
    write_ranked_csv,
)
from .simulate import sim_spec_from_json, simulate_radiograph, synthesize_frames
from .solver import SearchConfig, solve_exhaustive, solve_topN

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_BUDGET = 4


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class _Manifest:
    """Collects inputs/outputs of one command run and writes manifest.json."""

    def __init__(self, command: str, config: dict, seed=None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs = []
        self.outputs = []
        self.extra = {}
        self.start = time.perf_counter()

    def add_input(self, path):
        self.inputs.append({"path": str(path), "sha256": _sha256(path)})

    def add_output(self, path):
        self.outputs.append({"path": str(path), "sha256": _sha256(path)})

    def write(self, out_dir):
        doc = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "tool_version": __version__,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": time.perf_counter() - self.start,
        }
        doc.update(self.extra)
        path = os.path.join(out_dir, "manifest.json")
        dump_json(doc, path)
        return path


def _load_radiograph(path, valid_path=None) -> Radiograph:
    values = read_pfm(path)
    valid = None
    if valid_path:
        valid = read_pfm(valid_path) > 0.5
    return Radiograph(values, valid)


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = sim_spec_from_json(doc)
    table = load_material_table(args.materials)
    os.makedirs(args.out, exist_ok=True)
    manifest = _Manifest("simulate", {"spec": args.spec}, seed=spec.seed)
    manifest.add_input(args.spec)
    manifest.add_input(args.materials)

    sim = simulate_radiograph(spec, table)
    outputs = {}
    outputs["radiograph.pfm"] = sim.radiograph.values
    outputs["direct_truth.pfm"] = sim.direct
    outputs["scatter_truth.pfm"] = sim.scatter
    for i, path_img in enumerate(sim.paths.paths):
        outputs[f"path_{i}.pfm"] = path_img
    for name, img in outputs.items():
        write_pfm(os.path.join(args.out, name), img)

    sidecar = {
        "assignment": list(spec.truth.entries),
        "alpha": 1.0,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "scatter": sim_spec_to_sidecar_scatter(spec),
    }
    dump_json(sidecar, os.path.join(args.out, "truth.json"))

    frame_list = []
    if spec.detector is not None:
        frames, scene_raw, _ = synthesize_frames(spec, table)
        for i, (img, t_s, kind) in enumerate(frames):
            name = f"{kind}_{i}.pfm"
            write_pfm(os.path.join(args.out, name), img)
            frame_list.append({"path": name, "t_s": t_s, "kind": kind})
        write_pfm(os.path.join(args.out, "scene_raw.pfm"), scene_raw)
        dump_json(
            {"frames": frame_list, "scene": {"path": "scene_raw.pfm",
                                             "t_s": spec.detector.scene_time_s}},
            os.path.join(args.out, "frames.json"),
        )

    for name in sorted(outputs):
        manifest.add_output(os.path.join(args.out, name))
    manifest.add_output(os.path.join(args.out, "truth.json"))
    if frame_list:
        for row in frame_list:
            manifest.add_output(os.path.join(args.out, row["path"]))
        manifest.add_output(os.path.join(args.out, "scene_raw.pfm"))
        manifest.add_output(os.path.join(args.out, "frames.json"))
    manifest.write(args.out)
    print(f"simulated radiograph written to {args.out}")
    return EXIT_OK


def sim_spec_to_sidecar_scatter(spec):
    from .simulate import BumpScatter, PolynomialScatter

    if isinstance(spec.scatter, PolynomialScatter):
        return {"kind": "polynomial", "order": spec.scatter.order,
                "theta": [[m, n, v] for m, n, v in spec.scatter.theta]}
    if isinstance(spec.scatter, BumpScatter):
        return {"kind": "bump", "amplitude": spec.scatter.amplitude,
                "width": spec.scatter.width,
                "center_uv": list(spec.scatter.center_uv)}
    return None


def cmd_identify(args) -> int:
    table = load_material_table(args.materials)
    scene, beam = load_scene(args.scene)
    spectrum = load_spectrum_response(args.spectrum, table.grid)
    radiograph = _load_radiograph(args.radiograph, args.valid)
    if args.crop:
        u0, v0, u1, v1 = args.crop
        radiograph = radiograph.with_crop(u0, v0, u1, v1)
    paths = trace_scene(scene, beam)

    config_doc = {
        "n_top": args.n_top,
        "scatter_order": args.scatter_order,
        "warm_start": args.warm_start,
        "exhaustive": args.exhaustive,
        "crop": args.crop,
        "parallel": args.parallel,
    }
    manifest = _Manifest("identify", config_doc)
    for path in (args.radiograph, args.scene, args.materials, args.spectrum):
        manifest.add_input(path)
    if args.valid:
        manifest.add_input(args.valid)

    if args.exhaustive:
        result = solve_exhaustive(
            radiograph, paths, table, spectrum,
            n_top=args.n_top, order=args.scatter_order, budget=args.budget,
        )
    else:
        warm = tuple(args.warm_start.split(",")) if args.warm_start else None
        config = SearchConfig(
            n_top=args.n_top,
            scatter_order=args.scatter_order,
            warm_start_materials=warm,
            parallel_width=args.parallel,
        )
        result = solve_topN(radiograph, paths, table, spectrum, config)

    os.makedirs(args.out, exist_ok=True)
    dump_json(
        solve_result_to_json(result, config=config_doc),
        os.path.join(args.out, "result.json"),
    )
    write_ranked_csv(result, os.path.join(args.out, "ranked.csv"))
    manifest.add_output(os.path.join(args.out, "result.json"))
    manifest.add_output(os.path.join(args.out, "ranked.csv"))

    if args.diagnostics and result.ranked:
        _write_diagnostics(args.out, radiograph, paths, table, spectrum,
                           result, args.scatter_order, scene, manifest)
    manifest.write(args.out)
    print(format_ranked_table(result))
    return EXIT_OK


def _model_images(entry, paths, table, spectrum, order, shape):
    from .geometry import DetectorGrid

    grid = DetectorGrid(shape[0], shape[1], 1.0)
    d = direct(entry.assignment, paths, table, spectrum)
    scatter = np.zeros(shape)
    for (m, n), coef, img in zip(
        entry.fit.exponents, entry.fit.theta, scatter_basis(order, grid)
    ):
        scatter += coef * img
    return d, scatter


def _write_diagnostics(out, radiograph, paths, table, spectrum, result, order,
                       scene, manifest):
    top = result.ranked[0]
    d, s = _model_images(top, paths, table, spectrum, order, radiograph.shape)
    model = top.fit.alpha * d + s
    write_pfm(os.path.join(out, "direct_top1.pfm"), d)
    write_pfm(os.path.join(out, "scatter_top1.pfm"), s)
    write_pfm(os.path.join(out, "residual_top1.pfm"),
              np.where(radiograph.valid, radiograph.values - model, 0.0))
    row = int(round(scene.grid.axis_v_px))
    row = min(max(row, 0), radiograph.shape[0] - 1)
    u = np.arange(radiograph.shape[1])
    models = [model[row]]
    labels = [", ".join(top.assignment.entries)]
    if len(result.ranked) > 1:
        d2, s2 = _model_images(result.ranked[1], paths, table, spectrum, order,
                               radiograph.shape)
        models.append(result.ranked[1].fit.alpha * d2[row] + s2[row])
        labels.append(", ".join(result.ranked[1].assignment.entries))
    write_lineout_csv(os.path.join(out, "lineouts.csv"), u,
                      radiograph.values[row], models)
    plot_lineouts(os.path.join(out, "lineouts.png"), u,
                  radiograph.values[row], models, labels)
    for name in ("direct_top1.pfm", "scatter_top1.pfm", "residual_top1.pfm",
                 "lineouts.csv", "lineouts.png"):
        manifest.add_output(os.path.join(out, name))


def cmd_calibrate_pixels(args) -> int:
    with open(args.frames, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(args.frames))
    frames = []
    manifest = _Manifest("calibrate-pixels", {"threshold": args.threshold})
    manifest.add_input(args.frames)
    for row in doc["frames"]:
        path = os.path.join(base, row["path"])
        frames.append((read_pfm(path), float(row["t_s"]), row["kind"]))
        manifest.add_input(path)
    exposures = ExposureSet(tuple(frames))
    cal = fit_pixel_calibration(exposures, r2_threshold=args.threshold)
    if not cal.valid.any():
        raise NumericalError("no valid pixels after R-squared thresholding")
    provenance = {"frames": doc["frames"], "source": args.frames}
    save_pixel_calibration(cal, args.out, provenance=provenance)
    for name in ("gain_profile", "dark_rate", "offset", "r2", "valid"):
        manifest.add_output(os.path.join(args.out, f"{name}.pfm"))
    manifest.add_output(os.path.join(args.out, "calibration.json"))

    if args.preprocess:
        scene_doc = doc.get("scene")
        if scene_doc is None:
            raise ValidationError("frames manifest has no scene frame to preprocess")
        raw = read_pfm(os.path.join(base, scene_doc["path"]))
        prep = preprocess(raw, float(scene_doc["t_s"]), cal)
        write_pfm(os.path.join(args.out, "preprocessed.pfm"), prep.values)
        write_pfm(os.path.join(args.out, "preprocessed_valid.pfm"),
                  prep.valid.astype(float))
        manifest.add_output(os.path.join(args.out, "preprocessed.pfm"))
        manifest.add_output(os.path.join(args.out, "preprocessed_valid.pfm"))
    manifest.write(args.out)
    print(f"pixel calibration written to {args.out} "
          f"({int(np.count_nonzero(cal.valid))} valid pixels)")
    return EXIT_OK


def cmd_calibrate_spectrum(args) -> int:
    table = load_material_table(args.materials)
    scene, beam = load_scene(args.scene)
    q0 = load_spectrum_response(args.q0, table.grid)
    radiograph = _load_radiograph(args.radiograph, args.valid)
    paths = trace_scene(scene, beam)
    truth = Assignment(tuple(args.truth.split(",")))

    config_doc = {
        "step_size": args.step_size,
        "iterations": args.iterations,
        "patience": args.patience,
        "scatter_order": args.scatter_order,
    }
    manifest = _Manifest("calibrate-spectrum", config_doc)
    for path in (args.radiograph, args.scene, args.materials, args.q0):
        manifest.add_input(path)

    outcome = calibrate_spectrum(
        radiograph, paths, table, truth, q0,
        order=args.scatter_order, step_size=args.step_size,
        iterations=args.iterations, patience=args.patience,
    )
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "spectrum_calibrated.csv")
    save_spectrum_response(outcome.spectrum, out_csv)
    manifest.add_output(out_csv)
    manifest.extra["calibration"] = {
        "loss_initial": outcome.loss_initial,
        "loss_final": outcome.loss_final,
        "iterations": outcome.iterations,
        "diverged": outcome.diverged,
    }
    manifest.write(args.out)
    print(f"spectrum calibration: loss {outcome.loss_initial:.6g} -> "
          f"{outcome.loss_final:.6g} over {outcome.iterations} iterations"
          + (" (diverged; best iterate returned)" if outcome.diverged else ""))
    return EXIT_OK


def cmd_report(args) -> int:
    doc = load_json(args.result)
    result = solve_result_from_json(doc)
    manifest = _Manifest("report", {"result": args.result})
    manifest.add_input(args.result)
    truth = None
    if args.truth:
        sidecar = load_json(args.truth)
        truth = Assignment(tuple(sidecar["assignment"]))
        manifest.add_input(args.truth)

    os.makedirs(args.out, exist_ok=True)
    write_ranked_csv(result, os.path.join(args.out, "ranked.csv"))
    manifest.add_output(os.path.join(args.out, "ranked.csv"))
    table_text = format_ranked_table(result, truth)
    lines = [table_text]

    plot_ranked(result, os.path.join(args.out, "ranked.png"), truth)
    manifest.add_output(os.path.join(args.out, "ranked.png"))
    if truth is not None:
        grid_text = format_correctness_grid(result, truth)
        lines.append(grid_text)
        with open(os.path.join(args.out, "correctness.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(grid_text + "\n")
        plot_correctness_grid(result, truth,
                              os.path.join(args.out, "correctness.png"))
        manifest.add_output(os.path.join(args.out, "correctness.txt"))
        manifest.add_output(os.path.join(args.out, "correctness.png"))
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(lines) + "\n")
    manifest.add_output(os.path.join(args.out, "report.txt"))
    manifest.write(args.out)
    print("\n\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radident",
        description="Material identification from single radiographs",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic radiograph")
    p_sim.add_argument("spec", help="simulation spec JSON")
    p_sim.add_argument("--materials", required=True, help="attenuation CSV")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--seed", type=int, default=None, help="override spec seed")
    p_sim.set_defaults(func=cmd_simulate)

    p_id = sub.add_parser("identify", help="rank material assignments")
    p_id.add_argument("--radiograph", required=True, help="preprocessed PFM image")
    p_id.add_argument("--valid", default=None, help="optional validity-mask PFM")
    p_id.add_argument("--scene", required=True, help="scene JSON")
    p_id.add_argument("--materials", required=True, help="attenuation CSV")
    p_id.add_argument("--spectrum", required=True, help="spectrum CSV")
    p_id.add_argument("-N", "--n-top", type=int, default=20,
                      help="size of the ranked list (default 20)")
    p_id.add_argument("-P", "--scatter-order", type=int, default=2,
                      help="polynomial scatter order (default 2)")
    p_id.add_argument("--warm-start", default=None,
                      help="comma-separated restricted alphabet searched first")
    p_id.add_argument("--exhaustive", action="store_true",
                      help="evaluate every assignment instead of branch and bound")
    p_id.add_argument("--budget", type=int, default=200_000,
                      help="assignment budget for --exhaustive")
    p_id.add_argument("--crop", type=int, nargs=4, default=None,
                      metavar=("U0", "V0", "U1", "V1"),
                      help="restrict analysis to a half-open pixel box")
    p_id.add_argument("--parallel", type=int, default=1,
                      help="solver evaluation thread width")
    p_id.add_argument("--diagnostics", action="store_true",
                      help="write direct/scatter/residual images and lineouts")
    p_id.add_argument("--out", required=True, help="output directory")
    p_id.set_defaults(func=cmd_identify)

    p_cp = sub.add_parser("calibrate-pixels",
                          help="fit per-pixel gain/dark/offset from frames")
    p_cp.add_argument("--frames", required=True,
                      help="frames manifest JSON (paths, exposure times, kinds)")
    p_cp.add_argument("--threshold", type=float, default=0.95,
                      help="R-squared validity threshold (default 0.95)")
    p_cp.add_argument("--preprocess", action="store_true",
                      help="also preprocess the manifest's scene frame")
    p_cp.add_argument("--out", required=True, help="output directory")
    p_cp.set_defaults(func=cmd_calibrate_pixels)

    p_cs = sub.add_parser("calibrate-spectrum",
                          help="fit the spectrum-response product on known truth")
    p_cs.add_argument("--radiograph", required=True)
    p_cs.add_argument("--valid", default=None)
    p_cs.add_argument("--scene", required=True)
    p_cs.add_argument("--materials", required=True)
    p_cs.add_argument("--truth", required=True,
                      help="comma-separated ground-truth materials")
    p_cs.add_argument("--q0", required=True, help="initial spectrum CSV")
    p_cs.add_argument("-P", "--scatter-order", type=int, default=2)
    p_cs.add_argument("--step-size", type=float, default=1e-3)
    p_cs.add_argument("--iterations", type=int, default=200)
    p_cs.add_argument("--patience", type=int, default=20)
    p_cs.add_argument("--out", required=True, help="output directory")
    p_cs.set_defaults(func=cmd_calibrate_spectrum)

    p_rep = sub.add_parser("report", help="render tables and figures for a result")
    p_rep.add_argument("result", help="result JSON from identify")
    p_rep.add_argument("--truth", default=None, help="truth sidecar JSON")
    p_rep.add_argument("--out", required=True, help="output directory")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RadidentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
