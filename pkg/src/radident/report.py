"""Result serialization, ranked tables, lineouts, and rendered figures.

The report path always writes machine-readable CSV/JSON; alongside those it
renders matplotlib figures (ranked-error bar chart, per-object correctness
grid, lineouts, sweep curves) to files.
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .forward import Assignment, FitResult
from .solver import RankedEntry, SearchStats, SolveResult


def _sig4(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.4g}"


# ---------------------------------------------------------------------------
# SolveResult JSON / CSV


def solve_result_to_json(result: SolveResult, config=None) -> dict:
    ranked = []
    for entry in result.ranked:
        fit = entry.fit
        ranked.append(
            {
                "assignment": list(entry.assignment.entries),
                "sse": fit.sse,
                "rmse": fit.rmse,
                "alpha": fit.alpha,
                "theta": [
                    [m, n, float(v)] for (m, n), v in zip(fit.exponents, fit.theta)
                ],
                "n_pixels": fit.n_pixels,
                "degenerate": fit.degenerate,
            }
        )
    stats = result.stats
    doc = {
        "ranked": ranked,
        "stats": {
            "full_evaluations": stats.full_evaluations,
            "bound_evaluations": stats.bound_evaluations,
            "pruned_subtrees": stats.pruned_subtrees,
            "wall_time_s": stats.wall_time_s,
            "incomplete": stats.incomplete,
            "warm_start": stats.warm_start,
        },
        "n_objects": result.n_objects,
        "materials": list(result.material_names),
    }
    if config is not None:
        doc["config"] = config
    return doc


def solve_result_from_json(doc: dict) -> SolveResult:
    ranked = []
    for row in doc["ranked"]:
        exponents = tuple((int(m), int(n)) for m, n, _ in row["theta"])
        theta = np.asarray([v for _, _, v in row["theta"]])
        fit = FitResult(
            alpha=float(row["alpha"]),
            theta=theta,
            exponents=exponents,
            sse=float(row["sse"]),
            rmse=float(row["rmse"]),
            n_pixels=int(row["n_pixels"]),
            degenerate=bool(row["degenerate"]),
        )
        ranked.append(RankedEntry(Assignment(tuple(row["assignment"])), fit))
    stats_doc = doc["stats"]
    stats = SearchStats(
        full_evaluations=stats_doc["full_evaluations"],
        bound_evaluations=stats_doc["bound_evaluations"],
        pruned_subtrees=stats_doc["pruned_subtrees"],
        wall_time_s=stats_doc["wall_time_s"],
        incomplete=stats_doc["incomplete"],
        warm_start=stats_doc.get("warm_start"),
    )
    return SolveResult(
        tuple(ranked), stats, int(doc["n_objects"]), tuple(doc["materials"])
    )


def write_ranked_csv(result: SolveResult, path) -> None:
    """Ranked table: one row per assignment, ascending error."""
    n_obj = result.n_objects
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["rank"]
            + [f"object_{i + 1}" for i in range(n_obj)]
            + ["rmse", "sse", "alpha"]
        )
        for rank, entry in enumerate(result.ranked, start=1):
            writer.writerow(
                [rank]
                + list(entry.assignment.entries)
                + [repr(entry.fit.rmse), repr(entry.fit.sse), repr(entry.fit.alpha)]
            )


def format_ranked_table(result: SolveResult, truth: Assignment | None = None) -> str:
    """Human table, 4 significant digits, optional truth markers."""
    lines = []
    header = f"{'rank':>4}  {'rmse':>10}  {'alpha':>10}  assignment"
    lines.append(header)
    lines.append("-" * len(header))
    truth_rank = None
    for rank, entry in enumerate(result.ranked, start=1):
        mark = ""
        if truth is not None and entry.assignment.entries == truth.entries:
            mark = "  <- truth"
            truth_rank = rank
        lines.append(
            f"{rank:>4}  {_sig4(entry.fit.rmse):>10}  {_sig4(entry.fit.alpha):>10}  "
            f"[{', '.join(entry.assignment.entries)}]{mark}"
        )
    stats = result.stats
    lines.append(
        f"search: {stats.full_evaluations} full evaluations, "
        f"{stats.bound_evaluations} bounds, {stats.pruned_subtrees} pruned subtrees, "
        f"{stats.wall_time_s:.2f} s"
    )
    if truth is not None:
        if truth_rank is not None:
            lines.append(f"truth rank {truth_rank}")
        else:
            lines.append(f"truth not in top {len(result.ranked)}")
    return "\n".join(lines)


def correctness_grid(result: SolveResult, truth: Assignment) -> np.ndarray:
    """Boolean grid: row n, column m is True when the rank-(n+1) assignment
    identifies object m+1 correctly."""
    if truth.n_objects != result.n_objects:
        raise ValidationError("truth length does not match result object count")
    grid = np.zeros((len(result.ranked), result.n_objects), dtype=bool)
    for i, entry in enumerate(result.ranked):
        for j, (got, want) in enumerate(zip(entry.assignment.entries, truth.entries)):
            grid[i, j] = got == want
    return grid


def format_correctness_grid(result: SolveResult, truth: Assignment) -> str:
    grid = correctness_grid(result, truth)
    width = max(len(n) for n in truth.entries)
    lines = ["correct-per-object grid (x = correct):"]
    lines.append(
        "rank  " + "  ".join(f"{name:>{width}}" for name in truth.entries)
    )
    for i, row in enumerate(grid, start=1):
        cells = "  ".join(f"{'x' if ok else '.':>{width}}" for ok in row)
        lines.append(f"{i:>4}  {cells}")
    return "\n".join(lines)


def write_lineout_csv(path, u, measured, models) -> None:
    """Lineout columns: u, measured, model_1, model_2, ..."""
    models = [np.asarray(m) for m in models]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["u", "measured"] + [f"model_{i + 1}" for i in range(len(models))]
        )
        for i, (uu, meas) in enumerate(zip(u, measured)):
            writer.writerow(
                [int(uu), repr(float(meas))] + [repr(float(m[i])) for m in models]
            )


def write_order_sweep_csv(rows, path) -> None:
    """Long-format sweep table: one row per (order, curve) point."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["order", "kind", "rank", "rmse"])
        for row in rows:
            writer.writerow(
                [row["order"], "truth", row["truth_rank"],
                 "" if row["truth_rmse"] is None else repr(row["truth_rmse"])]
            )
            for i, rmse in enumerate(row["incorrect_rmse"], start=1):
                writer.writerow([row["order"], f"incorrect_{i}", "", repr(rmse)])


def write_thickness_sweep_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["thickness_cm", "seed", "truth_rank", "censored"])
        for row in rows:
            writer.writerow(
                [repr(row["thickness_cm"]), row["seed"], row["truth_rank"],
                 int(row["censored"])]
            )


# ---------------------------------------------------------------------------
# Figures


def plot_ranked(result: SolveResult, path, truth: Assignment | None = None) -> None:
    """Bar chart of rmse against rank, truth bar highlighted."""
    ranks = np.arange(1, len(result.ranked) + 1)
    rmses = [e.fit.rmse for e in result.ranked]
    colors = ["tab:blue"] * len(ranks)
    if truth is not None:
        for i, entry in enumerate(result.ranked):
            if entry.assignment.entries == truth.entries:
                colors[i] = "tab:green"
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(ranks, rmses, color=colors)
    ax.set_xlabel("rank")
    ax.set_ylabel("RMSE")
    ax.set_title("Ranked assignments")
    if len(ranks) <= 25:
        labels = [", ".join(e.assignment.entries) for e in result.ranked]
        ax.set_xticks(ranks)
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_correctness_grid(result: SolveResult, truth: Assignment, path) -> None:
    grid = correctness_grid(result, truth)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.imshow(grid, cmap="Greens", vmin=0, vmax=1, aspect="auto")
    for (i, j), ok in np.ndenumerate(grid):
        ax.text(j, i, "✓" if ok else "", ha="center", va="center")
    ax.set_xticks(range(result.n_objects))
    ax.set_xticklabels(truth.entries, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(grid.shape[0]))
    ax.set_yticklabels([str(i + 1) for i in range(grid.shape[0])], fontsize=7)
    ax.set_ylabel("rank")
    ax.set_title("Correct identifications per object")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_lineouts(path, u, measured, models, labels=None) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(u, measured, "k-", label="measured", linewidth=1)
    styles = ["--", ":", "-."]
    for i, model in enumerate(models):
        label = labels[i] if labels else f"model {i + 1}"
        ax.plot(u, model, styles[i % len(styles)], label=label)
    ax.set_xlabel("u (pixels)")
    ax.set_ylabel("transmission")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_order_sweep(rows, path) -> None:
    """Truth rank (bars) and errors (markers) against scatter order."""
    orders = [row["order"] for row in rows]
    ranks = [row["truth_rank"] if row["truth_rank"] else np.nan for row in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(orders, ranks, color="tab:gray", alpha=0.5, label="truth rank")
    ax.set_xlabel("scatter model order")
    ax.set_ylabel("truth rank")
    ax2 = ax.twinx()
    for row in rows:
        if row["truth_rmse"] is not None:
            ax2.plot(row["order"], row["truth_rmse"], "gx")
        if row["incorrect_rmse"]:
            ax2.plot(
                [row["order"]] * len(row["incorrect_rmse"]),
                row["incorrect_rmse"],
                "b.",
                markersize=3,
            )
    ax2.set_ylabel("RMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def dump_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
