"""Top-N branch and bound over material assignments.

Search works over partial assignments: objects are filled in a fixed branch
order, children of a node replace its first unassigned slot with every
material, and a node is bounded by fitting only the pixels whose material
content the partial assignment already determines.  Children are inserted
sorted by bound, giving a depth-first search that takes the most promising
candidate at each depth first; pruning drops a subtree when its bound
exceeds the current N-th best full-solution error.

Because branching fills objects in a fixed order, the bounding mask depends
only on the search depth.  The engine exploits this: it precomputes one QR
factorization of the scatter basis per depth and evaluates whole sibling
batches through rank-one projection updates, touching only the pixels on
the branched object's support.  The public ``bound``/``mask_for``/``loss``
operations remain straightforward single-shot implementations; engine and
public paths are cross-checked in the test suite.
"""

from __future__ import annotations

import bisect
import heapq
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import BudgetError, ValidationError
from .forward import (
    EMPTY,
    Assignment,
    FitResult,
    Radiograph,
    _solve_fit,
    basis_matrix,
    direct,
    fit_gain_scatter,
    loss,
    scatter_exponents,
)
from .geometry import DetectorGrid, PathLengthSet
from .materials import MaterialTable, SpectrumResponse

ORDERINGS = ("sorted-depth-first", "depth-first", "best-first")
BRANCH_ORDERS = ("scene", "support-area")

# Ratio ||(I-QQ')d|| / ||d|| below which the gain column is treated as lying
# in the scatter-basis span; the gain direction is then dropped, which keeps
# the evaluation a valid (conservative) lower bound instead of amplifying
# roundoff through a near-zero denominator.
_DEGENERATE_RTOL = 1e-7


@dataclass(frozen=True)
class SearchConfig:
    n_top: int = 20
    scatter_order: int = 2
    warm_start_materials: tuple | None = None
    ordering: str = "sorted-depth-first"
    parallel_width: int = 1
    branch_order: str = "scene"

    def __post_init__(self):
        if self.n_top < 1:
            raise ValidationError("n_top must be >= 1")
        if self.scatter_order < 0:
            raise ValidationError("scatter order must be >= 0")
        if self.ordering not in ORDERINGS:
            raise ValidationError(f"ordering must be one of {ORDERINGS}")
        if self.branch_order not in BRANCH_ORDERS:
            raise ValidationError(f"branch_order must be one of {BRANCH_ORDERS}")
        if self.parallel_width < 1:
            raise ValidationError("parallel_width must be >= 1")
        if self.warm_start_materials is not None:
            object.__setattr__(
                self, "warm_start_materials", tuple(self.warm_start_materials)
            )


@dataclass
class SearchStats:
    full_evaluations: int = 0
    bound_evaluations: int = 0
    pruned_subtrees: int = 0
    wall_time_s: float = 0.0
    incomplete: bool = False
    warm_start: dict | None = None


@dataclass(frozen=True)
class RankedEntry:
    assignment: Assignment
    fit: FitResult


@dataclass(frozen=True)
class SolveResult:
    ranked: tuple  # of RankedEntry, ascending by (sse, lexicographic materials)
    stats: SearchStats
    n_objects: int
    material_names: tuple


# ---------------------------------------------------------------------------
# Public subroutines


def branch(assignment: Assignment, omega) -> list:
    """Children of a partial assignment: first unassigned slot gets each
    material of omega in turn."""
    pos = assignment.first_empty()
    children = []
    for name in omega:
        entries = list(assignment.entries)
        entries[pos] = name
        children.append(Assignment(tuple(entries)))
    return children


def mask_for(assignment: Assignment, paths: PathLengthSet) -> np.ndarray:
    """Pixels whose error a partial assignment already determines.

    A pixel is kept iff every object present there (path length > 0) is
    assigned; pixels crossed by no object are always kept.
    """
    if assignment.n_objects != paths.n_objects:
        raise ValidationError(
            f"assignment covers {assignment.n_objects} objects but the scene has "
            f"{paths.n_objects}"
        )
    mask = np.ones(paths.shape, dtype=bool)
    for entry, path in zip(assignment.entries, paths.paths):
        if entry is EMPTY:
            mask &= ~(path > 0)
    return mask


def bound(
    assignment: Assignment,
    radiograph: Radiograph,
    paths: PathLengthSet,
    table: MaterialTable,
    spectrum: SpectrumResponse,
    order: int,
    filler: str | None = None,
) -> float:
    """Lower bound on J(y) over all full descendants y of the assignment.

    Computed as the masked fit of the direct signal of any full descendant;
    unassigned slots are filled with a fixed material (first of the table by
    default), which cannot affect the result because masked pixels carry no
    path through unassigned objects.  Underdetermined masks give the vacuous
    bound 0.
    """
    if assignment.is_full:
        return loss(assignment, radiograph, paths, table, spectrum, order).sse
    extra = mask_for(assignment, paths)
    n_fit = int(np.count_nonzero(extra & radiograph.valid))
    n_unknowns = 1 + len(scatter_exponents(order))
    if n_fit <= n_unknowns:
        return 0.0
    if filler is None:
        filler = table.names[0]
    filled = Assignment(
        tuple(filler if e is EMPTY else e for e in assignment.entries)
    )
    d = direct(filled, paths, table, spectrum)
    return fit_gain_scatter(radiograph, d, order, extra_mask=extra).sse


# ---------------------------------------------------------------------------
# Search engine


class _DepthData:
    """Static per-depth data: mask positions, basis QR, projected target."""

    __slots__ = (
        "idx", "n_fit", "usable", "q_factor", "r_factor", "tperp", "tperp_sq",
        "sup_pos", "sup_loc", "sup_lvals", "q_sub", "tperp_sub",
    )


class _Engine:
    """Shared state for branch-and-bound and exhaustive enumeration."""

    def __init__(self, radiograph, paths, table, spectrum, order, branch_perm,
                 parallel_width=1):
        if not table.grid.matches(spectrum.grid):
            raise ValidationError("material table and spectrum use different energy grids")
        if paths.n_objects < 1:
            raise ValidationError("scene has no objects")
        shape = paths.shape
        if radiograph.shape != shape:
            raise ValidationError(
                f"radiograph shape {radiograph.shape} does not match paths {shape}"
            )
        self.order = order
        self.perm = tuple(branch_perm)
        self.n_objects = paths.n_objects
        self.table = table

        valid_flat = radiograph.valid.ravel()
        self.idx_valid = np.flatnonzero(valid_flat)
        self.n_valid = self.idx_valid.size
        self.t = radiograph.values.ravel()[self.idx_valid]
        grid = DetectorGrid(shape[0], shape[1], 1.0)
        self.basis = basis_matrix(order, grid)[self.idx_valid]
        self.n_basis = self.basis.shape[1]
        self.n_unknowns = self.n_basis + 1
        self.paths_flat = np.stack(
            [p.ravel()[self.idx_valid] for p in paths.paths]
        )
        self.supports = self.paths_flat > 0
        self.mu = np.asarray(table.mu)
        self.q = np.asarray(spectrum.product)

        # Mutable per-prefix state; _descend/_restore keep it consistent.
        self._trans = np.ones((self.q.size, self.n_valid))
        self._direct = self.q @ self._trans

        self._depths = self._build_depths()
        self.fallback_full = not self._depths[self.n_objects].usable
        self._pool = (
            ThreadPoolExecutor(max_workers=parallel_width)
            if parallel_width > 1
            else None
        )
        self._chunks = parallel_width

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def to_scene_order(self, ints_branch):
        """Material indices from branch order back to scene object order."""
        out = [0] * self.n_objects
        for j, mat in enumerate(ints_branch):
            out[self.perm[j]] = mat
        return tuple(out)

    def to_branch_order(self, ints_scene):
        return tuple(ints_scene[p] for p in self.perm)

    def _build_depths(self):
        depths = []
        unassigned_any = np.zeros(self.n_valid, dtype=bool)
        masks = [None] * (self.n_objects + 1)
        masks[self.n_objects] = np.ones(self.n_valid, dtype=bool)
        for j in range(self.n_objects - 1, -1, -1):
            unassigned_any = unassigned_any | self.supports[self.perm[j]]
            masks[j] = ~unassigned_any
        for j in range(self.n_objects + 1):
            dd = _DepthData()
            dd.idx = np.flatnonzero(masks[j])
            dd.n_fit = dd.idx.size
            dd.usable = dd.n_fit > self.n_unknowns
            if dd.usable:
                b_sub = self.basis[dd.idx]
                q_factor, r_factor = np.linalg.qr(b_sub)
                diag = np.abs(np.diag(r_factor))
                if diag.size and diag.min() <= diag.max() * 1e-12:
                    # Collinear valid pixels make the basis itself deficient;
                    # fall back to the dense solver at this depth.
                    dd.usable = False
                else:
                    dd.q_factor = q_factor
                    dd.r_factor = r_factor
                    t_sub = self.t[dd.idx]
                    dd.tperp = t_sub - q_factor @ (q_factor.T @ t_sub)
                    dd.tperp_sq = float(dd.tperp @ dd.tperp)
            depths.append(dd)
        # Precompute, per branching depth j, where the branched object's
        # support lands inside the child mask (depth j + 1).
        for j in range(self.n_objects):
            child = depths[j + 1]
            obj = self.perm[j]
            if not child.usable:
                continue
            in_mask = np.zeros(self.n_valid, dtype=bool)
            in_mask[child.idx] = True
            sup_pos = np.flatnonzero(self.supports[obj] & in_mask)
            child.sup_pos = sup_pos
            child.sup_loc = np.searchsorted(child.idx, sup_pos)
            child.sup_lvals = self.paths_flat[obj][sup_pos]
            child.q_sub = child.q_factor[child.sup_loc]
            child.tperp_sub = child.tperp[child.sup_loc]
        return depths

    # -- prefix state -------------------------------------------------------

    def sup_full(self, depth):
        return np.flatnonzero(self.supports[self.perm[depth]])

    def _descend(self, depth, mat):
        sup = self.sup_full(depth)
        saved = (self._trans[:, sup].copy(), self._direct[sup].copy())
        lvals = self.paths_flat[self.perm[depth]][sup]
        self._trans[:, sup] *= np.exp(-np.outer(self.mu[mat], lvals))
        self._direct[sup] = self.q @ self._trans[:, sup]
        return sup, saved

    def _restore(self, token):
        sup, (trans, drct) = token
        self._trans[:, sup] = trans
        self._direct[sup] = drct

    def rebuild(self, prefix):
        """Replay a prefix from scratch; float-identical to nested descents."""
        self._trans[:] = 1.0
        self._direct[:] = self.q @ self._trans
        for depth, mat in enumerate(prefix):
            self._descend(depth, mat)

    # -- batched child evaluation -------------------------------------------

    def eval_children(self, depth, cand):
        """sse, gain, degenerate-flag arrays for all children of the current
        prefix at the given depth, assigning each material of cand in turn."""
        child = self._depths[depth + 1]
        n_children = len(cand)
        if not child.usable:
            if depth + 1 == self.n_objects:
                return self._eval_children_dense(depth, cand)
            # Underdetermined masked fit: vacuous lower bound.
            return (
                np.zeros(n_children),
                np.zeros(n_children),
                np.ones(n_children, dtype=bool),
            )

        d_shared = self._direct[child.idx]
        proj = child.q_factor.T @ d_shared
        a_vec = d_shared - child.q_factor @ proj
        a_dot_t = float(a_vec @ child.tperp)
        a_sq = float(a_vec @ a_vec)
        a_sub = a_vec[child.sup_loc]
        d_sh_sq = float(d_shared @ d_shared)
        d_sh_sup = d_shared[child.sup_loc]
        t_sup = self._trans[:, child.sup_pos]

        def eval_chunk(mats):
            factors = np.exp(
                -self.mu[mats][:, :, None] * child.sup_lvals[None, None, :]
            )
            d_child_sup = np.einsum("e,es,ces->cs", self.q, t_sup, factors)
            delta = d_child_sup - d_sh_sup
            g_mat = delta @ child.q_sub
            numer = a_dot_t + delta @ child.tperp_sub
            cross_a = delta @ a_sub
            delta_sq = np.einsum("cs,cs->c", delta, delta)
            denom = a_sq + 2.0 * cross_a + delta_sq - np.einsum(
                "cb,cb->c", g_mat, g_mat
            )
            d_child_sq = d_sh_sq + 2.0 * (delta @ d_sh_sup) + delta_sq
            degenerate = denom <= _DEGENERATE_RTOL**2 * np.maximum(d_child_sq, 1e-300)
            safe = np.where(degenerate, 1.0, denom)
            gain = np.where(degenerate, 0.0, numer / safe)
            sse = np.maximum(
                child.tperp_sq - np.where(degenerate, 0.0, numer**2 / safe), 0.0
            )
            return sse, gain, degenerate

        if self._pool is not None and n_children >= 2 * self._chunks:
            parts = np.array_split(np.asarray(cand), self._chunks)
            results = list(self._pool.map(eval_chunk, parts))
            sse = np.concatenate([r[0] for r in results])
            gain = np.concatenate([r[1] for r in results])
            degen = np.concatenate([r[2] for r in results])
            return sse, gain, degen
        return eval_chunk(np.asarray(cand))

    def _eval_children_dense(self, depth, cand):
        # Slow path for tiny or basis-deficient full-depth fits.
        sse = np.empty(len(cand))
        gain = np.empty(len(cand))
        degen = np.empty(len(cand), dtype=bool)
        sup = self.sup_full(depth)
        lvals = self.paths_flat[self.perm[depth]][sup]
        for i, mat in enumerate(cand):
            d_child = self._direct.copy()
            t_child = self._trans[:, sup] * np.exp(-np.outer(self.mu[mat], lvals))
            d_child[sup] = self.q @ t_child
            fit = _solve_fit(
                self.t,
                np.concatenate([d_child[:, None], self.basis], axis=1),
                scatter_exponents(self.order),
            )
            sse[i], gain[i], degen[i] = fit.sse, fit.alpha, fit.degenerate
        return sse, gain, degen

    def finalize(self, ints_scene, sse, gain, degenerate) -> FitResult:
        """Full FitResult (with scatter coefficients) for one assignment."""
        exponents = scatter_exponents(self.order)
        self.rebuild(self.to_branch_order(ints_scene))
        if self.fallback_full:
            return _solve_fit(
                self.t,
                np.concatenate([self._direct[:, None], self.basis], axis=1),
                exponents,
            )
        full = self._depths[self.n_objects]
        resid = self.t - gain * self._direct
        theta = scipy.linalg.solve_triangular(
            full.r_factor, full.q_factor.T @ resid
        )
        return FitResult(
            alpha=float(gain),
            theta=theta,
            exponents=exponents,
            sse=float(sse),
            rmse=float(np.sqrt(sse / self.n_valid)),
            n_pixels=int(self.n_valid),
            degenerate=bool(degenerate or self.n_valid <= self.n_unknowns + 1),
        )


class _TopList:
    """Capacity-N list ordered by (sse, lexicographic material indices)."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.entries = []  # sorted list of (sse, ints, gain, degenerate)
        self.members = set()

    def threshold(self):
        if len(self.entries) < self.capacity:
            return np.inf
        return self.entries[-1][0]

    def offer(self, sse, ints, gain, degenerate):
        if ints in self.members:
            return
        key = (sse, ints)
        if len(self.entries) == self.capacity and key >= (
            self.entries[-1][0],
            self.entries[-1][1],
        ):
            return
        pos = bisect.bisect(self.entries, (sse, ints, gain, degenerate))
        self.entries.insert(pos, (sse, ints, gain, degenerate))
        self.members.add(ints)
        if len(self.entries) > self.capacity:
            dropped = self.entries.pop()
            self.members.discard(dropped[1])


class _Search:
    def __init__(self, engine: _Engine, config: SearchConfig):
        self.engine = engine
        self.config = config
        self.top = _TopList(config.n_top)
        self.stats = SearchStats()
        self.evaluated = set()  # distinct full assignments evaluated

    def run(self, omega_ints):
        if self.config.ordering == "best-first":
            self._run_best_first(tuple(omega_ints))
        else:
            self._recurse((), 0, tuple(omega_ints))

    def _note_full(self, prefix, cand, sse, gain, degen):
        for i, mat in enumerate(cand):
            ints = self.engine.to_scene_order(prefix + (int(mat),))
            if ints not in self.evaluated:
                self.evaluated.add(ints)
                self.stats.full_evaluations += 1
            self.top.offer(float(sse[i]), ints, float(gain[i]), bool(degen[i]))

    def _child_order(self, cand, sse):
        if self.config.ordering == "depth-first":
            return range(len(cand))
        # Most promising first; material index breaks ties deterministically.
        return sorted(range(len(cand)), key=lambda i: (sse[i], cand[i]))

    def _recurse(self, prefix, depth, omega_ints):
        engine = self.engine
        cand = omega_ints
        sse, gain, degen = engine.eval_children(depth, cand)
        if depth + 1 == engine.n_objects:
            order = self._child_order(cand, sse)
            for i in order:
                self._note_full(prefix, (cand[i],), sse[i : i + 1],
                                gain[i : i + 1], degen[i : i + 1])
            return
        self.stats.bound_evaluations += len(cand)
        for i in self._child_order(cand, sse):
            if sse[i] > self.top.threshold():
                self.stats.pruned_subtrees += 1
                continue
            token = engine._descend(depth, cand[i])
            try:
                self._recurse(prefix + (int(cand[i]),), depth + 1, omega_ints)
            finally:
                engine._restore(token)

    def _run_best_first(self, omega_ints):
        engine = self.engine
        counter = 0
        heap = []

        def expand(prefix, depth):
            nonlocal counter
            engine.rebuild(prefix)
            sse, gain, degen = engine.eval_children(depth, omega_ints)
            if depth + 1 == engine.n_objects:
                for i in self._child_order(omega_ints, sse):
                    self._note_full(prefix, (omega_ints[i],), sse[i : i + 1],
                                    gain[i : i + 1], degen[i : i + 1])
                return
            self.stats.bound_evaluations += len(omega_ints)
            for i in self._child_order(omega_ints, sse):
                counter += 1
                heapq.heappush(
                    heap, (float(sse[i]), counter, prefix + (int(omega_ints[i]),))
                )

        expand((), 0)
        while heap:
            node_bound, _, prefix = heapq.heappop(heap)
            if node_bound > self.top.threshold():
                self.stats.pruned_subtrees += 1
                continue
            expand(prefix, len(prefix))


def _branch_permutation(paths: PathLengthSet, mode: str):
    if mode == "scene":
        return tuple(range(paths.n_objects))
    areas = [int(np.count_nonzero(p > 0)) for p in paths.paths]
    return tuple(sorted(range(paths.n_objects), key=lambda i: (-areas[i], i)))


def _ranked_entries(engine: _Engine, top: _TopList, table: MaterialTable):
    ranked = []
    for sse, ints, gain, degen in top.entries:
        fit = engine.finalize(ints, sse, gain, degen)
        names = tuple(table.names[i] for i in ints)
        ranked.append(RankedEntry(Assignment(names), fit))
    return tuple(ranked)


def solve_topN(
    radiograph: Radiograph,
    paths: PathLengthSet,
    table: MaterialTable,
    spectrum: SpectrumResponse,
    config: SearchConfig = SearchConfig(),
) -> SolveResult:
    """Exact top-N material identification by branch and bound.

    Returns the N full assignments with the lowest fitted error, ranked
    ascending with lexicographic tie-breaks, together with node counts.  An
    optional warm start first searches a restricted material alphabet and
    seeds the top list, which tightens the pruning threshold early; it never
    changes the returned ranking.
    """
    start = time.perf_counter()
    perm = _branch_permutation(paths, config.branch_order)
    engine = _Engine(
        radiograph, paths, table, spectrum, config.scatter_order, perm,
        parallel_width=config.parallel_width,
    )
    search = _Search(engine, config)
    omega_ints = tuple(range(table.n_materials))
    try:
        if config.warm_start_materials:
            warm_ints = tuple(table.index(n) for n in config.warm_start_materials)
            search.run(warm_ints)
            search.stats.warm_start = {
                "materials": list(config.warm_start_materials),
                "full_evaluations": search.stats.full_evaluations,
                "bound_evaluations": search.stats.bound_evaluations,
            }
        search.run(omega_ints)
    except KeyboardInterrupt:
        search.stats.incomplete = True
    finally:
        engine.close()
    search.stats.wall_time_s = time.perf_counter() - start
    ranked = _ranked_entries(engine, search.top, table)
    return SolveResult(ranked, search.stats, paths.n_objects, table.names)


def solve_exhaustive(
    radiograph: Radiograph,
    paths: PathLengthSet,
    table: MaterialTable,
    spectrum: SpectrumResponse,
    n_top: int = 20,
    order: int = 2,
    budget: int = 200_000,
) -> SolveResult:
    """Evaluate every full assignment; reference oracle for the search."""
    n_total = table.n_materials ** paths.n_objects
    if n_total > budget:
        raise BudgetError(
            f"exhaustive search needs {n_total} evaluations, over the budget of "
            f"{budget}; use branch and bound (solve_topN) instead"
        )
    start = time.perf_counter()
    engine = _Engine(radiograph, paths, table, spectrum, order,
                     tuple(range(paths.n_objects)))
    top = _TopList(n_top)
    stats = SearchStats()
    omega_ints = tuple(range(table.n_materials))

    def recurse(prefix, depth):
        if depth + 1 == engine.n_objects:
            sse, gain, degen = engine.eval_children(depth, omega_ints)
            stats.full_evaluations += len(omega_ints)
            for i in range(len(omega_ints)):
                top.offer(float(sse[i]), prefix + (omega_ints[i],),
                          float(gain[i]), bool(degen[i]))
            return
        for mat in omega_ints:
            token = engine._descend(depth, mat)
            try:
                recurse(prefix + (mat,), depth + 1)
            finally:
                engine._restore(token)

    recurse((), 0)
    stats.wall_time_s = time.perf_counter() - start
    ranked = _ranked_entries(engine, top, table)
    return SolveResult(ranked, stats, paths.n_objects, table.names)
