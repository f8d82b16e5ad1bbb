import itertools

import numpy as np
import pytest

from radident.errors import BudgetError, ValidationError
from radident.forward import Assignment, Radiograph, loss
from radident.geometry import (
    DetectorGrid,
    PathLengthSet,
    Scene,
    SphericalShell,
    trace_scene,
)
from radident.solver import (
    SearchConfig,
    bound,
    branch,
    mask_for,
    solve_exhaustive,
    solve_topN,
)

from conftest import random_instance

INCH = 2.54


def _ranked_key(result):
    return [(e.assignment.entries, e.fit.sse) for e in result.ranked]


# ---------------------------------------------------------------------------
# branch


def test_branch_replaces_first_empty():
    x = Assignment(("Cu", None, None))
    children = branch(x, ("Cu", "Ni", "Sn"))
    assert [c.entries for c in children] == [
        ("Cu", "Cu", None),
        ("Cu", "Ni", None),
        ("Cu", "Sn", None),
    ]


def test_branch_root_gives_full_solutions():
    children = branch(Assignment((None,)), ("a", "b", "c", "d"))
    assert len(children) == 4
    assert all(c.is_full for c in children)


def test_branch_children_have_one_fewer_empty():
    rng = np.random.default_rng(0)
    omega = ("a", "b", "c")
    for _ in range(20):
        k = int(rng.integers(1, 6))
        entries = [
            None if rng.random() < 0.5 else str(rng.choice(omega)) for _ in range(k)
        ]
        if None not in entries:
            entries[int(rng.integers(0, k))] = None
        x = Assignment(tuple(entries))
        for child in branch(x, omega):
            assert child.entries.count(None) == x.entries.count(None) - 1


def test_branch_full_assignment_errors():
    with pytest.raises(ValidationError):
        branch(Assignment(("a", "b")), ("a", "b"))


# ---------------------------------------------------------------------------
# mask_for


def test_mask_all_empty_fully_covered_scene():
    paths = PathLengthSet((np.ones((4, 4)),))
    mask = mask_for(Assignment((None,)), paths)
    assert not mask.any()


def test_mask_full_assignment_is_all_true():
    paths = PathLengthSet((np.ones((4, 4)), np.zeros((4, 4)) + 0.5))
    mask = mask_for(Assignment(("a", "b")), paths)
    assert mask.all()


def test_mask_nested_shells_annulus():
    outer = SphericalShell((0.0, 0.0, 17.5), 2.0 * INCH, 2.5 * INCH)
    inner = SphericalShell((0.0, 0.0, 17.5), 1.75 * INCH, 2.0 * INCH)
    grid = DetectorGrid(64, 64, pitch_cm=0.25)
    scene = Scene(grid, 100.0, (outer, inner))
    paths = trace_scene(scene)
    sup_outer, sup_inner = paths.supports()
    mask = mask_for(Assignment(("aluminum", None)), paths)
    # exactly: background plus the annulus where only the outer shell sits
    assert np.array_equal(mask, ~sup_inner)
    assert np.any(mask & sup_outer)


# ---------------------------------------------------------------------------
# bound


def test_bound_empty_mask_is_vacuous():
    paths = PathLengthSet((np.ones((4, 4)),))
    rad = Radiograph(np.random.default_rng(0).uniform(0, 1, (4, 4)))
    rng = np.random.default_rng(1)
    radiograph, paths, table, q, _ = random_instance(rng, n_objects=1, grid_px=8)
    full_support = PathLengthSet((np.ones(radiograph.shape),))
    value = bound(Assignment((None,)), radiograph, full_support, table, q, order=1)
    assert value == 0.0


def test_bound_of_full_assignment_equals_loss():
    rng = np.random.default_rng(2)
    radiograph, paths, table, q, truth = random_instance(rng, n_objects=2)
    b = bound(truth, radiograph, paths, table, q, order=1)
    j = loss(truth, radiograph, paths, table, q, order=1).sse
    assert b == j


def test_bound_independent_of_filler():
    rng = np.random.default_rng(3)
    for _ in range(5):
        radiograph, paths, table, q, truth = random_instance(
            rng, n_objects=3, n_materials=4
        )
        x = Assignment((truth.entries[0], None, None))
        values = [
            bound(radiograph=radiograph, assignment=x, paths=paths, table=table,
                  spectrum=q, order=1, filler=name)
            for name in table.names
        ]
        assert max(values) - min(values) <= 1e-9 * (1.0 + max(values))


def test_bound_admissible_and_monotone_small_scenes():
    rng = np.random.default_rng(4)
    checked_pairs = 0
    for _ in range(8):
        radiograph, paths, table, q, truth = random_instance(
            rng, n_objects=3, n_materials=4, grid_px=16, order=1
        )
        omega = table.names
        # all full-assignment losses, exhaustively
        j_values = {}
        for combo in itertools.product(omega, repeat=3):
            j_values[combo] = loss(
                Assignment(combo), radiograph, paths, table, q, order=1
            ).sse
        for _ in range(10):
            n_assigned = int(rng.integers(0, 3))
            entries = [str(rng.choice(omega)) for _ in range(n_assigned)]
            entries += [None] * (3 - n_assigned)
            x = Assignment(tuple(entries))
            bx = bound(x, radiograph, paths, table, q, order=1)
            descendants = [
                combo
                for combo in j_values
                if all(e is None or e == c for e, c in zip(x.entries, combo))
            ]
            j_min = min(j_values[c] for c in descendants)
            assert bx <= j_min + 1e-9 * (1.0 + j_min)
            checked_pairs += len(descendants)
            # child bounds dominate the parent bound
            if not x.is_full:
                for child in branch(x, omega):
                    bc = bound(child, radiograph, paths, table, q, order=1)
                    assert bc >= bx - 1e-9 * (1.0 + abs(bx))
    assert checked_pairs >= 1000


# ---------------------------------------------------------------------------
# solve_topN vs the exhaustive oracle


def test_topn_matches_exhaustive_on_random_instances():
    rng = np.random.default_rng(5)
    for trial in range(25):
        radiograph, paths, table, q, truth = random_instance(rng, grid_px=16, order=1)
        n_top = int(rng.choice([1, 5, 10]))
        order = int(rng.choice([0, 1, 2]))
        got = solve_topN(
            radiograph, paths, table, q,
            SearchConfig(n_top=n_top, scatter_order=order),
        )
        want = solve_exhaustive(radiograph, paths, table, q, n_top=n_top, order=order)
        assert _ranked_key(got) == _ranked_key(want), f"trial {trial}"
        assert got.stats.full_evaluations <= table.n_materials ** paths.n_objects


def test_topn_single_best_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        radiograph, paths, table, q, truth = random_instance(rng, grid_px=12)
        got = solve_topN(radiograph, paths, table, q, SearchConfig(n_top=1, scatter_order=1))
        want = solve_exhaustive(radiograph, paths, table, q, n_top=1, order=1)
        assert _ranked_key(got) == _ranked_key(want)


def test_warm_start_preserves_ranking():
    rng = np.random.default_rng(7)
    for _ in range(6):
        radiograph, paths, table, q, truth = random_instance(
            rng, n_objects=3, n_materials=5, grid_px=16
        )
        warm = tuple(table.names[:2])
        plain = solve_topN(radiograph, paths, table, q,
                           SearchConfig(n_top=5, scatter_order=1))
        warmed = solve_topN(
            radiograph, paths, table, q,
            SearchConfig(n_top=5, scatter_order=1, warm_start_materials=warm),
        )
        assert _ranked_key(plain) == _ranked_key(warmed)
        assert warmed.stats.warm_start is not None


def test_orderings_agree():
    rng = np.random.default_rng(8)
    for _ in range(6):
        radiograph, paths, table, q, truth = random_instance(
            rng, n_objects=3, n_materials=4, grid_px=16
        )
        results = {
            ordering: solve_topN(
                radiograph, paths, table, q,
                SearchConfig(n_top=6, scatter_order=1, ordering=ordering),
            )
            for ordering in ("sorted-depth-first", "depth-first", "best-first")
        }
        keys = {name: _ranked_key(res) for name, res in results.items()}
        assert keys["depth-first"] == keys["sorted-depth-first"]
        assert keys["best-first"] == keys["sorted-depth-first"]


def test_branch_order_heuristic_keeps_results():
    rng = np.random.default_rng(9)
    for _ in range(5):
        radiograph, paths, table, q, truth = random_instance(
            rng, n_objects=3, n_materials=4, grid_px=16
        )
        scene_order = solve_topN(radiograph, paths, table, q,
                                 SearchConfig(n_top=6, scatter_order=1))
        by_area = solve_topN(
            radiograph, paths, table, q,
            SearchConfig(n_top=6, scatter_order=1, branch_order="support-area"),
        )
        assert [e.assignment.entries for e in scene_order.ranked] == [
            e.assignment.entries for e in by_area.ranked
        ]


def test_determinism_repeated_runs():
    rng = np.random.default_rng(10)
    radiograph, paths, table, q, truth = random_instance(rng, n_objects=3)
    config = SearchConfig(n_top=8, scatter_order=2)
    a = solve_topN(radiograph, paths, table, q, config)
    b = solve_topN(radiograph, paths, table, q, config)
    assert _ranked_key(a) == _ranked_key(b)
    assert a.stats.full_evaluations == b.stats.full_evaluations
    assert a.stats.bound_evaluations == b.stats.bound_evaluations


def test_parallel_width_same_ranking():
    rng = np.random.default_rng(11)
    radiograph, paths, table, q, truth = random_instance(
        rng, n_objects=3, n_materials=5, grid_px=24
    )
    serial = solve_topN(radiograph, paths, table, q,
                        SearchConfig(n_top=6, scatter_order=1))
    wide = solve_topN(radiograph, paths, table, q,
                      SearchConfig(n_top=6, scatter_order=1, parallel_width=3))
    assert [e.assignment.entries for e in serial.ranked] == [
        e.assignment.entries for e in wide.ranked
    ]
    rerun = solve_topN(radiograph, paths, table, q,
                       SearchConfig(n_top=6, scatter_order=1, parallel_width=3))
    assert _ranked_key(wide) == _ranked_key(rerun)


def test_engine_loss_matches_public_fit():
    # same J along both routes: the search engine and the plain fit
    rng = np.random.default_rng(12)
    for _ in range(8):
        radiograph, paths, table, q, truth = random_instance(rng, grid_px=16)
        res = solve_exhaustive(radiograph, paths, table, q, n_top=5, order=2)
        for entry in res.ranked:
            fit = loss(entry.assignment, radiograph, paths, table, q, order=2)
            # the engine's projected form carries an eps * ||t||^2 cancellation
            # floor on near-perfect fits
            assert entry.fit.sse == pytest.approx(fit.sse, rel=1e-9, abs=1e-11)
            if not fit.degenerate:
                assert entry.fit.alpha == pytest.approx(fit.alpha, rel=1e-6, abs=1e-9)


# ---------------------------------------------------------------------------
# solve_exhaustive


def test_exact_ties_break_lexicographically():
    # two materials with bitwise-identical attenuation force exact sse ties
    from radident.forward import Radiograph as Rad
    from radident.forward import direct, scatter_basis
    from radident.geometry import DetectorGrid, Scene, SphericalShell, trace_scene
    from radident.materials import EnergyGrid, MaterialTable, make_spectrum_response

    grid_e = EnergyGrid(np.array([1.0, 2.0]))
    mu = np.array([[0.3, 0.5], [0.8, 1.1], [0.3, 0.5], [0.05, 0.1]])
    table = MaterialTable(grid_e, ("mat_a", "mat_b", "mat_c", "mat_d"), mu)
    q = make_spectrum_response(grid_e, np.array([0.6, 0.4]))
    grid = DetectorGrid(20, 20, 0.3)
    scene = Scene(grid, 100.0, (
        SphericalShell((0.0, 0.0, 10.0), 1.0, 2.2),
        SphericalShell((0.5, -0.3, 10.0), 0.0, 0.9),
    ))
    paths = trace_scene(scene)
    rng = np.random.default_rng(3)
    t = direct(Assignment(("mat_b", "mat_a")), paths, table, q)
    t = t + 0.04 * scatter_basis(0, grid)[0]
    t = t + 0.003 * rng.standard_normal(t.shape)
    rad = Rad(t)
    oracle = solve_exhaustive(rad, paths, table, q, n_top=16, order=1)
    sses = [e.fit.sse for e in oracle.ranked]
    assert any(a == b for a, b in zip(sses, sses[1:]))  # ties really occur
    for n_top in (1, 3, 5, 8, 16):
        for ordering in ("sorted-depth-first", "depth-first", "best-first"):
            got = solve_topN(rad, paths, table, q,
                             SearchConfig(n_top=n_top, scatter_order=1,
                                          ordering=ordering))
            want = solve_exhaustive(rad, paths, table, q, n_top=n_top, order=1)
            assert _ranked_key(got) == _ranked_key(want), (n_top, ordering)
    # within a tie, the lexicographically smaller assignment ranks first
    entries = [e.assignment.entries for e in oracle.ranked]
    assert entries.index(("mat_b", "mat_a")) < entries.index(("mat_b", "mat_c"))


def test_topn_with_wide_spectrum_matches_oracle():
    # 101 energy bins instead of two
    from radident.forward import Radiograph as Rad
    from radident.forward import direct, scatter_basis
    from radident.geometry import DetectorGrid, Scene, SphericalShell, trace_scene
    from radident.materials import bremsstrahlung_spectrum, build_synthetic_table

    q = bremsstrahlung_spectrum(7.0, 101)
    table = build_synthetic_table(
        ("aluminum", "iron", "copper", "lead", "tin"), q.grid.energies
    )
    grid = DetectorGrid(24, 24, pitch_cm=0.3)
    scene = Scene(
        grid, 100.0,
        (
            SphericalShell((0.0, 0.0, 10.0), 1.5, 2.5),
            SphericalShell((0.0, 0.0, 10.0), 0.5, 1.5),
        ),
    )
    paths = trace_scene(scene)
    truth = Assignment(("aluminum", "copper"))
    rng = np.random.default_rng(21)
    t = direct(truth, paths, table, q) + 0.05 * scatter_basis(0, grid)[0]
    t = t + 0.002 * rng.standard_normal(t.shape)
    radiograph = Rad(t)
    got = solve_topN(radiograph, paths, table, q,
                     SearchConfig(n_top=5, scatter_order=2))
    want = solve_exhaustive(radiograph, paths, table, q, n_top=5, order=2)
    assert _ranked_key(got) == _ranked_key(want)
    assert got.ranked[0].assignment.entries == truth.entries


def test_exhaustive_small_counts_and_sorting():
    rng = np.random.default_rng(13)
    radiograph, paths, table, q, truth = random_instance(
        rng, n_objects=2, n_materials=3, grid_px=12
    )
    res = solve_exhaustive(radiograph, paths, table, q, n_top=9, order=1)
    assert res.stats.full_evaluations == 9
    sses = [e.fit.sse for e in res.ranked]
    assert sses == sorted(sses)


def test_interrupted_search_returns_best_so_far(monkeypatch):
    from radident import solver as solver_mod

    rng = np.random.default_rng(15)
    radiograph, paths, table, q, truth = random_instance(
        rng, n_objects=3, n_materials=5, grid_px=16
    )
    calls = {"n": 0}
    original = solver_mod._Engine.eval_children

    def flaky(self, depth, cand):
        calls["n"] += 1
        if calls["n"] > 8:
            raise KeyboardInterrupt
        return original(self, depth, cand)

    monkeypatch.setattr(solver_mod._Engine, "eval_children", flaky)
    result = solve_topN(radiograph, paths, table, q,
                        SearchConfig(n_top=5, scatter_order=1))
    assert result.stats.incomplete
    assert result.stats.full_evaluations < table.n_materials ** 3
    sses = [e.fit.sse for e in result.ranked]
    assert sses == sorted(sses)


def test_exhaustive_budget_error():
    rng = np.random.default_rng(14)
    radiograph, paths, table, q, truth = random_instance(
        rng, n_objects=3, n_materials=5, grid_px=12
    )
    with pytest.raises(BudgetError, match="branch and bound"):
        solve_exhaustive(radiograph, paths, table, q, n_top=5, order=1, budget=100)
