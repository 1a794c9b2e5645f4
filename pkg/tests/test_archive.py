import numpy as np
import pytest
from hypothesis import given, strategies as st

from qdvox import controller as ctl
from qdvox import morphology as morph
from qdvox.archive import (Archive, Individual, inherits_pollination, load_archive, niche_of,
                           pooled_best, qd_metrics, reliability, save_archive)


def ind(i, fitness, cell, parent=None, kind="body", flag=False):
    return Individual(i, parent, None, None, fitness, tuple(cell), kind, flag, 0)


def real_individual(i, rng, fitness=1.0, cell=(0, 0)):
    g = morph.initial_genome(rng)
    return Individual(i, None, g, ctl.init_params(12, 2, rng), fitness, cell, "seed", False, 0, (2, 1))


# ---------------------------------------------------------------- binning

@pytest.mark.parametrize("desc,cell", [((100, 100), (9, 9)), ((25, 7), (2, 0)), ((1, 0), (0, 0))])
def test_niche_examples(desc, cell):
    assert niche_of(desc, (10, 10), 100) == cell


def test_niche_matches_bin_edges_everywhere():
    arch = Archive((10, 10), 100)
    e1, e2 = (np.array(b) for b in arch.bin_bounds)
    for total in range(1, 101):
        for active in range(total + 1):
            # half-open bins [e_k, e_{k+1}) over [0, W*H+1)
            want = (int(np.searchsorted(e1, total, side="right")) - 1,
                    int(np.searchsorted(e2, active, side="right")) - 1)
            assert arch.niche_of((total, active)) == want


@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 8), st.integers(1, 8), st.data())
def test_niche_in_range_and_monotone(w, h, d1, d2, data):
    cells = w * h
    total = data.draw(st.integers(1, cells))
    active = data.draw(st.integers(0, total))
    i, j = niche_of((total, active), (d1, d2), cells)
    assert 0 <= i < d1 and 0 <= j < d2
    if total < cells:
        assert niche_of((total + 1, active), (d1, d2), cells)[0] >= i


# -------------------------------------------------------------- insertion

def test_empty_cell_accepts_with_migration_flag():
    a = Archive((3, 3), 9)
    out = a.try_insert(ind(1, 0.5, (1, 1)), parent_cell=(1, 1))
    assert out.status == "new" and out.migration is None
    out = a.try_insert(ind(2, 0.1, (0, 2)), parent_cell=(1, 1), generation=4)
    assert out.status == "new"
    m = out.migration
    assert (m.from_cell, m.to_cell, m.offspring_id, m.generation) == ((1, 1), (0, 2), 2, 4)
    assert m.subtype == "fill" and m.displaced_fitness is None


def test_elitism_and_strict_ties():
    a = Archive((3, 3), 9)
    a.try_insert(ind(1, 5.0, (0, 0)), None)
    assert a.try_insert(ind(2, 4.9, (0, 0)), (1, 0)).status == "rejected"
    assert a.try_insert(ind(3, 5.0, (0, 0)), (1, 0)).status == "rejected"
    out = a.try_insert(ind(4, 5.5, (0, 0)), (1, 0))
    assert out.status == "replace" and out.displaced_fitness == 5.0
    assert out.migration.subtype == "replace"
    assert a[(0, 0)].id == 4


def test_seed_offers_never_migrate():
    a = Archive((3, 3), 9)
    assert a.try_insert(ind(1, 1.0, (2, 2)), None).migration is None


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2), st.integers(0, 2),
                          st.floats(0.0, 10.0)), min_size=1, max_size=60))
def test_cells_hold_running_max_and_migrations_recount(offers):
    a = Archive((3, 3), 9)
    best = {}
    migrations = 0
    recount = 0
    for k, (i, j, pi, pj, f) in enumerate(offers):
        prior = best.get((i, j))
        out = a.try_insert(ind(k, f, (i, j)), (pi, pj))
        accepted = prior is None or f > prior
        assert out.accepted == accepted
        if accepted:
            best[(i, j)] = f
            recount += (i, j) != (pi, pj)
        migrations += out.migration is not None
    assert {c: x.fitness for c, x in a.cells.items()} == best
    assert migrations == recount
    assert a.occupied() == sorted(best)


def test_put_overwrites():
    a = Archive((2, 2), 4)
    a.try_insert(ind(1, 9.0, (0, 0)), None)
    a.put(ind(2, 1.0, (0, 0)))
    assert a[(0, 0)].id == 2


def test_pollination_flag_inheritance():
    parent = ind(1, 1.0, (0, 0), flag=True)
    assert inherits_pollination(parent, "body")
    assert inherits_pollination(ind(2, 1.0, (0, 0)), "pollinated")
    assert not inherits_pollination(ind(3, 1.0, (0, 0)), "brain")
    assert not inherits_pollination(None, "seed")


# --------------------------------------------------------------- metrics

def test_qd_metrics():
    a = Archive((3, 3), 9)
    assert qd_metrics(a) == (0, 0.0, 0.0)
    a.put(ind(1, 2.0, (0, 0)))
    a.put(ind(2, 3.0, (1, 2)))
    assert qd_metrics(a) == (2, 5.0, 3.0)
    grid = a.fitness_grid()
    assert grid[1, 2] == 3.0 and np.isnan(grid).sum() == 7
    assert a.best().id == 2


def test_full_archive_collection_size():
    a = Archive((10, 10), 100)
    for i in range(10):
        for j in range(10):
            a.put(ind(10 * i + j, 1.0, (i, j)))
    assert qd_metrics(a)[0] == 100


def test_reliability_examples():
    full = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert reliability([full], pooled_best([full])) == [1.0]
    half = np.array([[1.0, 2.0], [np.nan, np.nan]])
    assert reliability([half], full) == [0.5]


def test_reliability_two_run_table():
    r1 = np.array([[2.0, np.nan], [1.0, 0.0]])
    r2 = np.array([[4.0, 3.0], [np.nan, 0.0]])
    best = pooled_best([r1, r2])
    np.testing.assert_array_equal(best, [[4.0, 3.0], [1.0, 0.0]])
    # the pooled-zero cell is excluded; three usable cells remain
    assert reliability([r1, r2], best) == pytest.approx([(0.5 + 0 + 1.0) / 3, (1.0 + 1.0 + 0) / 3])
    assert reliability([r1, r2], best, opt_in=True) == pytest.approx([(0.5 + 1.0) / 2, 1.0])


def test_pooled_best_keeps_never_filled_cells_empty():
    best = pooled_best([np.array([[np.nan, 1.0]]), np.array([[np.nan, 2.0]])])
    assert np.isnan(best[0, 0]) and best[0, 1] == 2.0


# ------------------------------------------------------------ checkpoints

def test_save_load_roundtrip(tmp_path, rng):
    a = Archive((3, 3), 9)
    for k, cell in enumerate([(0, 0), (2, 1), (1, 2)]):
        a.put(real_individual(k, rng, fitness=0.1 * (k + 1), cell=cell))
    save_archive(a, tmp_path / "arch")
    b = load_archive(tmp_path / "arch")
    assert b.dims == a.dims and b.occupied() == a.occupied()
    for c in a.occupied():
        x, y = a[c], b[c]
        assert (x.id, x.fitness, x.descriptor, x.mutation_kind) == (y.id, y.fitness, y.descriptor, y.mutation_kind)
        assert x.genome_sha() == y.genome_sha() and x.params_sha() == y.params_sha()
