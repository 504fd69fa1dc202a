import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwtree.env import EnvironmentModel
from rwtree.stats import check_negmult_walk
from rwtree.walk import (
    ARTIFICIAL_PARENT,
    TreeArena,
    VertexBudgetExceeded,
    WalkTrace,
    complete_prefix,
    edge_local_times,
    excursion_times,
    run_walk,
    step_distribution,
    walk_range,
)


def star(child_marks):
    """Root at potential 0 with one child per mark."""
    parents = [-1] + [0] * len(child_marks)
    arena, ids = TreeArena.from_parents(parents, [0.0, *child_marks])
    return arena, ids


def reflected(*steps):
    return WalkTrace(np.array(steps, dtype=np.int64), "tree_reflected")


class TestStepDistribution:
    def test_leaf_returns_to_parent(self):
        arena, ids = TreeArena.from_parents([-1, 0], [0.0, 0.3])
        assert step_distribution(arena, ids[1]) == [(ids[0], 1.0)]

    def test_equal_potential_child_is_symmetric(self):
        arena, ids = star([0.0])
        assert step_distribution(arena, ids[0]) == [(ARTIFICIAL_PARENT, 0.5), (ids[1], 0.5)]

    def test_hand_evaluated_weights(self):
        arena, ids = star([0.0, math.log(2)])
        (parent, p0), (c1, p1), (c2, p2) = step_distribution(arena, ids[0])
        assert parent == ARTIFICIAL_PARENT
        assert (c1, c2) == (ids[1], ids[2])
        assert p0 == pytest.approx(0.4, abs=1e-15)
        assert p1 == pytest.approx(0.4, abs=1e-15)
        assert p2 == pytest.approx(0.2, abs=1e-15)

    def test_forest_mode_root_steps_to_next_tree(self):
        arena = TreeArena(EnvironmentModel.tabulated([(1.0, [])]), seed=0)
        first = arena.root(0)
        (target, prob), = step_distribution(arena, first, mode="forest")
        assert target == arena.root(1) and prob == 1.0

    @given(seed=st.integers(0, 2**32 - 1))
    def test_probabilities_sum_to_one(self, model15, seed):
        arena = TreeArena(model15, seed=seed)
        trace = run_walk(arena, 300, seed=seed)
        for u in walk_range(trace):
            total = sum(p for _, p in step_distribution(arena, int(u)))
            assert abs(total - 1.0) <= 2.0**-52


class TestRunWalk:
    def test_zero_steps(self, model15):
        arena = TreeArena(model15, seed=1)
        trace = run_walk(arena, 0)
        assert trace.steps.tolist() == [arena.root(0)]

    def test_negative_steps_rejected(self, model15):
        with pytest.raises(ValueError):
            run_walk(TreeArena(model15), -1)

    def test_unknown_mode(self, model15):
        with pytest.raises(ValueError):
            run_walk(TreeArena(model15), 5, mode="sideways")

    def test_flat_chain_up_fraction(self, flat_chain):
        arena = TreeArena(flat_chain, seed=3)
        steps = run_walk(arena, 1_000_000, seed=4).steps
        src, dst = steps[:-1], steps[1:]
        real = src >= 0
        up = np.where(dst[real] >= 0, arena.parent[np.maximum(dst[real], 0)] != src[real], True)
        n = int(real.sum())
        frac = up.mean()
        assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / n)

    def test_forest_walk_progresses_through_trees(self):
        dying = EnvironmentModel.tabulated([(0.6, []), (0.4, [0.0])])
        arena = TreeArena(dying, seed=5)
        trace = run_walk(arena, 20_000, mode="forest", seed=6)
        trees = arena.tree[trace.steps]
        assert np.all(np.diff(trees) >= 0)
        assert trees[-1] >= 50

    def test_steps_are_nearest_neighbour(self, model15):
        arena = TreeArena(model15, seed=8)
        s = run_walk(arena, 5000, seed=9).steps
        a, b = s[:-1], s[1:]
        ok = (a < 0) | (b < 0)
        ok |= arena.parent[np.maximum(b, 0)] == a
        ok |= arena.parent[np.maximum(a, 0)] == b
        assert ok.all()

    def test_vertex_budget(self, model15):
        arena = TreeArena(model15, seed=0, vertex_budget=50)
        with pytest.raises(VertexBudgetExceeded):
            run_walk(arena, 100_000, mode="forest", seed=1)

    def test_hand_built_arena_is_closed(self):
        arena, ids = star([0.0])
        trace = run_walk(arena, 50, seed=2)
        assert set(trace.steps.tolist()) <= {ARTIFICIAL_PARENT, ids[0], ids[1]}

    @pytest.mark.parametrize("mode", ["tree_reflected", "forest"])
    def test_determinism(self, model15, mode):
        runs = []
        for _ in range(2):
            arena = TreeArena(model15, seed=11)
            trace = run_walk(arena, 20_000, mode=mode, seed=12)
            runs.append((trace.steps, arena.V[: arena.n_vertices], arena.parent[: arena.n_vertices]))
        for first, second in zip(*runs):
            assert np.array_equal(first, second)

    def test_environment_is_quenched(self, model15):
        # the environment depends on its seed only, not on the walk
        a1, a2 = TreeArena(model15, seed=21), TreeArena(model15, seed=21)
        run_walk(a1, 3000, seed=1)
        run_walk(a2, 3000, seed=2)
        c1 = a1.children(a1.root(0))
        c2 = a2.children(a2.root(0))
        assert np.array_equal(a1.V[c1], a2.V[c2])


class TestLocalTimes:
    def test_single_crossing(self):
        arena, ids = star([0.0])
        r, c = ids
        assert edge_local_times(reflected(r, c, r), arena)[c] == 1

    def test_double_crossing(self):
        arena, ids = star([0.0])
        r, c = ids
        beta = edge_local_times(reflected(r, c, r, c, r), arena)
        assert beta[c] == 2
        assert beta[r] == 1

    def test_root_counts_returns_from_artificial_parent(self):
        arena, ids = star([0.0])
        r = ids[0]
        beta = edge_local_times(reflected(r, ARTIFICIAL_PARENT, r, ARTIFICIAL_PARENT, r), arena)
        assert beta[r] == 3

    def test_forest_roots_carry_one(self, model15):
        arena = TreeArena(model15, seed=2)
        trace = run_walk(arena, 3000, mode="forest", seed=3)
        beta = edge_local_times(trace, arena).beta
        visited = walk_range(trace)
        roots = visited[arena.parent[visited] < 0]
        assert np.all(beta[roots] == 1)

    def test_negative_multinomial_children(self):
        check = check_negmult_walk([0.0, math.log(2), -0.5], 2, 20_000, seed=4)
        assert check.passed, check.to_json()


class TestExcursions:
    def test_no_return(self):
        arena, ids = star([0.0])
        r, c = ids
        assert excursion_times(reflected(r, c, r)) == [0]

    def test_one_return(self):
        arena, ids = star([0.0])
        r = ids[0]
        assert excursion_times(reflected(r, ARTIFICIAL_PARENT, r), root=r) == [0, 2]

    def test_three_excursions_increasing(self, model15):
        arena = TreeArena(model15, seed=7)
        trace = run_walk(arena, 20_000, seed=8)
        times = excursion_times(trace)[:3]
        assert len(times) == 3
        assert times == sorted(set(times))

    def test_forest_mode_rejected(self, model15):
        trace = run_walk(TreeArena(model15), 10, mode="forest")
        with pytest.raises(ValueError):
            excursion_times(trace)


class TestRange:
    def test_start_only(self):
        arena, ids = star([0.0])
        assert walk_range(reflected(ids[0])).tolist() == [ids[0]]

    def test_hand_trace(self):
        arena, ids = star([0.0, 0.0])
        r, c, d = ids
        assert set(walk_range(reflected(r, c, r, d)).tolist()) == {r, c, d}

    def test_monotone_in_prefix(self, model15):
        trace = run_walk(TreeArena(model15, seed=3), 4000, seed=4)
        sizes = [walk_range(trace.prefix(n)).size for n in range(0, 4001, 50)]
        assert sizes == sorted(sizes)


def test_complete_prefix_stops_at_last_jump(model15):
    arena = TreeArena(model15, seed=13)
    trace = run_walk(arena, 5000, mode="forest", seed=14)
    prefix = complete_prefix(trace, arena)
    nxt = trace.steps[len(prefix)]
    assert arena.parent[nxt] < 0
    assert arena.tree[nxt] == arena.tree[prefix.steps[-1]] + 1
