import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwtree.height import (
    CodedTree,
    ForestMetric,
    SparseTable,
    gh_upper_bound,
    height_process,
    lukasiewicz,
    normalization,
    phi_index_map,
    rescale,
)
from rwtree.reduce import LeafedForest, build_FR, visited_forest
from rwtree.walk import TreeArena, complete_prefix, run_walk


def leafed(parent, ty=None, ell=None):
    parent = np.asarray(parent, dtype=np.int64)
    n = parent.shape[0]
    ty = np.ones(n, np.int8) if ty is None else np.asarray(ty, np.int8)
    ell = np.where(parent >= 0, 1, 0) if ell is None else np.asarray(ell)
    return LeafedForest(parent, ty, np.asarray(ell, np.int64), np.arange(n))


@st.composite
def preorder_forests(draw, max_size=60):
    """Parent arrays of forests listed in depth-first order, with lengths."""
    n = draw(st.integers(1, max_size))
    parent = [-1]
    stack = [0]
    for v in range(1, n):
        # attach to some vertex on the current root-to-leaf path, or start a new tree
        depth = draw(st.integers(-1, len(stack) - 1))
        if depth < 0:
            parent.append(-1)
            stack = [v]
        else:
            parent.append(stack[depth])
            stack = stack[: depth + 1] + [v]
    ell = [0 if p < 0 else draw(st.integers(0, 5)) for p in parent]
    return np.array(parent), np.array(ell)


class TestHeightProcess:
    def test_path_with_unit_lengths(self):
        assert height_process(leafed([-1, 0, 1]), "all").values.tolist() == [0, 1, 2]

    def test_three_single_vertices(self):
        assert height_process(leafed([-1, -1, -1]), "all").values.tolist() == [0, 0, 0]

    def test_type_one_restriction(self):
        forest = leafed([-1, 0, 0, 2], ty=[1, 0, 1, 1], ell=[0, 4, 3, 2])
        assert height_process(forest, "type1").values.tolist() == [0, 1, 2]

    def test_unknown_restriction(self):
        with pytest.raises(ValueError):
            height_process(leafed([-1]), "sideways")

    @given(preorder_forests())
    def test_weighted_height_is_ancestry_sum(self, forest):
        parent, ell = forest
        got = height_process(leafed(parent, ell=ell), "all").values
        for v in range(parent.shape[0]):
            total, u = 0, v
            while parent[u] >= 0:
                total += ell[u]
                u = parent[u]
            assert got[v] == total

    @given(preorder_forests())
    def test_unit_lengths_give_plain_heights(self, forest):
        parent, _ = forest
        f = leafed(parent)
        assert np.array_equal(height_process(f, "all").values, height_process(f, "plain").values)


class TestLukasiewicz:
    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_single_vertex_trees(self, k):
        assert lukasiewicz(leafed([-1] * k)).values.tolist() == list(range(0, -k - 1, -1))

    def test_root_with_three_leaves(self):
        assert lukasiewicz(leafed([-1, 0, 0, 0])).values.tolist() == [0, 2, 1, 0, -1]

    @given(preorder_forests())
    def test_block_minimum_is_minus_tree_index(self, forest):
        parent, _ = forest
        S = lukasiewicz(leafed(parent)).values
        starts = list(np.nonzero(parent < 0)[0]) + [parent.shape[0]]
        for j in range(len(starts) - 1):
            block = S[starts[j]: starts[j + 1]]
            assert block[0] == -j
            assert block.min() == -j
        assert S[-1] == -(len(starts) - 1)

    @given(preorder_forests())
    def test_record_times(self, forest):
        parent, _ = forest
        path = lukasiewicz(leafed(parent))
        S = path.values
        for t in path.record_times:
            assert np.all(S[t] > S[:t])


class TestPhiIndexMap:
    def test_all_type_one_is_identity(self):
        assert phi_index_map(leafed([-1, 0, 0, 1, -1])).tolist() == [0, 1, 2, 3, 4]

    def test_alternating_types(self):
        forest = leafed([-1, 0, 0, 2, 2, 0, -1, 6], ty=[1, 0, 1, 0, 1, 0, 1, 0])
        # type-1 vertices 0, 2, 4, 6 get indices 0..3; type-0 vertices take their parent's
        assert phi_index_map(forest).tolist() == [0, 0, 1, 1, 2, 0, 3, 3]

    def test_type_zero_root_rejected(self):
        with pytest.raises(ValueError):
            phi_index_map(leafed([-1], ty=[0]))


class TestRescale:
    def test_kappa_one_and_a_half(self):
        assert normalization(1e4, 1.5) == pytest.approx(21.544, abs=5e-4)

    def test_kappa_two(self):
        # (n / ln n)^(1/2) at n = e^2 is (e^2 / 2)^(1/2)
        assert normalization(math.e**2, 2.0) == pytest.approx(math.e / math.sqrt(2), rel=1e-14)

    def test_zero_series(self):
        assert np.all(rescale(np.zeros(7), 100, 1.5) == 0)

    @pytest.mark.parametrize("kappa", [1.0, 2.5])
    def test_kappa_out_of_range(self, kappa):
        with pytest.raises(ValueError):
            normalization(100, kappa)


class TestSparseTable:
    @given(st.lists(st.integers(-50, 50), min_size=1, max_size=80), st.data())
    def test_matches_brute_force(self, values, data):
        table = SparseTable(values)
        lo = data.draw(st.integers(0, len(values) - 1))
        hi = data.draw(st.integers(lo, len(values) - 1))
        window = values[lo: hi + 1]
        assert table.argmin(lo, hi) == lo + window.index(min(window))


@given(st.lists(st.floats(0, 100), min_size=2, max_size=200), st.integers(0, 2**32 - 1))
def test_coded_tree_pseudometric(driver, seed):
    tree = CodedTree(driver)
    rng = np.random.default_rng(seed)
    s, t, u = rng.integers(0, len(driver), (3, 10_000))
    d_st, d_ts = tree.dist(s, t), tree.dist(t, s)
    tol = 1e-9 * max(driver)
    assert np.all(d_st >= -tol)
    assert np.array_equal(d_st, d_ts)
    assert np.all(tree.dist(s, u) <= d_st + tree.dist(t, u) + tol)


class TestGromovHausdorff:
    def test_identical_trees(self):
        tree = ForestMetric([-1, 0, 0, 1, 3])
        assert gh_upper_bound(tree, tree, np.arange(5)) == 0.0

    @pytest.mark.parametrize("length", [1, 4, 10])
    def test_paths_differing_by_one(self, length):
        long_path = ForestMetric(np.arange(length + 1) - 1)
        short_path = ForestMetric(np.arange(length) - 1)
        natural = np.minimum(np.arange(length + 1), length - 1)
        assert gh_upper_bound(long_path, short_path, natural) <= 0.5

    def test_map_must_be_onto(self):
        tree = ForestMetric([-1, 0, 0])
        with pytest.raises(ValueError):
            gh_upper_bound(tree, tree, np.array([0, 1, 1]))

    def test_map_must_preserve_root(self):
        tree = ForestMetric([-1, 0, 0])
        with pytest.raises(ValueError):
            gh_upper_bound(tree, tree, np.array([1, 0, 2]))

    def test_range_against_reduced_tree(self, model15):
        arena = TreeArena(model15, seed=41)
        trace = run_walk(arena, 20_000, "forest", seed=42)
        forest = visited_forest(complete_prefix(trace, arena), arena, complete=True)
        fr = build_FR(forest)
        anchor = forest.type1_anchor()
        starts = list(np.nonzero(forest.parent < 0)[0]) + [len(forest)]
        tested = 0
        for lo, hi in zip(starts[:-1], starts[1:]):
            if hi - lo < 5:
                continue
            keep = (fr.origin >= lo) & (fr.origin < hi)
            shift = np.nonzero(keep)[0][0]
            reduced = LeafedForest(np.where(fr.parent[keep] >= 0, fr.parent[keep] - shift, -1),
                                   fr.ty[keep], fr.ell[keep], fr.origin[keep] - lo)
            original = ForestMetric(np.where(forest.parent[lo:hi] >= 0, forest.parent[lo:hi] - lo, -1))
            # each vertex of the range goes to its own copy in the reduced tree
            position = np.empty(hi - lo, dtype=np.int64)
            position[reduced.origin] = np.arange(hi - lo)
            bound = gh_upper_bound(original, ForestMetric.of(reduced), position)
            gap = forest.depth[lo:hi] - forest.depth[np.maximum(anchor[lo:hi], lo)]
            assert bound <= gap.max()
            tested += 1
        assert tested >= 3
