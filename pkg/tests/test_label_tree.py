import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bfs_leaf_distance, parent_walk_labels, random_tree
from shacnn.cli import builtin_path
from shacnn.label_tree import TreeError, build_tree, load_tree, parse_tree

TOY = "0\troot\t-\n1\tfruit\troot\n1\tanimal\troot\n2\tapple\tfruit\n2\torange\tfruit\n2\tzebra\tanimal\n"


@pytest.fixture
def toy():
    return parse_tree(TOY)


def test_toy_tree_shape(toy):
    assert toy.levels == 2
    assert toy.num_leaves == 3
    assert toy.level_class_counts() == [2, 3]
    assert toy.class_names(1) == ["fruit", "animal"]


def test_shipped_cifar100_counts():
    tree = load_tree(builtin_path("trees", "cifar100"))
    assert tree.levels == 3
    assert tree.level_class_counts() == [8, 20, 100]


@pytest.mark.parametrize("name,counts", [
    ("toy", [2, 3]), ("synthetic", [2, 6]), ("mnist", [4, 10]), ("cifar10", [2, 7, 10]), ("cifar100_flat", [100]),
])
def test_shipped_trees(name, counts):
    assert load_tree(builtin_path("trees", name)).level_class_counts() == counts


def test_flat_tree():
    tree = build_tree([str(i) for i in range(10)])
    assert tree.level_class_counts() == [10]
    assert tree.labels_for_leaf(7) == [7]


def test_comments_and_blank_lines_ignored():
    tree = parse_tree("# header\n\n" + TOY.replace("1\tanimal", "# note\n1\tanimal"))
    assert tree.level_class_counts() == [2, 3]


@pytest.mark.parametrize("text,needle,line", [
    ("", "empty", 1),
    ("# only a comment\n", "empty", 1),
    ("0\troot\t-\n1\ta\troot\n1\ta\troot\n2\tx\ta\n", "duplicate", 3),
    ("0\troot\t-\n1\ta\troot\n2\tx\tb\n", "dangling", 3),
    ("0\troot\t-\n1\ta\troot\n1\tb\troot\n2\tx\ta\n", "non-uniform", 3),
    ("0\troot\t-\n1\ta root\n", "3 tab-separated", 2),
    ("0\troot\t-\n0\tother\t-\n", "second root", 2),
    ("0\troot\t-\nx\ta\troot\n", "integer", 2),
    ("0\troot\t-\n2\ta\troot\n", "dangling", 2),
])
def test_parse_errors(text, needle, line):
    with pytest.raises(TreeError) as err:
        parse_tree(text)
    assert needle in str(err.value)
    assert err.value.line == line


def test_non_uniform_names_leaf():
    text = "0\troot\t-\n1\tfruit\troot\n1\tlonely\troot\n2\tapple\tfruit\n"
    with pytest.raises(TreeError, match="lonely"):
        parse_tree(text)


def test_parent_must_precede_child():
    with pytest.raises(TreeError, match="dangling"):
        parse_tree("0\troot\t-\n2\tapple\tfruit\n1\tfruit\troot\n")


def test_names_unique_only_within_level():
    tree = parse_tree("0\troot\t-\n1\tbird\troot\n2\tbird\tbird\n")
    assert tree.level_class_counts() == [1, 1]


def test_labels_for_leaf(toy):
    assert toy.labels_for_leaf(0) == [0, 0]
    assert toy.labels_for_leaf(1) == [0, 1]
    assert toy.labels_for_leaf(2) == [1, 2]
    with pytest.raises(IndexError):
        toy.labels_for_leaf(3)
    with pytest.raises(IndexError):
        toy.labels_for_leaf(-1)


def test_labels_match_parent_walk_on_random_trees():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        tree = random_tree(rng)
        fine = int(rng.integers(tree.num_leaves))
        assert tree.labels_for_leaf(fine) == parent_walk_labels(tree, fine)
        checked += 1


def test_leaf_distance_examples(toy):
    assert toy.leaf_distance(1, 1) == 0
    assert toy.leaf_distance(0, 1) == 2 == bfs_leaf_distance(toy, 0, 1)
    assert toy.leaf_distance(0, 2) == 4 == bfs_leaf_distance(toy, 0, 2)
    with pytest.raises(IndexError):
        toy.leaf_distance(0, 9)


def test_leaf_distance_matches_bfs_and_lca_formula():
    rng = np.random.default_rng(1)
    pairs = 0
    while pairs < 1000:
        tree = random_tree(rng)
        a, b = (int(v) for v in rng.integers(tree.num_leaves, size=2))
        d = tree.leaf_distance(a, b)
        assert d == bfs_leaf_distance(tree, a, b)
        la, lb = parent_walk_labels(tree, a), parent_walk_labels(tree, b)
        lca_level = next((i for i in range(tree.levels) if la[i] != lb[i]), tree.levels)
        assert d == 2 * (tree.levels - lca_level)
        pairs += 1


def test_vectorised_distances_agree():
    rng = np.random.default_rng(2)
    tree = random_tree(rng, min_levels=3)
    a = rng.integers(tree.num_leaves, size=200)
    b = rng.integers(tree.num_leaves, size=200)
    expect = [tree.leaf_distance(int(x), int(y)) for x, y in zip(a, b)]
    assert tree.leaf_distances(a, b).tolist() == expect


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_distance_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    a, b, c = (int(v) for v in rng.integers(tree.num_leaves, size=3))
    d = tree.leaf_distance
    assert d(a, b) == d(b, a)
    assert (d(a, b) == 0) == (a == b)
    assert d(a, c) <= d(a, b) + d(b, c)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_serialise_round_trip(seed):
    tree = random_tree(np.random.default_rng(seed))
    again = parse_tree(tree.to_text())
    assert again.to_text() == tree.to_text()
    assert [(n.name, n.parent, n.level) for n in again.nodes] == [(n.name, n.parent, n.level) for n in tree.nodes]
    assert again.leaf_index == tree.leaf_index


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ancestor_chain_consistent(seed):
    tree = random_tree(np.random.default_rng(seed))
    for fine in range(tree.num_leaves):
        labels = tree.labels_for_leaf(fine)
        assert labels[-1] == fine
        for lvl in range(1, tree.levels):
            child = tree.node_for_class(lvl + 1, labels[lvl])
            parent = tree.node_for_class(lvl, labels[lvl - 1])
            assert child.parent == parent.id


def test_levels_partition_leaves():
    tree = random_tree(np.random.default_rng(3), min_levels=3)
    table = tree.level_label_matrix(range(tree.num_leaves))
    for lvl, count in enumerate(tree.level_class_counts()):
        assert sorted(set(table[:, lvl].tolist())) == list(range(count))


def test_coarse_level_pragma():
    tree = parse_tree("#@ coarse_level 1\n" + TOY)
    assert tree.coarse_level == 1
    assert parse_tree(tree.to_text()).coarse_level == 1
    with pytest.raises(TreeError, match="pragma"):
        parse_tree("#@ colour red\n" + TOY)
