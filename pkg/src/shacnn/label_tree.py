"""Label trees: parsing, validation and queries over a uniform-depth class hierarchy.

Tree files are UTF-8 and line oriented::

    # comment
    0	root	-
    1	fruit	root
    2	apple	fruit

Each node line is ``level<TAB>name<TAB>parent-name``.  The root uses ``-`` as
its parent and every node must appear after its parent.  Fine-class indices
follow the order in which leaves appear, and class indices at every other
level follow the order of appearance within that level.

A comment of the form ``#@ key value`` is a pragma; the only one understood is
``#@ coarse_level <n>``, which declares that a dataset's stored coarse label
corresponds to the class index at level ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROOT_PARENT = "-"


class TreeError(ValueError):
    """Invalid tree document; ``line`` is 1-based, or None when not tied to a line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.reason = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    parent: int | None
    level: int
    line: int | None = None


@dataclass(frozen=True)
class LabelTree:
    nodes: tuple[Node, ...]
    levels: int
    leaf_index: tuple[int, ...]
    coarse_level: int | None = None
    # derived tables, filled in __post_init__
    _level_nodes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    _class_of: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _ancestors: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        level_nodes: list[list[int]] = [[] for _ in range(self.levels + 1)]
        class_of = [0] * len(self.nodes)
        for node in self.nodes:
            class_of[node.id] = len(level_nodes[node.level])
            level_nodes[node.level].append(node.id)
        object.__setattr__(self, "_level_nodes", tuple(tuple(ids) for ids in level_nodes))
        object.__setattr__(self, "_class_of", tuple(class_of))

        table = np.zeros((len(self.leaf_index), self.levels), dtype=np.int64)
        for fine, node_id in enumerate(self.leaf_index):
            cur = node_id
            while self.nodes[cur].level > 0:
                table[fine, self.nodes[cur].level - 1] = class_of[cur]
                cur = self.nodes[cur].parent
        table.setflags(write=False)
        object.__setattr__(self, "_ancestors", table)

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_index)

    def level_class_counts(self) -> list[int]:
        return [len(self._level_nodes[lvl]) for lvl in range(1, self.levels + 1)]

    def class_names(self, level: int) -> list[str]:
        """Names of the classes at ``level`` (1-based), in class-index order."""
        return [self.nodes[i].name for i in self._level_nodes[level]]

    def node_for_class(self, level: int, index: int) -> Node:
        return self.nodes[self._level_nodes[level][index]]

    def class_index(self, node_id: int) -> int:
        return self._class_of[node_id]

    def _check_fine(self, fine_class: int) -> None:
        if not 0 <= fine_class < self.num_leaves:
            raise IndexError(f"fine class {fine_class} out of range [0, {self.num_leaves})")

    def labels_for_leaf(self, fine_class: int) -> list[int]:
        """Class index of the leaf's ancestor at each level 1..L; the last entry is ``fine_class``."""
        self._check_fine(fine_class)
        return [int(v) for v in self._ancestors[fine_class]]

    def level_label_matrix(self, fine_labels: Iterable[int]) -> np.ndarray:
        """Vectorised ``labels_for_leaf``: returns an (N, L) int array."""
        fine = np.asarray(fine_labels, dtype=np.int64)
        if fine.size and (fine.min() < 0 or fine.max() >= self.num_leaves):
            raise IndexError(f"fine labels must lie in [0, {self.num_leaves})")
        return self._ancestors[fine]

    def leaf_distance(self, a: int, b: int) -> int:
        """Edge count of the tree path between two leaves."""
        self._check_fine(a)
        self._check_fine(b)
        if a == b:
            return 0
        pa, pb = self._ancestors[a], self._ancestors[b]
        shared = 0
        while shared < self.levels and pa[shared] == pb[shared]:
            shared += 1
        return 2 * (self.levels - shared)

    def leaf_distances(self, a: Sequence[int], b: Sequence[int]) -> np.ndarray:
        """Element-wise ``leaf_distance`` over two equal-length index arrays."""
        pa = self.level_label_matrix(a)
        pb = self.level_label_matrix(b)
        if pa.shape != pb.shape:
            raise ValueError("index arrays differ in length")
        # ancestors agree on a prefix of levels, so the shared depth is the prefix length
        shared = np.cumprod(pa == pb, axis=1).sum(axis=1)
        return 2 * (self.levels - shared)

    def to_text(self) -> str:
        lines = []
        if self.coarse_level is not None:
            lines.append(f"#@ coarse_level {self.coarse_level}")
        for node in self.nodes:
            parent = ROOT_PARENT if node.parent is None else self.nodes[node.parent].name
            lines.append(f"{node.level}\t{node.name}\t{parent}")
        return "\n".join(lines) + "\n"


def _pragma(body: str, lineno: int) -> tuple[str, str]:
    parts = body.split()
    if len(parts) != 2:
        raise TreeError(f"malformed pragma {body!r}", lineno)
    return parts[0], parts[1]


def parse_tree(text: str) -> LabelTree:
    """Parse and validate a tree document.  Raises TreeError with a line number."""
    nodes: list[Node] = []
    by_name: dict[tuple[int, str], int] = {}
    coarse_level = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#@"):
            key, value = _pragma(stripped[2:], lineno)
            if key != "coarse_level":
                raise TreeError(f"unknown pragma {key!r}", lineno)
            try:
                coarse_level = int(value)
            except ValueError:
                raise TreeError(f"coarse_level must be an integer, got {value!r}", lineno) from None
            continue
        if stripped.startswith("#"):
            continue

        fields = line.split("\t")
        if len(fields) != 3:
            raise TreeError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
        level_s, name, parent_name = (f.strip() for f in fields)
        try:
            level = int(level_s)
        except ValueError:
            raise TreeError(f"level must be an integer, got {level_s!r}", lineno) from None
        if not name:
            raise TreeError("empty node name", lineno)
        if level < 0:
            raise TreeError(f"negative level {level}", lineno)

        if parent_name == ROOT_PARENT:
            if level != 0:
                raise TreeError(f"node {name!r} has no parent but is at level {level}", lineno)
            if nodes and any(n.parent is None for n in nodes):
                raise TreeError(f"second root {name!r}", lineno)
            parent = None
        else:
            if level == 0:
                raise TreeError(f"level-0 node {name!r} must use '-' as parent", lineno)
            key = (level - 1, parent_name)
            if key not in by_name:
                raise TreeError(
                    f"dangling parent {parent_name!r} for node {name!r} "
                    f"(no level-{level - 1} node of that name appears earlier)",
                    lineno,
                )
            parent = by_name[key]

        if (level, name) in by_name:
            raise TreeError(f"duplicate node {name!r} at level {level}", lineno)
        node = Node(id=len(nodes), name=name, parent=parent, level=level, line=lineno)
        by_name[(level, name)] = node.id
        nodes.append(node)

    if not nodes:
        raise TreeError("empty document: no nodes", 1)

    has_child = [False] * len(nodes)
    for n in nodes:
        if n.parent is not None:
            has_child[n.parent] = True
    if not has_child[0] and len(nodes) == 1:
        raise TreeError("tree has only a root; at least one class level is required", nodes[0].line)

    depth = max(n.level for n in nodes)
    leaves = [n for n in nodes if not has_child[n.id]]
    for leaf in leaves:
        if leaf.level != depth:
            raise TreeError(
                f"non-uniform leaf depth: leaf {leaf.name!r} is at level {leaf.level}, "
                f"expected {depth}",
                leaf.line,
            )
    if coarse_level is not None and not 1 <= coarse_level <= depth:
        raise TreeError(f"coarse_level {coarse_level} outside 1..{depth}")

    return LabelTree(
        nodes=tuple(nodes),
        levels=depth,
        leaf_index=tuple(leaf.id for leaf in leaves),
        coarse_level=coarse_level,
    )


def load_tree(path: str | Path) -> LabelTree:
    return parse_tree(Path(path).read_text(encoding="utf-8"))


def level_class_counts(tree: LabelTree) -> list[int]:
    return tree.level_class_counts()


def labels_for_leaf(tree: LabelTree, fine_class: int) -> list[int]:
    return tree.labels_for_leaf(fine_class)


def leaf_distance(tree: LabelTree, a: int, b: int) -> int:
    return tree.leaf_distance(a, b)


def build_tree(spec: dict[str, dict | list | None], root: str = "root") -> LabelTree:
    """Build a tree from nested mappings, e.g. ``{"fruit": ["apple", "orange"], "animal": ["zebra"]}``.

    Nodes are emitted level by level so that class indices follow insertion order.
    """
    rows: list[tuple[int, str, str]] = [(0, root, ROOT_PARENT)]
    frontier: list[tuple[str, dict | list | None]] = [(root, spec)]
    level = 0
    while frontier:
        level += 1
        nxt = []
        for parent, children in frontier:
            if children is None:
                continue
            items = children.items() if isinstance(children, dict) else ((c, None) for c in children)
            for name, sub in items:
                rows.append((level, name, parent))
                nxt.append((name, sub))
        frontier = nxt
    return parse_tree("".join(f"{lv}\t{n}\t{p}\n" for lv, n, p in rows))
