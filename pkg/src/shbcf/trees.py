"""Binary decision trees, forests and the cutpoint grid shared by every sampler.

The samplers in :mod:`shbcf.bart` keep trees in flat heap-indexed arrays for
speed; the node objects defined here are the published, immutable view of
those arrays (see :func:`forest_from_arrays`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError

__all__ = [
    "SplitRule",
    "TreeNode",
    "Forest",
    "CutpointGrid",
    "predict",
    "predict_many",
    "depth_prior_nonterminal",
    "leaf_assignments",
    "build_cutpoints",
    "forest_from_arrays",
]


@dataclass(frozen=True)
class SplitRule:
    """Send ``x`` left when ``x[covariate_index] <= threshold``."""

    covariate_index: int
    threshold: float

    def goes_left(self, x: np.ndarray) -> bool:
        return bool(x[self.covariate_index] <= self.threshold)


@dataclass(frozen=True)
class TreeNode:
    """Either a leaf carrying ``value`` or an internal node with two children."""

    depth: int = 0
    value: float = 0.0
    split: SplitRule | None = None
    left: TreeNode | None = None
    right: TreeNode | None = None

    def __post_init__(self):
        internal = self.split is not None
        if internal != (self.left is not None) or internal != (self.right is not None):
            raise InputError("internal nodes need a split and two children; leaves need none")
        if internal and (self.left.depth != self.depth + 1 or self.right.depth != self.depth + 1):
            raise InputError("child depth must be parent depth + 1")

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    def leaves(self) -> list[TreeNode]:
        """Leaves in left-to-right order."""
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def internal_nodes(self) -> list[TreeNode]:
        if self.is_leaf:
            return []
        return [self] + self.left.internal_nodes() + self.right.internal_nodes()

    def max_depth(self) -> int:
        if self.is_leaf:
            return self.depth
        return max(self.left.max_depth(), self.right.max_depth())

    def find_leaf(self, x: np.ndarray) -> TreeNode:
        node = self
        while not node.is_leaf:
            node = node.left if node.split.goes_left(x) else node.right
        return node


@dataclass(frozen=True)
class Forest:
    """An ordered sum of trees over ``n_features`` predictors."""

    trees: tuple[TreeNode, ...]
    n_features: int
    depth_prior: tuple[float, float] = (0.95, 2.0)

    def __post_init__(self):
        if len(self.trees) < 1:
            raise InputError("a forest needs at least one tree")
        object.__setattr__(self, "trees", tuple(self.trees))

    @property
    def m(self) -> int:
        return len(self.trees)

    def split_counts(self) -> np.ndarray:
        """Number of internal nodes splitting on each covariate."""
        counts = np.zeros(self.n_features, dtype=np.int64)
        for tree in self.trees:
            for node in tree.internal_nodes():
                counts[node.split.covariate_index] += 1
        return counts


def _check_x(forest: Forest, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != forest.n_features:
        raise InputError(
            f"expected a covariate vector of length {forest.n_features}, got shape {x.shape}"
        )
    return x


def predict(forest: Forest, x) -> float:
    """Sum of the leaf values reached by ``x`` in every tree."""
    x = _check_x(forest, x)
    return float(sum(tree.find_leaf(x).value for tree in forest.trees))


def predict_many(forest: Forest, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != forest.n_features:
        raise InputError(f"expected {forest.n_features} columns, got {X.shape[1]}")
    return np.array([predict(forest, row) for row in X])


def depth_prior_nonterminal(depth: int, nu: float, beta: float) -> float:
    """Prior probability that a node at ``depth`` splits: ``nu * (1 + beta) ** -depth``."""
    if depth < 0:
        raise ConfigurationError(f"depth must be >= 0, got {depth}")
    if not 0.0 < nu < 1.0:
        raise ConfigurationError(f"nu must lie in (0, 1), got {nu}")
    if beta < 0.0:
        raise ConfigurationError(f"beta must be >= 0, got {beta}")
    return nu * (1.0 + beta) ** (-depth)


def leaf_assignments(tree: TreeNode, X) -> np.ndarray:
    """Index (left-to-right leaf order) of the leaf each row of ``X`` falls in."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise InputError("X must have at least one row")
    ids = {id(leaf): k for k, leaf in enumerate(tree.leaves())}
    try:
        return np.array([ids[id(tree.find_leaf(row))] for row in X], dtype=np.int64)
    except IndexError as exc:
        raise InputError("X has fewer columns than the tree's split rules reference") from exc


@dataclass
class CutpointGrid:
    """Sorted candidate thresholds for every covariate.

    A covariate with no thresholds (a single distinct value) is unusable and
    never proposed as a splitting variable.
    """

    cuts: list[np.ndarray]
    binary: np.ndarray = field(default=None)

    def __post_init__(self):
        self.cuts = [np.asarray(c, dtype=float) for c in self.cuts]
        if self.binary is None:
            self.binary = np.zeros(len(self.cuts), dtype=bool)
        for c in self.cuts:
            if c.size > 1 and not np.all(np.diff(c) > 0):
                raise InputError("cutpoints must be strictly increasing")

    @property
    def n_features(self) -> int:
        return len(self.cuts)

    @property
    def n_cuts(self) -> np.ndarray:
        return np.array([c.size for c in self.cuts], dtype=np.int32)

    @property
    def usable(self) -> np.ndarray:
        return self.n_cuts > 0

    def bin(self, X) -> np.ndarray:
        """Bin codes, shape ``(p, n)``: code ``b`` means ``x <= cuts[c]`` exactly when ``b <= c``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise InputError(f"expected {self.n_features} columns, got {X.shape[1]}")
        out = np.empty((self.n_features, X.shape[0]), dtype=np.int32)
        for v, c in enumerate(self.cuts):
            out[v] = np.searchsorted(c, X[:, v], side="left")
        return out

    def threshold(self, covariate: int, cut_index: int) -> float:
        return float(self.cuts[covariate][cut_index])

    def extended(self, other: CutpointGrid) -> CutpointGrid:
        """Grid over this grid's covariates followed by ``other``'s."""
        return CutpointGrid(self.cuts + other.cuts, np.concatenate([self.binary, other.binary]))


def build_cutpoints(X, max_cuts: int = 100) -> CutpointGrid:
    """Quantile-midpoint thresholds per column.

    Binary ``{0, 1}`` columns get the single threshold 0.5. Other columns get
    ``min(max_cuts, distinct - 1)`` midpoints between consecutive sorted
    distinct values, evenly spaced in rank when there are more than
    ``max_cuts`` candidates.
    """
    if max_cuts < 1:
        raise ConfigurationError(f"max_cuts must be >= 1, got {max_cuts}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cuts = []
    binary = np.zeros(X.shape[1], dtype=bool)
    for v in range(X.shape[1]):
        distinct = np.unique(X[:, v])
        if distinct.size < 2:
            cuts.append(np.empty(0))
            continue
        if distinct.size == 2 and distinct[0] == 0.0 and distinct[1] == 1.0:
            binary[v] = True
            cuts.append(np.array([0.5]))
            continue
        mids = 0.5 * (distinct[:-1] + distinct[1:])
        if mids.size > max_cuts:
            pick = np.unique(np.round(np.linspace(0, mids.size - 1, max_cuts)).astype(int))
            mids = mids[pick]
        cuts.append(mids)
    return CutpointGrid(cuts, binary)


def _heap_to_node(var, cut, value, state, grid, i, depth):
    if state[i] == 2:
        v = int(var[i])
        rule = SplitRule(v, grid.threshold(v, int(cut[i])))
        return TreeNode(
            depth=depth,
            split=rule,
            left=_heap_to_node(var, cut, value, state, grid, 2 * i + 1, depth + 1),
            right=_heap_to_node(var, cut, value, state, grid, 2 * i + 2, depth + 1),
        )
    return TreeNode(depth=depth, value=float(value[i]))


def forest_from_arrays(var, cut, value, state, grid: CutpointGrid, depth_prior=(0.95, 2.0),
                       scale: float = 1.0, shift: float = 0.0) -> Forest:
    """Convert the sampler's heap arrays (one row per tree) into node objects.

    Leaf values are mapped through ``scale * value + shift / m`` so that the
    forest predicts on the caller's outcome scale.
    """
    m = var.shape[0]
    trees = []
    for j in range(m):
        vals = np.asarray(value[j], dtype=float) * scale + shift / m
        trees.append(_heap_to_node(var[j], cut[j], vals, state[j], grid, 0, 0))
    return Forest(tuple(trees), grid.n_features, depth_prior)
