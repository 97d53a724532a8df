"""Fit-the-fit subgroup summaries.

A small regression tree is grown greedily on the posterior-mean effects
against the covariates, using the standard CART sum-of-squares criterion and
the same cutpoint grid the forests split on. Its leaves are readable
subgroups with their average estimated effect.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError
from .trees import SplitRule, build_cutpoints

__all__ = [
    "SubgroupNode",
    "SubgroupTree",
    "fit_subgroup_tree",
    "render_tree",
    "node_table",
    "write_node_table",
]


@dataclass
class SubgroupNode:
    node_id: int
    depth: int
    n: int
    mean: float
    sse: float
    rule: SplitRule | None = None
    left: SubgroupNode | None = None
    right: SubgroupNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.rule is None


@dataclass
class SubgroupTree:
    """Greedy CART tree on effect estimates; left children hold ``x <= threshold``."""

    root: SubgroupNode
    max_depth: int
    min_node: int
    names: list[str] = field(default_factory=list)

    def nodes(self):
        """Pre-order traversal (node, parent id, side) with ``side`` in {None, "left", "right"}."""
        stack = [(self.root, -1, None)]
        while stack:
            node, parent, side = stack.pop()
            yield node, parent, side
            if not node.is_leaf:
                stack.append((node.right, node.node_id, "right"))
                stack.append((node.left, node.node_id, "left"))

    def leaves(self) -> list[SubgroupNode]:
        return [nd for nd, _, _ in self.nodes() if nd.is_leaf]

    @property
    def n_splits(self) -> int:
        return sum(not nd.is_leaf for nd, _, _ in self.nodes())

    @property
    def sse(self) -> float:
        return float(sum(nd.sse for nd in self.leaves()))

    def assign(self, X) -> np.ndarray:
        """Leaf ``node_id`` reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0], dtype=int)
        for i, x in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if node.rule.goes_left(x) else node.right
            out[i] = node.node_id
        return out


def _best_split(codes, n_cuts, y, min_node, tol):
    """Lowest-SSE admissible split of the rows behind ``y``; None when nothing improves."""
    n = y.size
    total, total_sq = y.sum(), y @ y
    parent_sse = total_sq - total * total / n
    best = None
    best_gain = tol
    for v, nc in enumerate(n_cuts):
        if nc == 0:
            continue
        b = codes[v]
        cnt = np.cumsum(np.bincount(b, minlength=nc + 1))[:nc]
        sm = np.cumsum(np.bincount(b, weights=y, minlength=nc + 1))[:nc]
        n_r = n - cnt
        ok = (cnt >= min_node) & (n_r >= min_node)
        if not ok.any():
            continue
        c_ok = np.flatnonzero(ok)
        nl, sl = cnt[c_ok], sm[c_ok]
        sr = total - sl
        child_sse = total_sq - sl * sl / nl - sr * sr / (n - nl)
        gain = parent_sse - child_sse
        k = int(np.argmax(gain))  # first maximum = lowest cutpoint
        if gain[k] > best_gain:
            best_gain = gain[k]
            best = (v, int(c_ok[k]))
    return best


def fit_subgroup_tree(X, tau_mean, max_depth: int = 4, min_node: int = 20, *,
                      names=None, max_cuts: int = 100) -> SubgroupTree:
    """Greedy variance-reduction tree of ``tau_mean`` on ``X``.

    Parameters
    ----------
    X : array, shape (N, P)
    tau_mean : array, shape (N,)
        Posterior-mean effect per unit.
    max_depth : int
        Depth cap; 0 returns the single-node tree whose mean is the ATE.
    min_node : int
        Smallest admissible subgroup size.
    names : list of str, optional
        Covariate labels used when rendering.

    Splits are accepted only when they strictly lower the total SSE. Ties
    go to the lowest covariate index, then the lowest cutpoint.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(tau_mean, dtype=float).ravel()
    N, P = X.shape
    if y.size != N:
        raise InputError(f"X has {N} rows but tau_mean has {y.size} entries")
    if N == 0:
        raise InputError("need at least one unit")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InputError("X and tau_mean must be finite")
    if max_depth < 0:
        raise ConfigurationError(f"max_depth must be >= 0, got {max_depth}")
    if min_node < 1:
        raise ConfigurationError(f"min_node must be >= 1, got {min_node}")
    if min_node > N:
        raise ConfigurationError(f"min_node={min_node} exceeds the sample size {N}")
    names = [f"X{j + 1}" for j in range(P)] if names is None else list(names)
    if len(names) != P:
        raise InputError("one name per covariate column is required")

    grid = build_cutpoints(X, max_cuts)
    codes = grid.bin(X)
    n_cuts = grid.n_cuts
    tol = 1e-12 * max(1.0, float(np.sum((y - y.mean()) ** 2)))
    counter = iter(range(2**31))

    def grow(rows, depth):
        yy = y[rows]
        node = SubgroupNode(next(counter), depth, rows.size, float(yy.mean()),
                            float(np.sum((yy - yy.mean()) ** 2)))
        if depth >= max_depth or rows.size < 2 * min_node:
            return node
        best = _best_split(codes[:, rows], n_cuts, yy, min_node, tol)
        if best is None:
            return node
        v, c = best
        go_left = codes[v, rows] <= c
        node.rule = SplitRule(v, float(grid.threshold(v, c)))
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return node

    return SubgroupTree(grow(np.arange(N), 0), max_depth, min_node, names)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def render_tree(tree: SubgroupTree, indent: str = "  ") -> str:
    """Indented outline, one line per node: rule, subgroup size and mean effect."""
    lines = []

    def walk(node, label, level):
        lines.append(f"{indent * level}{label} n={node.n} mean={_fmt(node.mean)}")
        if node.is_leaf:
            return
        name = tree.names[node.rule.covariate_index]
        thr = f"{node.rule.threshold:.6g}"
        walk(node.left, f"{name} <= {thr}", level + 1)
        walk(node.right, f"{name} > {thr}", level + 1)

    walk(tree.root, "ALL", 0)
    return "\n".join(lines)


_COLUMNS = ["node_id", "parent_id", "side", "depth", "n", "mean", "sse", "split_covariate",
            "split_threshold", "is_leaf"]


def node_table(tree: SubgroupTree) -> list[dict]:
    rows = []
    for node, parent, side in tree.nodes():
        rows.append({
            "node_id": node.node_id,
            "parent_id": parent,
            "side": side or "",
            "depth": node.depth,
            "n": node.n,
            "mean": repr(node.mean),
            "sse": repr(node.sse),
            "split_covariate": "" if node.is_leaf else tree.names[node.rule.covariate_index],
            "split_threshold": "" if node.is_leaf else repr(node.rule.threshold),
            "is_leaf": int(node.is_leaf),
        })
    return rows


def write_node_table(tree: SubgroupTree, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_COLUMNS)
        w.writeheader()
        w.writerows(node_table(tree))
    return path
