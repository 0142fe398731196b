"""Histogram gradient-boosted trees for leaf-index features.

Each boosting round grows one tree with a K-vector in every leaf (softmax
objective, second-order gain summed over classes), so ``n_trees`` trees
give exactly ``n_trees`` active leaves per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

TREE_FORMAT = "gftab-gbdt/1"
MIN_LABELED = 10


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    n_bins: int = 256
    reg_lambda: float = 1.0
    min_child_weight: float = 1e-3
    seed: int = 0


@dataclass(eq=False)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray  # int64
    threshold: np.ndarray  # float64, go left when x <= threshold
    left: np.ndarray  # int64 child offsets
    right: np.ndarray
    leaf_id: np.ndarray  # global leaf id, -1 for internal nodes
    value: np.ndarray  # n_nodes x K (zeros for internal nodes)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def route(self, X: np.ndarray) -> np.ndarray:
        """Node index of the leaf reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            rows = np.flatnonzero(active)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def same_structure(self, other: "Tree") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("feature", "threshold", "left", "right", "leaf_id", "value")
        )


@dataclass(eq=False)
class GbdtModel:
    n_features: int
    n_classes: int
    base_score: np.ndarray
    trees: list[Tree] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_leaves(self) -> int:
        return sum(t.n_leaves for t in self.trees)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Global leaf id of the active leaf in each tree, ``N x L``."""
        X = self._check(X)
        if not self.trees:
            return np.zeros((X.shape[0], 0), dtype=np.int64)
        return np.stack([t.leaf_id[t.route(X)] for t in self.trees], axis=1)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        F = np.tile(self.base_score, (X.shape[0], 1))
        for t in self.trees:
            F += t.value[t.route(X)]
        return F

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "meta": np.array([self.n_features, self.n_classes, len(self.trees)], dtype=np.int64),
            "base_score": self.base_score,
        }
        for i, t in enumerate(self.trees):
            for k in ("feature", "threshold", "left", "right", "leaf_id", "value"):
                out[f"tree{i}.{k}"] = getattr(t, k)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "GbdtModel":
        n_features, n_classes, n_trees = (int(v) for v in arrays["meta"])
        trees = [
            Tree(**{k: np.array(arrays[f"tree{i}.{k}"]) for k in ("feature", "threshold", "left", "right", "leaf_id", "value")})
            for i in range(n_trees)
        ]
        return cls(n_features, n_classes, np.array(arrays["base_score"]), trees)


def _softmax(F: np.ndarray) -> np.ndarray:
    e = np.exp(F - F.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def quantile_bins(X: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Candidate thresholds per feature (at most ``n_bins - 1`` cut points)."""
    cuts = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        if len(u) <= n_bins:
            c = (u[:-1] + u[1:]) / 2.0
        else:
            q = np.quantile(X[:, j], np.linspace(0, 1, n_bins + 1)[1:-1])
            c = np.unique(q)
        cuts.append(c)
    return cuts


def train_gbdt(X: np.ndarray, y: np.ndarray, cfg: GbdtConfig = GbdtConfig(), n_classes: int | None = None) -> GbdtModel:
    """Stagewise multiclass logistic boosting on binned features."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] < MIN_LABELED:
        raise ValueError(f"GBDT needs at least {MIN_LABELED} labeled rows, got {X.shape[0]}")
    if len(np.unique(y)) < 2:
        raise ValueError("GBDT needs at least 2 classes in the labels")
    k = int(n_classes if n_classes is not None else y.max() + 1)
    n, f = X.shape
    Y = np.eye(k)[y]
    prior = np.clip(Y.mean(axis=0), 1e-6, None)
    base = np.log(prior) - np.log(prior).mean()
    model = GbdtModel(n_features=f, n_classes=k, base_score=base)
    if cfg.n_trees == 0:
        return model

    cuts = quantile_bins(X, cfg.n_bins)
    # bin b covers cuts[b-1] < x <= cuts[b]
    binned = np.stack([np.searchsorted(cuts[j], X[:, j], side="left") for j in range(f)], axis=1)
    F = np.tile(base, (n, 1))
    next_leaf = 0
    for _ in range(cfg.n_trees):
        P = _softmax(F)
        g = P - Y
        h = np.maximum(P * (1.0 - P), 1e-12)
        tree = _grow_tree(binned, cuts, g, h, cfg, leaf_offset=next_leaf)
        next_leaf += tree.n_leaves
        F += tree.value[tree.route(X)]
        model.trees.append(tree)
    return model


def _grow_tree(binned, cuts, g, h, cfg: GbdtConfig, leaf_offset: int) -> Tree:
    n, f = binned.shape
    k = g.shape[1]
    lam = cfg.reg_lambda
    nodes: list[dict] = []

    def score(G, H):
        return float(np.sum(G * G / (H + lam)))

    def build(rows: np.ndarray, depth: int) -> int:
        idx = len(nodes)
        G, H = g[rows].sum(axis=0), h[rows].sum(axis=0)
        node = {"feature": -1, "threshold": 0.0, "left": -1, "right": -1, "value": -cfg.learning_rate * G / (H + lam)}
        nodes.append(node)
        if depth >= cfg.max_depth or len(rows) < 2:
            return idx
        parent = score(G, H)
        best = (0.0, -1, -1)
        for j in range(f):
            nb = len(cuts[j]) + 1
            if nb < 2:
                continue
            b = binned[rows, j]
            hist_g = np.zeros((nb, k))
            hist_h = np.zeros((nb, k))
            np.add.at(hist_g, b, g[rows])
            np.add.at(hist_h, b, h[rows])
            GL = np.cumsum(hist_g, axis=0)[:-1]
            HL = np.cumsum(hist_h, axis=0)[:-1]
            GR, HR = G - GL, H - HL
            ok = (HL.sum(axis=1) >= cfg.min_child_weight) & (HR.sum(axis=1) >= cfg.min_child_weight)
            gain = (GL**2 / (HL + lam)).sum(axis=1) + (GR**2 / (HR + lam)).sum(axis=1) - parent
            gain[~ok] = -np.inf
            c = int(np.argmax(gain))
            if gain[c] > best[0] + 1e-12:
                best = (float(gain[c]), j, c)
        _, j, c = best
        if j < 0:
            return idx
        go_left = binned[rows, j] <= c
        node["feature"] = j
        node["threshold"] = float(cuts[j][c])
        node["left"] = build(rows[go_left], depth + 1)
        node["right"] = build(rows[~go_left], depth + 1)
        return idx

    build(np.arange(n), 0)
    feature = np.array([nd["feature"] for nd in nodes], dtype=np.int64)
    leaf_id = np.full(len(nodes), -1, dtype=np.int64)
    is_leaf = feature < 0
    leaf_id[is_leaf] = leaf_offset + np.arange(int(is_leaf.sum()))
    value = np.stack([nd["value"] for nd in nodes])
    value[~is_leaf] = 0.0
    return Tree(
        feature=feature,
        threshold=np.array([nd["threshold"] for nd in nodes], dtype=np.float64),
        left=np.array([nd["left"] for nd in nodes], dtype=np.int64),
        right=np.array([nd["right"] for nd in nodes], dtype=np.int64),
        leaf_id=leaf_id,
        value=value,
    )


def leaf_activations(model: GbdtModel, x: np.ndarray) -> np.ndarray:
    """Binary vector over all leaves with one active leaf per tree."""
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    p = np.zeros((rows.shape[0], model.n_leaves), dtype=np.int64)
    np.put_along_axis(p, model.apply(rows), 1, axis=1)
    return p[0] if x.ndim == 1 else p


def active_leaves(p: np.ndarray, n_trees: int) -> np.ndarray:
    """Indices of the active leaves in ``p`` (tree order), validating the count."""
    p = np.asarray(p)
    ids = np.flatnonzero(p)
    if len(ids) != n_trees or not np.isin(p, (0, 1)).all():
        raise ValueError(f"activation vector has {len(ids)} active leaves, expected {n_trees}")
    return ids


def tree_tokens(p: np.ndarray, table, n_trees: int):
    """Embedding rows of the active leaves (all-zero rows dropped): ``L x d_emb``.

    Global leaf ids increase with tree order, so ascending ids are tree order.
    """
    ids = active_leaves(p, n_trees)
    if isinstance(table, torch.Tensor):
        return table[torch.from_numpy(ids)]
    return np.asarray(table)[ids]
