"""Random forest regression: bagged CART trees with per-node feature sampling.

Trees are stored as flat node arrays. A node is a leaf when ``feature`` is
-1. Rows go left when ``x[feature] <= threshold``, and thresholds are
midpoints of adjacent distinct observed values. Bootstrap resampling is
expressed as integer row weights (multiplicities), so a tree fitted with
all-ones weights is a plain CART tree on the data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_GAIN_EPS = 1e-12


@dataclass
class ForestConfig:
    n_trees: int = 100
    mtry: int | None = None
    min_leaf: int = 5
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True  # False: every tree sees each row once (test hook)

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")

    def resolve_mtry(self, p: int) -> int:
        m = math.ceil(p / 3) if self.mtry is None else int(self.mtry)
        if not 1 <= m <= p:
            raise ValueError(f"mtry {m} outside [1, {p}]")
        return m


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    gain: np.ndarray  # weighted SSE decrease at internal nodes, 0 at leaves
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, nd = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features")
        return self.value[self.apply(X)]

    def equals(self, other: "RegressionTree") -> bool:
        return all(
            np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
            for a in ("feature", "threshold", "left", "right", "value", "count")
        )


def _best_split(x, y, w, min_leaf):
    """Best threshold on one feature: (gain, threshold) or None.

    Gain is the weighted SSE decrease. Among equal gains the smallest
    threshold wins.
    """
    order = np.argsort(x, kind="stable")
    xs, ys, ws = x[order], y[order], w[order]
    wl = np.cumsum(ws)[:-1]
    sl = np.cumsum(ws * ys)[:-1]
    W, S = wl[-1] + ws[-1], sl[-1] + ws[-1] * ys[-1]
    wr, sr = W - wl, S - sl
    valid = (xs[1:] > xs[:-1]) & (wl >= min_leaf) & (wr >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = sl**2 / wl + sr**2 / wr - S**2 / W
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))
    return float(gain[i]), float((xs[i] + xs[i + 1]) / 2.0)


def fit_tree(X, y, row_weights=None, cfg: ForestConfig | None = None, seed=0) -> RegressionTree:
    """Grow one CART regression tree on weighted rows.

    At every node ``mtry`` candidate features are drawn without replacement;
    growth stops at ``min_leaf`` (weighted count per child), ``max_depth``
    or zero gain. Ties between features go to the lowest index.
    """
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if row_weights is None else np.asarray(row_weights, dtype=float)
    mtry = cfg.resolve_mtry(p)
    rng = np.random.default_rng(seed)
    max_depth = np.inf if cfg.max_depth is None else cfg.max_depth

    feature, threshold, left, right, value, count, gain = [], [], [], [], [], [], []

    def new_node(rows):
        ww = w[rows]
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(float(ww @ y[rows] / ww.sum()))
        count.append(float(ww.sum()))
        gain.append(0.0)
        return len(feature) - 1

    root_rows = np.flatnonzero(w > 0)
    stack = [(new_node(root_rows), root_rows, 0)]
    while stack:
        node, rows, depth = stack.pop()
        yr, wr = y[rows], w[rows]
        if depth >= max_depth or count[node] < 2 * cfg.min_leaf or yr.min() == yr.max():
            continue
        sse = float(wr @ (yr - value[node]) ** 2)
        best = None
        for f in np.sort(rng.choice(p, size=mtry, replace=False)):
            res = _best_split(X[rows, f], yr, wr, cfg.min_leaf)
            if res is not None and (best is None or res[0] > best[0]):
                best = (res[0], res[1], f)
        if best is None or best[0] <= _GAIN_EPS * sse:
            continue
        g, thr, f = best
        go_left = X[rows, f] <= thr
        feature[node], threshold[node], gain[node] = int(f), thr, g
        lrows, rrows = rows[go_left], rows[~go_left]
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))

    return RegressionTree(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(value), np.array(count), np.array(gain), p,
    )


@dataclass
class ForestFit:
    trees: list
    oob_rmse: float
    n_oob_missing: int
    multiplicities: np.ndarray = field(repr=False)
    tree_seeds: list = field(repr=False)
    impurity_importance: np.ndarray = field(repr=False)
    importances: np.ndarray | None = None
    y_range: tuple = (np.nan, np.nan)

    @property
    def n_features(self) -> int:
        return self.trees[0].n_features

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


def tree_seeds(seed: int, n_trees: int) -> list[tuple[int, int]]:
    """Per-tree (bootstrap, split) seeds, derived by tree index only."""
    out = []
    for i in range(n_trees):
        s = np.random.SeedSequence(seed, spawn_key=(i,)).generate_state(2)
        out.append((int(s[0]), int(s[1])))
    return out


def fit(X, y, cfg: ForestConfig | None = None) -> ForestFit:
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least 2 rows")
    cfg.resolve_mtry(p)
    seeds = tree_seeds(cfg.seed, cfg.n_trees)
    trees = []
    mult = np.empty((cfg.n_trees, n), dtype=np.int64)
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n, dtype=np.int64)
    imp = np.zeros(p)
    for t, (boot_seed, split_seed) in enumerate(seeds):
        if cfg.bootstrap:
            mult[t] = np.random.default_rng(boot_seed).multinomial(n, np.full(n, 1.0 / n))
        else:
            mult[t] = 1
        tree = fit_tree(X, y, mult[t], cfg, split_seed)
        trees.append(tree)
        out = mult[t] == 0
        if out.any():
            oob_sum[out] += tree.predict(X[out])
            oob_cnt[out] += 1
        inner = tree.feature >= 0
        np.add.at(imp, tree.feature[inner], tree.gain[inner])
    covered = oob_cnt > 0
    oob_rmse = (
        float(np.sqrt(np.mean((oob_sum[covered] / oob_cnt[covered] - y[covered]) ** 2)))
        if covered.any() else float("nan")
    )
    return ForestFit(
        trees, oob_rmse, int((~covered).sum()), mult, seeds, imp / cfg.n_trees,
        y_range=(float(y.min()), float(y.max())),
    )


def predict(f: ForestFit, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != f.n_features:
        raise ValueError(f"dimension mismatch: expected {f.n_features} features")
    return np.mean([t.predict(X) for t in f.trees], axis=0)


def importance(f: ForestFit, X_val, y_val, permutations: int = 5, seed: int = 0) -> np.ndarray:
    """Permutation importance: mean RMSE increase when one column is shuffled."""
    X_val = np.asarray(X_val, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if len(y_val) < 10:
        raise ValueError("need at least 10 validation rows")
    rng = np.random.default_rng(seed)
    base = np.sqrt(np.mean((predict(f, X_val) - y_val) ** 2))
    scores = np.zeros(X_val.shape[1])
    for j in range(X_val.shape[1]):
        Xp = X_val.copy()
        for _ in range(permutations):
            Xp[:, j] = X_val[rng.permutation(len(y_val)), j]
            scores[j] += np.sqrt(np.mean((predict(f, Xp) - y_val) ** 2)) - base
    scores /= permutations
    f.importances = scores
    return scores


IMPORTANCE_COLUMNS = ("feature", "permutation_importance", "impurity_importance")

MODEL_FORMAT = "koasev-forest"
MODEL_VERSION = 1


def save_model(f: ForestFit, names, path):
    """Versioned text format: header lines, then one block per tree."""
    from .textio import atomic_writer, fmt

    with atomic_writer(path) as fh:
        fh.write(f"format = {MODEL_FORMAT}\nversion = {MODEL_VERSION}\n")
        fh.write(f"n_trees = {len(f.trees)}\nn_features = {f.n_features}\n")
        fh.write(f"features = {','.join(names)}\n")
        fh.write(f"oob_rmse = {fmt(f.oob_rmse)}\n")
        for i, t in enumerate(f.trees):
            fh.write(f"tree {i} {t.n_nodes}\n")
            for k in range(t.n_nodes):
                fh.write(" ".join([
                    str(t.feature[k]), fmt(float(t.threshold[k])), str(t.left[k]), str(t.right[k]),
                    fmt(float(t.value[k])), fmt(float(t.count[k])), fmt(float(t.gain[k])),
                ]) + "\n")


def load_model(path) -> tuple[ForestFit, list[str]]:
    lines = open(path, encoding="utf-8").read().splitlines()
    head = {}
    i = 0
    while i < len(lines) and not lines[i].startswith("tree "):
        k, v = lines[i].split("=", 1)
        head[k.strip()] = v.strip()
        i += 1
    if head.get("format") != MODEL_FORMAT or int(head.get("version", 0)) != MODEL_VERSION:
        raise ValueError(f"{path}: not a version {MODEL_VERSION} forest model")
    p = int(head["n_features"])
    trees = []
    while i < len(lines):
        n_nodes = int(lines[i].split()[2])
        rows = [ln.split() for ln in lines[i + 1 : i + 1 + n_nodes]]
        cols = list(zip(*rows))
        num = lambda c: np.array([float("nan") if s == "NA" else float(s) for s in c])
        trees.append(RegressionTree(
            np.array(cols[0], dtype=np.int64), num(cols[1]), np.array(cols[2], dtype=np.int64),
            np.array(cols[3], dtype=np.int64), num(cols[4]), num(cols[5]), num(cols[6]), p,
        ))
        i += 1 + n_nodes
    names = head["features"].split(",") if head["features"] else []
    f = ForestFit(trees, float(head["oob_rmse"]) if head["oob_rmse"] != "NA" else float("nan"),
                  0, np.empty((0, 0)), [], np.zeros(p))
    return f, names
