"""
Histogram-based tree ensembles: Newton gradient boosting on log-loss, or a
bootstrap random forest on class fractions.

Both modes share one tree grower. Features are pre-binned (at most
``n_bins`` candidate thresholds per feature, taken from observed values) and
split gains are maximised over per-node gradient/hessian histograms. Ties go
to the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .features import Dataset, FeatureVector, FEATURE_NAMES, manifest_hash

FORMAT = "memfail-ensemble"
VERSION = 1


class ManifestMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    feature_subsample: float = 0.8
    seed: int = 0
    mode: str = "boosted"
    n_bins: int = 256
    reg_lambda: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("boosted", "forest"):
            raise ValueError(f"unknown ensemble mode {self.mode!r}")
        for name in ("n_trees", "max_depth", "min_samples_leaf"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "feature_subsample"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 2 <= self.n_bins <= 256:
            raise ValueError("n_bins must lie in [2, 256]")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")


@dataclass
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: list[int]
    threshold: list[float]
    left: list[int]
    right: list[int]
    value: list[float]
    gain: list[float]

    def arrays(self) -> tuple[np.ndarray, ...]:
        if not hasattr(self, "_arr"):
            self._arr = (
                np.array(self.feature, dtype=np.int64), np.array(self.threshold, dtype=np.float64),
                np.array(self.left, dtype=np.int64), np.array(self.right, dtype=np.int64),
                np.array(self.value, dtype=np.float64),
            )
        return self._arr

    def apply(self, X: np.ndarray) -> np.ndarray:
        feat, thr, left, right, value = self.arrays()
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = feat[node]
            inner = f >= 0
            if not inner.any():
                break
            x = X[rows, np.where(inner, f, 0)]
            nxt = np.where(x <= thr[node], left[node], right[node])
            node = np.where(inner, nxt, node)
        return value[node]

    def depth(self) -> int:
        def walk(i: int) -> int:
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)


@dataclass
class TreeEnsemble:
    mode: str
    trees: list[Tree]
    learning_rate: float
    base_score: float
    features: list[str]
    manifest: str
    hyperparams: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def raw_score(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.features):
            raise ManifestMismatchError(f"expected {len(self.features)} features, got {X.shape[1]}")
        total = np.zeros(len(X), dtype=np.float64)
        for tree in self.trees:
            total += tree.apply(X)
        return total

    def predict_proba(self, X: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
        if names is not None and manifest_hash(names) != self.manifest:
            raise ManifestMismatchError("feature manifest does not match model")
        raw = self.raw_score(X)
        if self.mode == "boosted":
            return _sigmoid(raw + self.base_score)
        if not self.trees:
            return np.full(len(raw), self.base_score)
        return np.clip(raw / len(self.trees), 0.0, 1.0)

    def importance(self) -> np.ndarray:
        """Total split gain per feature."""
        imp = np.zeros(len(self.features))
        for tree in self.trees:
            for f, g in zip(tree.feature, tree.gain):
                if f >= 0:
                    imp[f] += g
        return imp

    def split_thresholds(self, feature: int) -> np.ndarray:
        """Sorted distinct thresholds the ensemble uses on ``feature``."""
        vals = {thr for tree in self.trees for f, thr in zip(tree.feature, tree.threshold) if f == feature}
        return np.array(sorted(vals), dtype=np.float64)

    def dumps(self) -> str:
        head = {
            "format": FORMAT, "version": VERSION, "mode": self.mode,
            "learning_rate": self.learning_rate, "base_score": self.base_score,
            "features": self.features, "manifest": self.manifest,
            "hyperparams": self.hyperparams, "meta": self.meta, "n_trees": len(self.trees),
        }
        lines = [json.dumps(head, sort_keys=True)]
        for i, t in enumerate(self.trees):
            lines.append(json.dumps({
                "tree": i, "feature": t.feature, "threshold": t.threshold,
                "left": t.left, "right": t.right, "value": t.value, "gain": t.gain,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> TreeEnsemble:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty model file")
        head = json.loads(lines[0])
        if head.get("format") != FORMAT or head.get("version") != VERSION:
            raise ValueError("not a memfail ensemble file (or unsupported version)")
        trees = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            trees.append(Tree(
                [int(v) for v in rec["feature"]], [float(v) for v in rec["threshold"]],
                [int(v) for v in rec["left"]], [int(v) for v in rec["right"]],
                [float(v) for v in rec["value"]], [float(v) for v in rec["gain"]],
            ))
        if len(trees) != head["n_trees"]:
            raise ValueError("truncated model file")
        return cls(head["mode"], trees, head["learning_rate"], head["base_score"],
                   head["features"], head["manifest"], head["hyperparams"], head.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path_or_stream) -> TreeEnsemble:
        if hasattr(path_or_stream, "read"):
            return cls.loads(path_or_stream.read())
        with open(path_or_stream) as fh:
            return cls.loads(fh.read())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bin_edges(col: np.ndarray, n_bins: int) -> np.ndarray:
    """Candidate thresholds: observed values, at most ``n_bins - 1`` of them."""
    uniq = np.unique(col)
    if len(uniq) <= n_bins:
        return uniq[:-1]
    qs = np.quantile(col, np.linspace(0, 1, n_bins + 1)[1:-1], method="lower")
    edges = np.unique(qs)
    return edges[edges < uniq[-1]]


class _Grower:
    def __init__(self, binned: np.ndarray, edges: list[np.ndarray], hp: Hyperparams):
        self.binned = binned
        self.edges = edges
        self.hp = hp
        self.lam = hp.reg_lambda if hp.mode == "boosted" else 0.0

    def histogram(self, rows: np.ndarray, feats: np.ndarray, g: np.ndarray, h: np.ndarray, c: np.ndarray):
        B = self.hp.n_bins
        gs, hs, cs = g[rows], h[rows], c[rows]
        out = np.zeros((3, len(feats), B))
        for j, f in enumerate(feats):
            b = self.binned[rows, f]
            out[0, j] = np.bincount(b, weights=gs, minlength=B)
            out[1, j] = np.bincount(b, weights=hs, minlength=B)
            out[2, j] = np.bincount(b, weights=cs, minlength=B)
        return out

    def best_split(self, hist: np.ndarray, feats: np.ndarray):
        G, H, C = hist[0, 0].sum(), hist[1, 0].sum(), hist[2, 0].sum()
        cum = np.cumsum(hist, axis=2)
        GL, HL, CL = cum[0], cum[1], cum[2]
        GR, HR, CR = G - GL, H - HL, C - CL
        lam, msl = self.lam, self.hp.min_samples_leaf
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - G ** 2 / (H + lam)
        nvalid = np.array([len(self.edges[f]) for f in feats])
        valid = (CL >= msl) & (CR >= msl) & (HL > 0) & (HR > 0)
        valid &= np.arange(hist.shape[2])[None, :] < nvalid[:, None]
        gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
        k = int(np.argmax(gain))
        j, b = divmod(k, gain.shape[1])
        if not gain[j, b] > 1e-12:
            return None
        return int(feats[j]), int(b), float(gain[j, b])

    def grow(self, rows: np.ndarray, feats: np.ndarray, g, h, c) -> Tree:
        tree = Tree([], [], [], [], [], [])

        def new_node() -> int:
            for lst, v in ((tree.feature, -1), (tree.threshold, 0.0), (tree.left, -1),
                           (tree.right, -1), (tree.value, 0.0), (tree.gain, 0.0)):
                lst.append(v)
            return len(tree.feature) - 1

        root = new_node()
        stack = [(root, rows, 0, self.histogram(rows, feats, g, h, c))]
        while stack:
            node, idx, depth, hist = stack.pop()
            G, H = hist[0, 0].sum(), hist[1, 0].sum()
            tree.value[node] = self.leaf_value(G, H)
            if depth >= self.hp.max_depth or len(idx) < 2 * self.hp.min_samples_leaf:
                continue
            split = self.best_split(hist, feats)
            if split is None:
                continue
            f, b, gain = split
            go_left = self.binned[idx, f] <= b
            li, ri = idx[go_left], idx[~go_left]
            if len(li) <= len(ri):
                lh = self.histogram(li, feats, g, h, c)
                rh = hist - lh
            else:
                rh = self.histogram(ri, feats, g, h, c)
                lh = hist - rh
            left, right = new_node(), new_node()
            tree.feature[node], tree.threshold[node] = f, float(self.edges[f][b])
            tree.left[node], tree.right[node], tree.gain[node] = left, right, gain
            stack.append((right, ri, depth + 1, rh))
            stack.append((left, li, depth + 1, lh))
        return tree

    def leaf_value(self, G: float, H: float) -> float:
        if self.hp.mode == "boosted":
            return float(-G / (H + self.lam) * self.hp.learning_rate)
        return float(-G / H) if H > 0 else 0.0


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def train(ds: Dataset, hp: Hyperparams = Hyperparams(), meta: dict | None = None, log_losses: list | None = None) -> TreeEnsemble:
    """Fit an ensemble on a labeled dataset (deterministic for a given seed)."""
    if ds.y is None:
        raise ValueError("dataset is unlabeled")
    y_all = np.asarray(ds.y, dtype=np.float64)
    if len(np.unique(y_all)) < 2:
        raise ValueError("training needs both classes present")
    order = _canonical_order(ds.X, y_all)
    X = np.ascontiguousarray(ds.X[order], dtype=np.float64)
    y = y_all[order]
    n, F = X.shape
    edges = [_bin_edges(X[:, f], hp.n_bins) for f in range(F)]
    binned = np.empty((n, F), dtype=np.uint8)
    for f in range(F):
        binned[:, f] = np.searchsorted(edges[f], X[:, f], side="left")
    binned = np.asfortranarray(binned)
    rng = np.random.default_rng(hp.seed)
    grower = _Grower(binned, edges, hp)
    n_feat = max(1, int(math.ceil(hp.feature_subsample * F)))
    trees: list[Tree] = []
    all_rows = np.arange(n)
    ones = np.ones(n)

    if hp.mode == "boosted":
        p0 = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        base = math.log(p0 / (1 - p0))
        raw = np.full(n, base)
        for _ in range(hp.n_trees):
            p = _sigmoid(raw)
            if log_losses is not None:
                log_losses.append(_log_loss(y, p))
            feats = np.sort(rng.choice(F, size=n_feat, replace=False))
            tree = grower.grow(all_rows, feats, p - y, p * (1 - p), ones)
            trees.append(tree)
            raw += tree.apply(X)
        if log_losses is not None:
            log_losses.append(_log_loss(y, _sigmoid(raw)))
    else:
        base = float(y.mean())
        for _ in range(hp.n_trees):
            w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
            feats = np.sort(rng.choice(F, size=n_feat, replace=False))
            rows = np.flatnonzero(w > 0)
            trees.append(grower.grow(rows, feats, -y * w, w, w))

    return TreeEnsemble(
        hp.mode, trees, hp.learning_rate, base, list(ds.names), manifest_hash(ds.names),
        asdict(hp), dict(meta or {}),
    )


def _log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def predict_proba(model: TreeEnsemble, v: FeatureVector | np.ndarray, names: Sequence[str] | None = None) -> float | np.ndarray:
    """UE probability for one feature vector (or each row of a matrix)."""
    if isinstance(v, FeatureVector):
        return float(model.predict_proba(np.array(v.values), FEATURE_NAMES)[0])
    return model.predict_proba(v, names if names is not None else model.features)


def classify(model: TreeEnsemble, v: FeatureVector | np.ndarray, threshold: float = 0.3):
    """1 (positive) iff the predicted probability reaches ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    p = predict_proba(model, v)
    return int(p >= threshold) if np.isscalar(p) else (p >= threshold).astype(np.int8)
