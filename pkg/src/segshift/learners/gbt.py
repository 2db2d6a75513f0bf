"""Second-order gradient boosted trees with histogram splits and base margins.

Rows are binned once into per-feature quantile bins; each round fits one
regression tree (K trees for softmax, one per class) to the gradient and
hessian of the loss at the current margin. Split gain and leaf values use
the standard second-order formulas with an L2 leaf penalty.

Two determinism guarantees beyond seeding: training rows are put into a
canonical content order before fitting, so fitted models are invariant to
input row order, and sample weights are rescaled to mean one, so models
are invariant to the overall weight scale.
"""

from dataclasses import dataclass, replace

import numpy as np

from .._seeds import make_rng
from . import losses
from .losses import LossKind


@dataclass(frozen=True)
class GBTConfig:
    n_estimators: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    subsample: float = 1.0
    colsample_bytree: float = 1.0
    min_child_weight: float = 1.0
    leaf_l2: float = 1.0
    n_bins: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if not (0.0 < self.subsample <= 1.0 and 0.0 < self.colsample_bytree <= 1.0):
            raise ValueError("subsample and colsample_bytree must be in (0, 1]")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.min_child_weight < 0.0 or self.leaf_l2 < 0.0:
            raise ValueError("min_child_weight and leaf_l2 must be >= 0")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")

    def with_seed(self, seed: int) -> "GBTConfig":
        return replace(self, seed=seed)


def cluster_base_config(seed: int = 0, **overrides) -> GBTConfig:
    """Defaults for models trained on segment clusters."""
    cfg = dict(
        n_estimators=200,
        max_depth=3,
        learning_rate=0.1,
        subsample=0.8,
        colsample_bytree=1.0,
        seed=seed,
    )
    cfg.update(overrides)
    return GBTConfig(**cfg)


def refine_config(seed: int = 0, **overrides) -> GBTConfig:
    """Defaults for the margin-refinement step."""
    cfg = dict(
        n_estimators=25,
        max_depth=2,
        learning_rate=0.3,
        subsample=1.0,
        colsample_bytree=1.0,
        seed=seed,
    )
    cfg.update(overrides)
    return GBTConfig(**cfg)


@dataclass
class Tree:
    """One regression tree as flat node arrays; leaves have feature == -1."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64, predicate: x[feature] < threshold goes left
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64
    class_k: int = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        stack = [(0, np.arange(x.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if self.feature[node] < 0:
                out[rows] = self.value[node]
                continue
            go_left = x[rows, self.feature[node]] < self.threshold[node]
            stack.append((self.left[node], rows[go_left]))
            stack.append((self.right[node], rows[~go_left]))
        return out

    def to_dict(self) -> dict:
        return {
            "class_k": self.class_k,
            "nodes": [
                {
                    "feature": int(self.feature[i]),
                    "threshold": float(self.threshold[i]),
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                    "value": float(self.value[i]),
                }
                for i in range(len(self.feature))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        nodes = d["nodes"]
        return cls(
            feature=np.asarray([n["feature"] for n in nodes], dtype=np.int32),
            threshold=np.asarray([n["threshold"] for n in nodes]),
            left=np.asarray([n["left"] for n in nodes], dtype=np.int32),
            right=np.asarray([n["right"] for n in nodes], dtype=np.int32),
            value=np.asarray([n["value"] for n in nodes]),
            class_k=int(d["class_k"]),
        )


class _PackedForest:
    """All trees of one model in contiguous arrays for batched traversal."""

    def __init__(self, trees):
        self.feature = np.concatenate([t.feature for t in trees])
        self.threshold = np.concatenate([t.threshold for t in trees])
        self.value = np.concatenate([t.value for t in trees])
        offsets = np.cumsum([0] + [len(t.feature) for t in trees])
        self.roots = offsets[:-1].astype(np.int64)
        left = np.concatenate([t.left + o for t, o in zip(trees, self.roots)])
        right = np.concatenate([t.right + o for t, o in zip(trees, self.roots)])
        leaf = self.feature < 0
        left[leaf] = 0
        right[leaf] = 0
        self.left = left.astype(np.int64)
        self.right = right.astype(np.int64)
        self.class_k = np.asarray([t.class_k for t in trees], dtype=np.int64)
        self.gather_feature = np.where(leaf, 0, self.feature).astype(np.int64)

    def accumulate(self, x: np.ndarray, out: np.ndarray) -> None:
        n = x.shape[0]
        n_trees = len(self.roots)
        for start in range(0, n, 4096):
            rows = slice(start, min(start + 4096, n))
            xc = x[rows]
            cur = np.broadcast_to(self.roots, (xc.shape[0], n_trees)).copy()
            while True:
                feat = self.feature[cur]
                active = feat >= 0
                if not active.any():
                    break
                vals = xc[np.arange(xc.shape[0])[:, None], self.gather_feature[cur]]
                nxt = np.where(vals < self.threshold[cur], self.left[cur], self.right[cur])
                cur = np.where(active, nxt, cur)
            leaves = self.value[cur]
            for k in np.unique(self.class_k):
                out[rows, k] += leaves[:, self.class_k == k].sum(axis=1)


@dataclass
class GBTModel:
    loss: LossKind
    n_features: int
    trees: list
    init_margin: np.ndarray | None  # (W,) constant, or None when trained on an external margin
    learning_rate: float

    def _forest(self) -> "_PackedForest | None":
        if not self.trees:
            return None
        packed = getattr(self, "_packed", None)
        if packed is None:
            packed = _PackedForest(self.trees)
            object.__setattr__(self, "_packed", packed)
        return packed

    def predict_margin(
        self, x: np.ndarray, base_margin: np.ndarray | None = None
    ) -> np.ndarray:
        """Raw margins; an external base margin is added only when supplied."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) features")
        w = self.loss.margin_width
        out = np.zeros((x.shape[0], w))
        if self.init_margin is not None:
            out += self.init_margin
        forest = self._forest()
        if forest is not None:
            forest.accumulate(x, out)
        if base_margin is not None:
            out += np.asarray(base_margin, dtype=np.float64).reshape(x.shape[0], w)
        return out[:, 0] if w == 1 else out

    def predict_proba(
        self, x: np.ndarray, base_margin: np.ndarray | None = None
    ) -> np.ndarray:
        return losses.margin_to_proba(self.predict_margin(x, base_margin), self.loss)

    def to_dict(self) -> dict:
        return {
            "model": "gbt",
            "loss": self.loss.name,
            "n_classes": self.loss.n_classes,
            "n_features": self.n_features,
            "learning_rate": self.learning_rate,
            "init_margin": None if self.init_margin is None else self.init_margin.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBTModel":
        init = d["init_margin"]
        return cls(
            loss=LossKind(d["loss"], d["n_classes"]),
            n_features=int(d["n_features"]),
            trees=[Tree.from_dict(t) for t in d["trees"]],
            init_margin=None if init is None else np.asarray(init, dtype=np.float64),
            learning_rate=float(d["learning_rate"]),
        )


def _bin_features(x: np.ndarray, n_bins: int):
    """Quantile bin edges per feature and the binned integer codes."""
    n, d = x.shape
    qs = np.arange(1, n_bins) / n_bins
    edges = []
    codes = np.empty((n, d), dtype=np.int32)
    for j in range(d):
        col = x[:, j]
        e = np.unique(np.quantile(col, qs))
        # drop edges below every value or above every value: they split nothing
        e = e[(e > col.min()) & (e <= col.max())]
        edges.append(e)
        codes[:, j] = np.searchsorted(e, col, side="right")
    return edges, codes


def _canonical_order(x, y, w, base_margin):
    keys = [w, y.astype(np.float64)]
    if base_margin is not None:
        bm = base_margin.reshape(len(y), -1)
        keys = [bm[:, j] for j in range(bm.shape[1] - 1, -1, -1)] + keys
    for j in range(x.shape[1] - 1, -1, -1):
        keys.append(x[:, j])
    return np.lexsort(tuple(keys))


class _TreeGrower:
    def __init__(self, codes, edges, cfg):
        self.codes = codes
        self.codes_t = np.ascontiguousarray(codes.T)
        self.edges = edges
        self.cfg = cfg
        self.max_bins = max((len(e) + 1 for e in edges), default=1)

    def grow(self, g, h, rows, cols):
        feat, thr, left, right, value = [], [], [], [], []

        def leaf(gs, hs):
            idx = len(feat)
            denom = hs + self.cfg.leaf_l2
            val = 0.0 if denom <= 0 else -gs / denom * self.cfg.learning_rate
            feat.append(-1)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(val)
            return idx

        def build(rows, depth):
            gr = g[rows]
            hr = h[rows]
            gs = float(gr.sum())
            hs = float(hr.sum())
            if depth >= self.cfg.max_depth or len(rows) < 2:
                return leaf(gs, hs)
            split = self._best_split(rows, gr, hr, gs, hs, cols)
            if split is None:
                return leaf(gs, hs)
            j, b = split
            idx = len(feat)
            feat.append(j)
            thr.append(float(self.edges[j][b]))
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            go_left = self.codes[rows, j] <= b
            left[idx] = build(rows[go_left], depth + 1)
            right[idx] = build(rows[~go_left], depth + 1)
            return idx

        build(rows, 0)
        return (
            np.asarray(feat, dtype=np.int32),
            np.asarray(thr),
            np.asarray(left, dtype=np.int32),
            np.asarray(right, dtype=np.int32),
            np.asarray(value),
        )

    def _best_split(self, rows, gr, hr, gs, hs, cols):
        cfg = self.cfg
        lam = cfg.leaf_l2
        nb = self.max_bins
        if nb < 2:
            return None
        parent = gs * gs / (hs + lam) if hs + lam > 0 else 0.0
        # one flattened histogram over (statistic, feature, bin) per node
        nc = len(cols)
        m = len(rows)
        sub = self.codes_t[np.ix_(cols, rows)]
        flat = (sub + (np.arange(nc) * nb)[:, None]).ravel()
        flat3 = np.concatenate([flat, flat + nc * nb, flat + 2 * nc * nb])
        wts = np.empty(3 * nc * m)
        for i in range(nc):
            wts[i * m : (i + 1) * m] = gr
            wts[(nc + i) * m : (nc + i + 1) * m] = hr
        wts[2 * nc * m :] = 1.0
        hg, hh, hc = np.bincount(flat3, weights=wts, minlength=3 * nc * nb).reshape(
            3, nc, nb
        )
        gl = hg.cumsum(axis=1)[:, :-1]
        hl = hh.cumsum(axis=1)[:, :-1]
        cl = hc.cumsum(axis=1)[:, :-1]
        gright = gs - gl
        hright = hs - hl
        valid = (
            (cl > 0)
            & (cl < len(rows))
            & (hl >= cfg.min_child_weight)
            & (hright >= cfg.min_child_weight)
            & (hl + lam > 0)
            & (hright + lam > 0)
        )
        if not valid.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gains = 0.5 * (gl * gl / (hl + lam) + gright * gright / (hright + lam) - parent)
        gains = np.where(valid, gains, -np.inf)
        # row-major argmax: ties go to the smallest (feature, bin) pair
        idx = int(np.argmax(gains))
        if gains.ravel()[idx] <= 0.0:
            return None
        f_pos, b = divmod(idx, nb - 1)
        return int(cols[f_pos]), int(b)


def fit_gbt(
    x: np.ndarray,
    y: np.ndarray,
    loss: LossKind,
    cfg: GBTConfig,
    sample_weight: np.ndarray | None = None,
    base_margin: np.ndarray | None = None,
) -> GBTModel:
    """Train a boosted-tree model.

    ``base_margin`` (per-row, (n,) or (n, K) for softmax) shifts the
    starting margin; the fitted trees are then an additive correction and
    the model's own predictions exclude the margin unless it is passed
    again at prediction time. Without it, training starts from the
    constant weighted-loss minimizer (zeros for softmax).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be (n, d)")
    n, d = x.shape
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError("y must be length n")
    if loss.is_classification:
        y = y.astype(np.int64)
        k_max = loss.n_classes if loss.name == "softmax" else 2
        if y.min() < 0 or y.max() >= k_max:
            raise ValueError("class labels out of range")
    else:
        y = y.astype(np.float64)
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("sample_weight must be length n, finite and nonnegative")
    if w.sum() <= 0:
        raise ValueError("sample weights sum to zero")
    w = w / w.mean()  # weight-scale invariance
    width = loss.margin_width
    if base_margin is not None:
        base_margin = np.asarray(base_margin, dtype=np.float64).reshape(n, width)

    order = _canonical_order(x, y, w, base_margin)
    x, y, w = x[order], y[order], w[order]
    if base_margin is not None:
        base_margin = base_margin[order]

    edges, codes = _bin_features(x, cfg.n_bins)
    if base_margin is not None:
        margin = base_margin.copy()
        init = None
    else:
        init = losses.initial_margin(loss, y, w)
        margin = np.tile(init, (n, 1))

    rng = make_rng(cfg.seed)
    grower = _TreeGrower(codes, edges, cfg)
    trees: list[Tree] = []
    n_sub = max(1, int(round(cfg.subsample * n)))
    n_cols = max(1, int(round(cfg.colsample_bytree * d)))

    for _ in range(cfg.n_estimators):
        m = margin[:, 0] if width == 1 else margin
        g, h = losses.grad_hess(loss, y, m)
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(h)):
            raise ValueError("non-finite gradients during boosting")
        g = g.reshape(n, width) * w[:, None]
        h = h.reshape(n, width) * w[:, None]
        if cfg.subsample < 1.0:
            rows = np.sort(rng.permutation(n)[:n_sub])
        else:
            rows = np.arange(n)
        for k in range(width):
            if cfg.colsample_bytree < 1.0:
                cols = np.sort(rng.permutation(d)[:n_cols])
            else:
                cols = np.arange(d)
            arrays = grower.grow(g[:, k], h[:, k], rows, cols)
            tree = Tree(*arrays, class_k=k)
            trees.append(tree)
            # "x < edges[b]" is exactly the grower's "bin <= b", so the
            # raw-value apply reproduces the training partition
            margin[:, k] += tree.apply(x)

    return GBTModel(
        loss=loss,
        n_features=d,
        trees=trees,
        init_margin=init,
        learning_rate=cfg.learning_rate,
    )
