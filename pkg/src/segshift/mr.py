"""Two-stage per-segment estimation over a clustered base-model ensemble.

The pipeline: split training rows into base/tune folds, cluster segments by
joint-distribution distance, train one boosted model per cluster plus one
on all segments, then per segment (a) estimate importance weights against
that segment's test rows, (b) fit a linear combination of the base-model
margins on the tune fold (optionally constrained to the unit ball via a
ridge-path bisection), and (c) refine with a small weighted boosted model
that treats the stage-1 margin as its base margin.

Also provides the pooled baselines: a global model refined with pooled
per-segment weights (dr), optionally with one-hot segment features (dr-sf).
"""

import hashlib
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._seeds import derive_seed, index_digest
from .data import Dataset, DataError, SplitPlan, TaskKind, split_base_tune
from .learners import (
    GBTConfig,
    GBTModel,
    LOGISTIC,
    SQUARED,
    LossKind,
    cluster_base_config,
    fit_gbt,
    losses,
    refine_config,
)
from .segmentation import (
    ClusterAssignment,
    KernelSpec,
    cluster_segments,
    choose_num_clusters,
    segment_distance_matrix,
)
from .weights import (
    DEFAULT_ETA,
    WeightVector,
    expand_class_weights,
    fit_bbse,
    fit_discriminative_weights,
    fit_kmm,
    uniform_weights,
)

LAMBDA_MIN = 1e-8
BALL_TOL = 1e-3


def task_loss(task: TaskKind) -> LossKind:
    if task.kind == "regression":
        return SQUARED
    if task.kind == "binary":
        return LOGISTIC
    return losses.softmax_loss(task.n_classes)


def segment_onehot(segment_id: np.ndarray, n_segments: int) -> np.ndarray:
    """One-hot columns for segment ids; out-of-range ids encode as zeros."""
    out = np.zeros((len(segment_id), n_segments))
    ok = (segment_id >= 0) & (segment_id < n_segments)
    out[np.flatnonzero(ok), segment_id[ok]] = 1.0
    return out


@dataclass(frozen=True)
class MRConfig:
    shift: str = "covariate"  # "covariate" | "label"
    weight_method: str | None = None  # default: discriminative / bbse by shift
    eta: float = DEFAULT_ETA
    varsigma: float = 0.8
    clusters: object = "auto"  # "auto" | int | explicit tuple of tuples
    min_cluster_size: int = 2
    base: GBTConfig = field(default_factory=cluster_base_config)
    refine: GBTConfig = field(default_factory=refine_config)
    ball: bool = True
    fit_intercept: bool = True
    lambda_max: float = 1e6
    bandwidth: float | str = "median"
    max_per_segment: int = 2000
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.shift not in ("covariate", "label"):
            raise ValueError("shift must be 'covariate' or 'label'")
        allowed = {
            "covariate": ("discriminative", "kmm", "none"),
            "label": ("bbse", "none"),
        }[self.shift]
        if self.weight_method is not None and self.weight_method not in allowed:
            raise ValueError(
                f"weight method {self.weight_method!r} incompatible with "
                f"{self.shift} shift (choose from {allowed})"
            )
        if not 0.0 < self.varsigma < 1.0:
            raise ValueError("varsigma must be in (0, 1)")

    @property
    def resolved_weight_method(self) -> str:
        if self.weight_method is not None:
            return self.weight_method
        return "discriminative" if self.shift == "covariate" else "bbse"

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.clusters, ClusterAssignment):
            d["clusters"] = [list(c) for c in self.clusters.clusters]
        elif not isinstance(self.clusters, (str, int)):
            d["clusters"] = [list(c) for c in self.clusters]
        d.pop("n_threads")  # execution detail, not part of the model identity
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MRConfig":
        d = dict(d)
        d.pop("n_threads", None)
        d["base"] = GBTConfig(**d["base"])
        d["refine"] = GBTConfig(**d["refine"])
        if isinstance(d["clusters"], list):
            d["clusters"] = tuple(tuple(c) for c in d["clusters"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Base ensemble


@dataclass
class BaseEnsemble:
    """Cluster models followed by the all-segments model (always last)."""

    models: list  # GBTModel, length M+1
    assignment: ClusterAssignment
    loss: LossKind

    @property
    def n_models(self) -> int:
        return len(self.models)

    def margins(self, x: np.ndarray) -> np.ndarray:
        """Stacked raw margins, (n, M+1) or (n, M+1, K) for softmax."""
        cols = [m.predict_margin(x) for m in self.models]
        return np.stack(cols, axis=1)

    def to_dict(self) -> dict:
        return {
            "clusters": [list(c) for c in self.assignment.clusters],
            "models": [m.to_dict() for m in self.models],
        }

    @classmethod
    def from_dict(cls, d: dict, loss: LossKind) -> "BaseEnsemble":
        return cls(
            models=[GBTModel.from_dict(m) for m in d["models"]],
            assignment=ClusterAssignment(tuple(tuple(c) for c in d["clusters"])),
            loss=loss,
        )


def _content_digest(features: np.ndarray, labels: np.ndarray) -> bytes:
    """Digest of a row set that ignores row order and segment labels."""
    arr = np.hstack([features, labels.astype(np.float64).reshape(-1, 1)])
    order = np.lexsort(tuple(arr[:, j] for j in range(arr.shape[1] - 1, -1, -1)))
    return hashlib.blake2b(np.ascontiguousarray(arr[order]).tobytes(), digest_size=8).digest()


def fit_base_ensemble(
    train_base: Dataset, clusters: ClusterAssignment, cfg: GBTConfig
) -> BaseEnsemble:
    """Fit one model per segment cluster plus the all-segments model.

    Cluster model order and per-model sub-seeds are keyed on the cluster's
    row *content*, so shuffling rows or relabeling segments leaves the
    serialized ensemble identical (models themselves are row-order
    invariant; see fit_gbt).
    """
    loss = task_loss(train_base.task)
    entries = []
    for cluster in clusters.clusters:
        rows = np.flatnonzero(np.isin(train_base.segment_id, cluster))
        if len(rows) == 0:
            names = [train_base.segment_names[s] for s in cluster]
            raise DataError(f"cluster {names} has no rows in the base fold")
        digest = _content_digest(train_base.features[rows], train_base.labels[rows])
        entries.append((digest, min(cluster), cluster, rows))
    entries.sort(key=lambda e: (e[0], e[1]))
    ordered = ClusterAssignment(tuple(c for _, _, c, _ in entries))
    models = []
    for digest, _, _, rows in entries:
        seed = derive_seed(cfg.seed, "base-model", digest)
        models.append(
            fit_gbt(
                train_base.features[rows],
                train_base.labels[rows],
                loss,
                cfg.with_seed(seed),
            )
        )
    all_digest = _content_digest(train_base.features, train_base.labels)
    seed = derive_seed(cfg.seed, "base-model", all_digest)
    models.append(
        fit_gbt(train_base.features, train_base.labels, loss, cfg.with_seed(seed))
    )
    return BaseEnsemble(models=models, assignment=ordered, loss=loss)


# ---------------------------------------------------------------------------
# Stage 1: constrained stacking


@dataclass
class Stage1Model:
    beta: np.ndarray  # (M+1,), shared across classes for softmax
    intercept: np.ndarray  # scalar array, or (K,)
    lambda_used: float
    ball_warning: bool = False

    def margin(self, h: np.ndarray) -> np.ndarray:
        """Combine stacked base margins: (n, M+1) -> (n,), (n, M+1, K) -> (n, K)."""
        if h.ndim == 2:
            return h @ self.beta + self.intercept
        return np.einsum("nmk,m->nk", h, self.beta) + self.intercept

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "intercept": self.intercept.tolist(),
            "lambda_used": self.lambda_used,
            "ball_warning": self.ball_warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Model":
        return cls(
            beta=np.asarray(d["beta"], dtype=np.float64),
            intercept=np.asarray(d["intercept"], dtype=np.float64),
            lambda_used=float(d["lambda_used"]),
            ball_warning=bool(d["ball_warning"]),
        )


def _solve_shared_softmax(h, y, loss, l2, fit_intercept):
    """Newton fit of margins z_ik = sum_m beta_m h_imk + c_k with L2 on beta."""
    n, n_models, k = h.shape
    yi = y.astype(np.intp)
    n_par = n_models + (k if fit_intercept else 0)
    theta = np.zeros(n_par)

    def unpack(t):
        beta = t[:n_models]
        c = t[n_models:] if fit_intercept else np.zeros(k)
        return beta, c

    def margins(t):
        beta, c = unpack(t)
        return np.einsum("nmk,m->nk", h, beta) + c

    def objective(t):
        beta, _ = unpack(t)
        z = margins(t)
        return float(np.sum(losses.loss_values(loss, y, z))) + 0.5 * l2 * float(beta @ beta)

    obj = objective(theta)
    for _ in range(100):
        z = margins(theta)
        p = losses.softmax_rows(z)
        r = p.copy()
        r[np.arange(n), yi] -= 1.0
        grad_beta = np.einsum("nk,nmk->m", r, h)
        grad = np.concatenate([grad_beta + l2 * theta[:n_models], r.sum(axis=0)]) if fit_intercept else (
            grad_beta + l2 * theta[:n_models]
        )
        if np.linalg.norm(grad) <= 1e-8:
            break
        # per-row feature map phi[i, k] = (h[i, :, k], e_k)
        phi = np.concatenate([h, np.tile(np.eye(k), (n, 1, 1)).transpose(0, 2, 1)], axis=1) if fit_intercept else h
        # phi: (n, n_par, k); hessian = sum_i phi_i A_i phi_i^T, A = diag(p)-pp'
        ap = np.einsum("npk,nk->npk", phi, p)
        hess = np.einsum("npk,nqk->pq", ap, phi) - np.einsum(
            "npk,nk,nql,nl->pq", phi, p, phi, p, optimize=True
        )
        hess[np.arange(n_models), np.arange(n_models)] += l2
        hess[np.arange(n_par), np.arange(n_par)] += 1e-10
        step = np.linalg.solve(hess, grad)
        scale = 1.0
        for _ in range(30):
            cand = theta - scale * step
            cand_obj = objective(cand)
            if cand_obj <= obj + 1e-12:
                theta, obj = cand, cand_obj
                break
            scale *= 0.5
        else:
            break
    beta, c = unpack(theta)
    return beta, np.asarray(c)


def _solve_stage1(h, y, loss, l2, fit_intercept):
    if loss.name == "softmax":
        return _solve_shared_softmax(h, y, loss, l2, fit_intercept)
    from .learners import fit_linear

    lm = fit_linear(h, y, loss, l2=l2, fit_intercept=fit_intercept)
    return lm.coef, np.asarray(lm.intercept)


def fit_stage1(
    tune_segment,
    ensemble: BaseEnsemble,
    ball: bool = True,
    lambda_max: float = 1e6,
    fit_intercept: bool = True,
    margins: np.ndarray | None = None,
) -> Stage1Model:
    """Linear combination of base-model margins fit on one segment's tune rows.

    With ``ball`` enabled and the near-unpenalized solution outside the unit
    ball, bisects log-lambda until ||beta|| lands in [1 - 1e-3, 1]; if even
    ``lambda_max`` cannot pull it inside, that solution is returned with
    ``ball_warning`` set. The intercept is unpenalized and excluded from
    the norm. ``margins`` may pass precomputed ``ensemble.margins(x)``.
    """
    x, y = tune_segment
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < ensemble.n_models + 1:
        raise DataError(
            f"need at least {ensemble.n_models + 1} tune rows to stack "
            f"{ensemble.n_models} base models, got {x.shape[0]}"
        )
    h = ensemble.margins(x) if margins is None else margins
    loss = ensemble.loss

    beta, intr = _solve_stage1(h, y, loss, LAMBDA_MIN, fit_intercept)
    if not ball or np.linalg.norm(beta) <= 1.0:
        return Stage1Model(beta=beta, intercept=intr, lambda_used=LAMBDA_MIN)

    beta_hi, intr_hi = _solve_stage1(h, y, loss, lambda_max, fit_intercept)
    if np.linalg.norm(beta_hi) > 1.0:
        warnings.warn("unit-ball bisection hit lambda_max; returning that solution")
        return Stage1Model(
            beta=beta_hi, intercept=intr_hi, lambda_used=lambda_max, ball_warning=True
        )
    lo, hi = LAMBDA_MIN, lambda_max
    for _ in range(60):
        if 1.0 - BALL_TOL <= np.linalg.norm(beta_hi) <= 1.0:
            break
        mid = float(np.sqrt(lo * hi))
        beta_mid, intr_mid = _solve_stage1(h, y, loss, mid, fit_intercept)
        if np.linalg.norm(beta_mid) > 1.0:
            lo = mid
        else:
            hi, beta_hi, intr_hi = mid, beta_mid, intr_mid
    return Stage1Model(beta=beta_hi, intercept=intr_hi, lambda_used=hi)


def fit_stage2(
    tune_segment,
    stage1: Stage1Model,
    ensemble: BaseEnsemble,
    weight: WeightVector,
    refine_cfg: GBTConfig,
    margins: np.ndarray | None = None,
) -> GBTModel:
    """Weighted boosted refinement on top of the stage-1 margin."""
    x, y = tune_segment
    x = np.asarray(x, dtype=np.float64)
    if len(weight.values) != x.shape[0]:
        raise ValueError("weights are not aligned to the tune rows")
    delta = stage1.margin(ensemble.margins(x) if margins is None else margins)
    return fit_gbt(
        x,
        y,
        ensemble.loss,
        refine_cfg,
        sample_weight=weight.values,
        base_margin=delta,
    )


# ---------------------------------------------------------------------------
# Pooled baselines (dr / dr-sf)


@dataclass
class DRModel:
    """Global model refined on pooled per-segment weights."""

    task: TaskKind
    base: GBTModel
    refiner: GBTModel
    with_segment_features: bool
    n_segments: int
    segment_names: tuple
    feature_names: tuple

    def _expand(self, x, segments):
        if not self.with_segment_features:
            return np.asarray(x, dtype=np.float64)
        return np.hstack([x, segment_onehot(np.asarray(segments), self.n_segments)])

    def predict_margin(self, x, segments=None):
        fx = self._expand(x, segments)
        base = self.base.predict_margin(fx)
        return self.refiner.predict_margin(fx, base_margin=base)

    def predict(self, x, segments=None):
        margin = self.predict_margin(x, segments)
        if self.task.kind == "regression":
            return margin
        return losses.margin_to_proba(margin, task_loss(self.task))

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": "dr-sf" if self.with_segment_features else "dr",
            "task": {"kind": self.task.kind, "n_classes": self.task.n_classes},
            "n_segments": self.n_segments,
            "segment_names": list(self.segment_names),
            "feature_names": list(self.feature_names),
            "base": self.base.to_dict(),
            "refiner": self.refiner.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DRModel":
        return cls(
            task=TaskKind(d["task"]["kind"], d["task"]["n_classes"]),
            base=GBTModel.from_dict(d["base"]),
            refiner=GBTModel.from_dict(d["refiner"]),
            with_segment_features=d["kind"] == "dr-sf",
            n_segments=int(d["n_segments"]),
            segment_names=tuple(d["segment_names"]),
            feature_names=tuple(d["feature_names"]),
        )


def _segment_weights(
    train: Dataset,
    rows: np.ndarray,
    eval_rows: np.ndarray,
    test_x: np.ndarray,
    test_rows: np.ndarray,
    config: MRConfig,
    classifier_margin,
) -> WeightVector:
    """Weights for one segment's ``eval_rows``, estimated per the config.

    ``rows`` are all the segment's training rows (used to fit the weight
    model where applicable); ``classifier_margin`` maps a feature matrix to
    margins for the label-shift path.
    """
    method = config.resolved_weight_method
    if method == "none":
        return uniform_weights(len(eval_rows), config.eta)
    seg_name = train.segment_names[train.segment_id[eval_rows[0]]]
    if len(test_rows) == 0:
        warnings.warn(
            f"segment {seg_name!r} missing from the test data; using uniform weights"
        )
        return uniform_weights(len(eval_rows), config.eta)
    if method == "discriminative":
        return fit_discriminative_weights(
            train.features[rows],
            test_x[test_rows],
            eta=config.eta,
            eval_x=train.features[eval_rows],
        )
    if method == "kmm":
        kernel = KernelSpec(config.bandwidth)
        return fit_kmm(
            train.features[eval_rows], test_x[test_rows], kernel=kernel, eta=config.eta
        )
    # bbse: held-out predicted labels on the eval rows vs test predictions
    k = train.task.n_classes
    src_pred = _predicted_classes(classifier_margin(train.features[eval_rows]), k)
    test_pred = _predicted_classes(classifier_margin(test_x[test_rows]), k)
    cw = fit_bbse(train.labels[eval_rows], src_pred, test_pred, k)
    return expand_class_weights(cw, train.labels[eval_rows], eta=config.eta)


def _predicted_classes(margin: np.ndarray, n_classes: int) -> np.ndarray:
    if margin.ndim == 1:
        return (margin > 0).astype(np.int64)
    return np.argmax(margin, axis=1).astype(np.int64)


def fit_dr(
    train: Dataset,
    test_features,
    config: MRConfig,
    with_segment_features: bool = False,
) -> DRModel:
    """Global unweighted model refined on pooled per-segment weights."""
    test_x, test_segments = test_features
    test_x = np.asarray(test_x, dtype=np.float64)
    test_segments = np.asarray(test_segments, dtype=np.int64)
    loss = task_loss(train.task)
    if config.resolved_weight_method == "bbse" and not train.task.is_classification:
        raise ValueError("bbse weights require a classification task")

    fx = train.features
    if with_segment_features:
        fx = np.hstack([fx, segment_onehot(train.segment_id, train.n_segments)])
    tag = int(with_segment_features)
    base = fit_gbt(
        fx, train.labels, loss, config.base.with_seed(derive_seed(config.seed, "dr-base", tag))
    )

    pooled = np.ones(train.n)
    for s in train.present_segments():
        rows = train.segment_rows(int(s))
        test_rows = np.flatnonzero(test_segments == s)

        def margin_fn(xm, s=int(s)):
            if with_segment_features:
                seg = np.full(xm.shape[0], s, dtype=np.int64)
                xm = np.hstack([xm, segment_onehot(seg, train.n_segments)])
            return base.predict_margin(xm)

        wv = _segment_weights(train, rows, rows, test_x, test_rows, config, margin_fn)
        pooled[rows] = wv.values
    refiner = fit_gbt(
        fx,
        train.labels,
        loss,
        config.refine.with_seed(derive_seed(config.seed, "dr-refine", tag)),
        sample_weight=pooled,
        base_margin=base.predict_margin(fx),
    )
    return DRModel(
        task=train.task,
        base=base,
        refiner=refiner,
        with_segment_features=with_segment_features,
        n_segments=train.n_segments,
        segment_names=train.segment_names,
        feature_names=train.feature_names,
    )


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class SegmentModel:
    stage1: Stage1Model
    refiner: GBTModel
    weight_summary: dict


@dataclass
class MRModel:
    task: TaskKind
    ensemble: BaseEnsemble
    segments: dict  # segment id -> SegmentModel
    fallback: DRModel
    segment_names: tuple
    feature_names: tuple
    config: MRConfig
    split: SplitPlan | None = None

    def predict_margin(self, x: np.ndarray, segments: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        segments = np.asarray(segments, dtype=np.int64)
        loss = task_loss(self.task)
        w = loss.margin_width
        out = np.zeros((x.shape[0], w))
        known = np.isin(segments, list(self.segments.keys()))
        if (~known).any():
            rows = np.flatnonzero(~known)
            fb = self.fallback.predict_margin(x[rows], segments[rows])
            out[rows] = fb.reshape(len(rows), w)
        for s in np.unique(segments[known]):
            rows = np.flatnonzero(segments == s)
            seg_model = self.segments[int(s)]
            h = self.ensemble.margins(x[rows])
            delta = seg_model.stage1.margin(h)
            corr = seg_model.refiner.predict_margin(x[rows])
            out[rows] = (delta + corr).reshape(len(rows), w)
        return out[:, 0] if w == 1 else out

    def predict(self, x: np.ndarray, segments: np.ndarray) -> np.ndarray:
        margin = self.predict_margin(x, segments)
        if self.task.kind == "regression":
            return margin
        return losses.margin_to_proba(margin, task_loss(self.task))

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": "mr",
            "task": {"kind": self.task.kind, "n_classes": self.task.n_classes},
            "config": self.config.to_dict(),
            "segment_names": list(self.segment_names),
            "feature_names": list(self.feature_names),
            "ensemble": self.ensemble.to_dict(),
            "segments": {
                str(s): {
                    "stage1": m.stage1.to_dict(),
                    "weight_summary": m.weight_summary,
                    "refiner": m.refiner.to_dict(),
                }
                for s, m in sorted(self.segments.items())
            },
            "fallback": self.fallback.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MRModel":
        task = TaskKind(d["task"]["kind"], d["task"]["n_classes"])
        loss = task_loss(task)
        segments = {
            int(s): SegmentModel(
                stage1=Stage1Model.from_dict(m["stage1"]),
                refiner=GBTModel.from_dict(m["refiner"]),
                weight_summary=m["weight_summary"],
            )
            for s, m in d["segments"].items()
        }
        return cls(
            task=task,
            ensemble=BaseEnsemble.from_dict(d["ensemble"], loss),
            segments=segments,
            fallback=DRModel.from_dict(d["fallback"]),
            segment_names=tuple(d["segment_names"]),
            feature_names=tuple(d["feature_names"]),
            config=MRConfig.from_dict(d["config"]),
        )


def _resolve_clusters(train: Dataset, config: MRConfig, max_auto: int | None = None) -> ClusterAssignment:
    if isinstance(config.clusters, ClusterAssignment):
        return config.clusters
    if isinstance(config.clusters, tuple):
        return ClusterAssignment(config.clusters)
    d = segment_distance_matrix(
        train,
        kernel=None if config.bandwidth == "median" else KernelSpec(config.bandwidth),
        max_per_segment=config.max_per_segment,
        seed=derive_seed(config.seed, "distance"),
        n_threads=config.n_threads,
    )
    if config.clusters == "auto":
        m = choose_num_clusters(d, config.min_cluster_size)
        if max_auto is not None and m > max_auto:
            # smallest tune fold must still fit an (m+1)-column stacking
            m = max(1, max_auto)
    else:
        m = int(config.clusters)
    return cluster_segments(d, m)


def fit_mr(train: Dataset, test_features, config: MRConfig) -> MRModel:
    """Run the full pipeline and return the per-segment refined model.

    ``test_features`` is an (x, segment_ids) pair with ids in the training
    dataset's segment vocabulary.
    """
    test_x, test_segments = test_features
    test_x = np.asarray(test_x, dtype=np.float64)
    test_segments = np.asarray(test_segments, dtype=np.int64)
    if test_x.shape[1] != train.d:
        raise ValueError("test features must match the training dimension")
    if config.resolved_weight_method == "bbse" and not train.task.is_classification:
        raise ValueError("bbse weights require a classification task")
    train_segs = set(int(s) for s in train.present_segments())
    if not train_segs & set(int(s) for s in np.unique(test_segments)):
        raise ValueError("train and test segment vocabularies do not overlap")

    plan = split_base_tune(train, config.varsigma, config.seed)
    tune_mask_pre = np.zeros(train.n, dtype=bool)
    tune_mask_pre[plan.tune_indices] = True
    min_tune = min(
        int(tune_mask_pre[train.segment_rows(int(s))].sum())
        for s in train.present_segments()
    )
    assignment = _resolve_clusters(train, config, max_auto=min_tune - 2)
    base_fold = train.subset(plan.base_indices)
    ensemble = fit_base_ensemble(base_fold, assignment, config.base.with_seed(config.seed))
    fallback = fit_dr(train, test_features, config, with_segment_features=False)

    all_model = ensemble.models[-1]
    tune_mask = np.zeros(train.n, dtype=bool)
    tune_mask[plan.tune_indices] = True

    def fit_one_segment(s: int) -> SegmentModel:
        seg_rows = train.segment_rows(s)
        tune_rows = seg_rows[tune_mask[seg_rows]]
        if len(tune_rows) < ensemble.n_models + 1:
            raise DataError(
                f"segment {train.segment_names[s]!r} has {len(tune_rows)} tune rows; "
                f"need at least {ensemble.n_models + 1}"
            )
        test_rows = np.flatnonzero(test_segments == s)
        wv = _segment_weights(
            train, seg_rows, tune_rows, test_x, test_rows, config,
            lambda xm: all_model.predict_margin(xm),
        )
        tune_xy = (train.features[tune_rows], train.labels[tune_rows])
        tune_margins = ensemble.margins(train.features[tune_rows])
        stage1 = fit_stage1(
            tune_xy,
            ensemble,
            ball=config.ball,
            lambda_max=config.lambda_max,
            fit_intercept=config.fit_intercept,
            margins=tune_margins,
        )
        refine_cfg = config.refine.with_seed(
            derive_seed(config.seed, "refine", index_digest(tune_rows))
        )
        refiner = fit_stage2(tune_xy, stage1, ensemble, wv, refine_cfg, margins=tune_margins)
        return SegmentModel(stage1=stage1, refiner=refiner, weight_summary=wv.summary())

    order = sorted(train_segs)
    if config.n_threads > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
            fitted = list(pool.map(fit_one_segment, order))
    else:
        fitted = [fit_one_segment(s) for s in order]
    seg_models = dict(zip(order, fitted))

    return MRModel(
        task=train.task,
        ensemble=ensemble,
        segments=seg_models,
        fallback=fallback,
        segment_names=train.segment_names,
        feature_names=train.feature_names,
        config=config,
        split=plan,
    )
