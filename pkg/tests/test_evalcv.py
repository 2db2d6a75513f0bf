import numpy as np
import pytest

from segshift import (
    CvGrid,
    MRConfig,
    SyntheticConfig,
    cross_validate,
    metric,
    per_segment_report,
    simulate_local_covshift,
)
from segshift.learners import cluster_base_config, refine_config


# ---------------------------------------------------------------------------
# metric


def test_metric_perfect_classification():
    y = np.array([0, 1, 1])
    p = np.array([0.0, 1.0, 1.0])
    assert metric(y, p, "brier")[0] == 0.0
    assert metric(y, p, "ce")[0] == pytest.approx(0.0, abs=1e-10)


def test_metric_coin_flip_ce():
    y = np.array([0, 1, 0, 1])
    p = np.full(4, 0.5)
    value, se = metric(y, p, "ce")
    assert value == pytest.approx(np.log(2), abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_metric_constant_offset_mse():
    y = np.arange(5.0)
    value, se = metric(y, y + 1.0, "mse")
    assert value == 1.0 and se == 0.0


def test_metric_multiclass_shapes():
    y = np.array([0, 2, 1])
    p = np.array([[0.8, 0.1, 0.1], [0.2, 0.2, 0.6], [0.25, 0.5, 0.25]])
    ce, _ = metric(y, p, "ce")
    assert ce == pytest.approx(-np.mean(np.log([0.8, 0.6, 0.5])), abs=1e-12)
    brier, _ = metric(y, p, "brier")
    onehot = np.eye(3)[y]
    assert brier == pytest.approx(np.mean(((p - onehot) ** 2).sum(1)), abs=1e-12)


def test_metric_uniform_weights_match_unweighted():
    rng = np.random.default_rng(0)
    y = rng.normal(size=50)
    p = y + rng.normal(size=50)
    a = metric(y, p, "mse")
    b = metric(y, p, "mse", sample_weight=np.full(50, 3.7))
    assert a[0] == pytest.approx(b[0], abs=1e-12)
    assert a[1] == pytest.approx(b[1], abs=1e-12)


def test_metric_se_matches_direct_recomputation():
    rng = np.random.default_rng(1)
    y = rng.normal(size=40)
    p = y + rng.normal(size=40)
    w = rng.uniform(0.1, 3.0, size=40)
    value, se = metric(y, p, "mse", sample_weight=w)
    losses = (p - y) ** 2
    mean = np.sum(w * losses) / w.sum()
    var = np.sum(w * (losses - mean) ** 2) / w.sum()
    n_eff = w.sum() ** 2 / np.sum(w * w)
    assert value == pytest.approx(mean, abs=1e-12)
    assert se == pytest.approx(np.sqrt(var / n_eff), abs=1e-12)


def test_metric_kind_checks():
    with pytest.raises(ValueError):
        metric(np.zeros(3), np.zeros(3), "nope")
    with pytest.raises(ValueError):
        metric(np.zeros(3), np.zeros((3, 2)), "mse")


# ---------------------------------------------------------------------------
# per_segment_report


def test_report_self_baseline_all_ones():
    y = np.arange(10.0)
    p = y + np.linspace(0, 1, 10)
    segs = np.arange(10) % 2
    report = per_segment_report(y, p, segs, "mse", baseline_predictions=p)
    for row in list(report.rows) + [report.overall]:
        assert row.relative == pytest.approx(1.0)


def test_report_hand_built_relatives():
    # segment a: mse 2 vs baseline 4; segment b: 1 vs 1
    y = np.array([0.0, 0.0, 0.0, 0.0])
    segs = np.array([0, 0, 1, 1])
    preds = np.array([np.sqrt(2), -np.sqrt(2), 1.0, -1.0])
    base = np.array([2.0, -2.0, 1.0, -1.0])
    report = per_segment_report(y, preds, segs, "mse", baseline_predictions=base)
    assert report.rows[0].relative == pytest.approx(0.5)
    assert report.rows[1].relative == pytest.approx(1.0)


def test_report_overall_is_pooled_mean():
    y = np.zeros(6)
    preds = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])  # seg sizes 4 and 2
    segs = np.array([0, 0, 0, 0, 1, 1])
    report = per_segment_report(y, preds, segs, "mse")
    # pooled mean 4/6, not mean of segment means (1+0)/2
    assert report.overall.value == pytest.approx(4.0 / 6.0)


def test_report_json_and_table():
    y = np.arange(6.0)
    segs = np.array([0, 0, 0, 1, 1, 1])
    report = per_segment_report(
        y, y, segs, "mse", segment_names=("alpha", "beta"), baseline_predictions=y + 1
    )
    doc = report.to_dict()
    assert doc["format_version"] == 1
    assert set(doc["segments"]) == {"alpha", "beta"}
    table = report.table()
    assert "alpha" in table and "overall" in table and "(" in table


def test_report_alignment_check():
    with pytest.raises(ValueError):
        per_segment_report(np.zeros(3), np.zeros(3), np.zeros(2), "mse")


# ---------------------------------------------------------------------------
# cross_validate


def tiny_config(seed=0, **over):
    kwargs = dict(
        base=cluster_base_config(n_estimators=10),
        refine=refine_config(n_estimators=3),
        clusters=1,
        seed=seed,
    )
    kwargs.update(over)
    return MRConfig(**kwargs)


def sim(seed=0, n=400, segs=2):
    cfg = SyntheticConfig(n_train=n, n_test=n, n_segments=segs, seed=seed)
    return simulate_local_covshift(cfg)


def test_cv_single_point_grid():
    train, test = sim()
    grid = CvGrid(base={"n_estimators": [10]}, refine={"n_estimators": [3]})
    best, reports = cross_validate(
        train, (test.features, test.segment_id), grid, k=2, config=tiny_config()
    )
    assert best == {"base": {"n_estimators": 10}, "refine": {"n_estimators": 3}}
    assert len(reports) == 2


def test_cv_selects_dominating_point():
    # refining on the tune fold helps on this fixture: 25 trees should beat 0
    train, test = sim(seed=1, n=600)
    grid = CvGrid(base={"n_estimators": [30]}, refine={"n_estimators": [0, 25]})
    best, _ = cross_validate(
        train, (test.features, test.segment_id), grid, k=2, config=tiny_config(seed=1)
    )
    assert best["refine"]["n_estimators"] == 25


def test_cv_fold_sizes():
    train, test = sim(seed=2, n=100)
    from segshift import kfold_plan

    folds = kfold_plan(train, 5, seed=0)
    assert all(len(valid) == 20 for _, valid in folds)


def test_cv_order_invariance():
    train, test = sim(seed=3, n=300)
    g1 = CvGrid(base={"n_estimators": [5, 20]}, refine={"n_estimators": [2]})
    g2 = CvGrid(base={"n_estimators": [20, 5]}, refine={"n_estimators": [2]})
    cfg = tiny_config(seed=3)
    b1, _ = cross_validate(train, (test.features, test.segment_id), g1, 2, cfg)
    b2, _ = cross_validate(train, (test.features, test.segment_id), g2, 2, cfg)
    assert b1 == b2


def test_cv_k_validation():
    train, test = sim(seed=4)
    with pytest.raises(ValueError):
        cross_validate(train, (test.features, test.segment_id), CvGrid(), 1, tiny_config())


def test_cv_grid_validation():
    with pytest.raises(ValueError, match="empty grid"):
        CvGrid(base={"n_estimators": []})


def test_cv_failing_point_excluded():
    train, test = sim(seed=5, n=200)
    # a 60-cluster request cannot be satisfied with 2 segments: always fails
    grid = CvGrid(base={"n_estimators": [5]}, refine={"n_estimators": [2, 3]})
    cfg = tiny_config(seed=5, clusters=60)
    with pytest.raises(ValueError, match="every grid point failed"):
        with pytest.warns(UserWarning):
            cross_validate(train, (test.features, test.segment_id), grid, 2, cfg)
