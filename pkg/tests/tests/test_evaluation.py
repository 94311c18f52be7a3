import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import f1_score

from histo_ssl.errors import DataError, DimensionError, ParameterError
from histo_ssl.evaluation.metrics import (
    accuracy,
    contingency,
    mcnemar,
    mcnemar_from_counts,
    pearson,
    weighted_f1,
)
from histo_ssl.evaluation.probe import (
    EmbeddingSet,
    ProbeConfig,
    linear_probe,
    linear_regression_probe,
    make_splits,
    patch_aggregate_probe,
    regression_metrics,
    split_indices,
    zscore_apply,
    zscore_fit,
)
from histo_ssl.evaluation.report import (
    COMPARISON_COLUMNS,
    REPORT_COLUMNS,
    REPORT_NAME,
    collect_reports,
    compare_models,
    read_report,
    write_comparison_report,
    write_report,
)
from histo_ssl.tensor_kernel import Rng
from histo_ssl.training.metrics import METRIC_COLUMNS, METRICS_NAME

FAST_PROBE = ProbeConfig(iterations=300, batch_size=32, lr=0.1)


def _blobs(rng, n=200, spread=0.5):
    labels = np.arange(n) % 2
    centres = np.where(labels[:, None] == 0, [-3.0, 0.0], [3.0, 0.0])
    return centres + spread * rng.normal(size=(n, 2)), labels


def test_weighted_f1_examples():
    assert weighted_f1(["A", "A", "A", "B"], ["A", "A", "B", "B"]) == pytest.approx(
        (2 * 0.8 + 2 * (2 / 3)) / 4, abs=1e-6
    )
    assert weighted_f1([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(1 / 3, abs=1e-6)
    assert weighted_f1([2, 1, 0], [2, 1, 0]) == 1.0


def test_weighted_f1_is_macro_f1_on_balanced_labels(rng):
    labels = np.repeat(np.arange(4), 25)
    preds = rng.integers(0, 4, size=100)
    assert weighted_f1(preds, labels) == pytest.approx(f1_score(labels, preds, average="macro"))
    order = rng.permutation(100)
    assert weighted_f1(preds[order], labels[order]) == pytest.approx(weighted_f1(preds, labels))


def test_weighted_f1_length_mismatch():
    with pytest.raises(ParameterError):
        weighted_f1([0, 1], [0])


def test_accuracy():
    assert accuracy([1, 0, 1, 1], [1, 1, 1, 1]) == 0.75


def test_mcnemar_chi_squared_example():
    statistic, p = mcnemar_from_counts(5, 15, exact=False)
    assert statistic == pytest.approx(81 / 20)
    assert p == pytest.approx(0.0442, abs=1e-4)


def test_mcnemar_symmetric_disagreement():
    for count in (1, 5, 20, 60):
        _, p = mcnemar_from_counts(count, count)
        assert p >= 0.05


def test_mcnemar_continuity_correction_is_clamped_at_zero():
    assert mcnemar_from_counts(13, 13, exact=False) == (0.0, 1.0)
    assert mcnemar_from_counts(13, 14, exact=False)[0] == 0.0


def test_mcnemar_branches_agree_near_the_crossover():
    for n in (24, 25, 26):
        for b in range(n + 1):
            _, p_exact = mcnemar_from_counts(b, n - b, exact=True)
            _, p_chi2 = mcnemar_from_counts(b, n - b, exact=False)
            assert 0.0 <= p_exact <= 1.0
            assert abs(p_exact - p_chi2) < 0.02, (b, n - b)


def test_mcnemar_identical_predictions():
    labels = np.array([0, 1, 1, 0])
    assert mcnemar(labels, labels, labels) == (0.0, 1.0)


def test_contingency():
    table = contingency([1, 1, 0, 0], [1, 0, 1, 0], [1, 1, 1, 1])
    assert (table.b, table.c, table.both_right, table.both_wrong) == (1, 1, 1, 1)
    assert table.n == 4


def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)
    x = np.arange(10.0)
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -2 * x + 3) == pytest.approx(-1.0)


def test_pearson_constant_input():
    with pytest.raises(DataError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_zscore_uses_training_statistics(rng):
    train = rng.normal(5.0, 2.0, size=(500, 3))
    zstats = zscore_fit(train)
    np.testing.assert_allclose(zscore_apply(train, zstats).mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(zscore_apply(train, zstats).std(axis=0), 1.0)
    shifted = zscore_apply(train + 10.0, zstats)
    np.testing.assert_allclose(shifted.mean(axis=0), 10.0 / zstats.std)


def test_zscore_floors_constant_features():
    zstats = zscore_fit(np.ones((4, 2)))
    assert np.all(np.isfinite(zscore_apply(np.ones((4, 2)), zstats)))


def test_embedding_set_validation():
    with pytest.raises(DimensionError):
        EmbeddingSet(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        EmbeddingSet(np.zeros(3), np.zeros(3))


def test_linear_probe_separable(rng):
    vectors, labels = _blobs(rng)
    splits = split_indices(len(labels), 0.1, 0.2, rng.fork(0))
    train, val, test = make_splits(vectors, labels, splits)
    result = linear_probe(train, val, test, FAST_PROBE, rng.fork(1))
    assert accuracy(result.predictions, test.labels) == 1.0
    assert 0 <= result.best_iteration <= FAST_PROBE.iterations


def test_linear_probe_is_deterministic(rng):
    vectors, labels = _blobs(rng, spread=3.0)
    splits = split_indices(len(labels), 0.1, 0.2, Rng(0))
    sets = make_splits(vectors, labels, splits)
    first = linear_probe(*sets, FAST_PROBE, Rng(3))
    second = linear_probe(*sets, FAST_PROBE, Rng(3))
    np.testing.assert_array_equal(first.predictions, second.predictions)
    np.testing.assert_array_equal(first.weights, second.weights)


def test_linear_probe_single_class(rng):
    vectors = rng.normal(size=(10, 2))
    single = EmbeddingSet(vectors, np.zeros(10))
    with pytest.raises(DataError):
        linear_probe(single, single, single, FAST_PROBE, rng)


def test_linear_regression_probe(rng):
    vectors = rng.normal(size=(400, 5))
    targets = vectors @ np.array([1.0, -2.0, 0.5, 0.0, 0.0]) + 0.1 * rng.normal(size=400)
    splits = split_indices(400, 0.1, 0.2, rng.fork(0))
    train, val, test = make_splits(vectors, targets, splits)
    result = linear_regression_probe(train, val, test, FAST_PROBE, rng.fork(1))
    assert regression_metrics(result, test) > 0.95


def test_split_indices_are_disjoint(rng):
    splits = split_indices(100, 0.1, 0.2, rng)
    combined = np.concatenate([splits["train"], splits["val"], splits["test"]])
    assert sorted(combined.tolist()) == list(range(100))
    assert len(splits["test"]) == 20
    assert len(splits["val"]) == 10


def test_split_indices_keep_groups_together(rng):
    groups = np.repeat(np.arange(20), 5)
    splits = split_indices(100, 0.2, 0.2, rng, groups=groups)
    seen = [set(groups[splits[name]]) for name in ("train", "val", "test")]
    assert not seen[0] & seen[1]
    assert not seen[0] & seen[2]
    assert not seen[1] & seen[2]
    assert all(seen)


def test_split_indices_rejects_bad_fractions(rng):
    with pytest.raises(ParameterError):
        split_indices(100, 0.5, 0.5, rng)


def _localized_tokens(rng, n=160, patches=16, dim=6):
    """Class 1 samples carry one strong activation in a single patch."""
    labels = np.arange(n) % 2
    tokens = {
        "cls": rng.normal(size=(n, dim)),
        "patches": 0.1 * rng.normal(size=(n, patches, dim)),
    }
    where = rng.integers(0, patches, size=n)
    tokens["patches"][labels == 1, where[labels == 1], 0] += 5.0
    return tokens, labels


@pytest.mark.parametrize("mode", ["cls_only", "cls_mean", "patch_mean", "patch_max"])
def test_patch_aggregate_probe_report_format(rng, mode):
    tokens, labels = _localized_tokens(rng)
    splits = split_indices(len(labels), 0.1, 0.2, rng.fork(0))
    metrics, _ = patch_aggregate_probe(tokens, labels, mode, splits, FAST_PROBE, rng.fork(1))
    rows = metrics.as_rows("localized")
    assert [row["metric"] for row in rows] == ["accuracy", "weighted_f1"]
    assert all(list(row) == REPORT_COLUMNS for row in rows)
    assert rows[0]["config"] == mode


def test_patch_max_finds_localized_features(rng):
    tokens, labels = _localized_tokens(rng)
    splits = split_indices(len(labels), 0.1, 0.2, rng.fork(0))
    patch_max, _ = patch_aggregate_probe(tokens, labels, "patch_max", splits, FAST_PROBE, Rng(1))
    cls_only, _ = patch_aggregate_probe(tokens, labels, "cls_only", splits, FAST_PROBE, Rng(1))
    assert patch_max.accuracy == 1.0
    assert patch_max.accuracy >= cls_only.accuracy


def test_report_round_trip(tmp_path):
    rows = [
        {"task": "tissue", "config": "cls_mean", "metric": "weighted_f1", "value": 0.5, "n_test": 10},
        {"task": "tissue", "config": "cls_only", "metric": "weighted_f1", "value": 0.25, "n_test": 10},
    ]
    path = tmp_path / REPORT_NAME
    write_report(rows, path)
    df = read_report(path)
    assert list(df.columns) == REPORT_COLUMNS
    assert df["value"].tolist() == [0.5, 0.25]


def test_read_report_errors(tmp_path):
    with pytest.raises(DataError):
        read_report(tmp_path / "missing.tsv")
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\tb\n1\t2\n")
    with pytest.raises(DataError):
        read_report(bad)


def test_compare_models(tmp_path):
    labels = np.zeros(40, dtype=int)
    preds_a = np.zeros(40, dtype=int)
    preds_b = np.r_[np.ones(15, dtype=int), np.zeros(25, dtype=int)]
    preds_a[:5] = 1
    preds_b[:5] = 0
    row = compare_models(preds_a, preds_b, labels, task="tissue", model_a="kde", model_b="koleo")
    assert list(row) == COMPARISON_COLUMNS
    assert (row["b"], row["c"]) == (10, 5)
    assert 0.0 <= row["p"] <= 1.0
    df = write_comparison_report([row], tmp_path / "comparison_report.tsv")
    assert list(df.columns) == COMPARISON_COLUMNS


def test_collect_reports(tmp_path):
    for name in ("run_a", "run_b"):
        run = tmp_path / name
        write_report(
            [{"task": "t", "config": "cls_mean", "metric": "accuracy", "value": 1.0, "n_test": 4}],
            run / REPORT_NAME,
        )
        pd.DataFrame([{column: 0 for column in METRIC_COLUMNS}]).to_csv(
            run / METRICS_NAME, sep="\t", index=False
        )
    reports, metrics = collect_reports([tmp_path / "run_a", tmp_path / "run_b"])
    assert reports["run"].tolist() == ["run_a", "run_b"]
    assert len(metrics) == 2


def test_collect_reports_errors(tmp_path):
    with pytest.raises(DataError):
        collect_reports([tmp_path / "missing"])
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        collect_reports([tmp_path / "empty"])
