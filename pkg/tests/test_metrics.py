import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermx import metrics as mx
from dermx.errors import ValidationError


def brute_force_report(y_true, y_pred, num_classes=7):
    """Independent per-sample oracle: tallies everything with plain loops."""
    n = len(y_true)
    cm = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1

    per_class = {}
    weighted = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    for c in range(num_classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        support = sum(1 for t in y_true if t == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = (precision, recall, f1, support)
        weighted["precision"] += support * precision
        weighted["recall"] += support * recall
        weighted["f1"] += support * f1
    accuracy = sum(1 for t, p in zip(y_true, y_pred) if t == p) / n
    return cm, per_class, {k: v / n for k, v in weighted.items()}, accuracy


class TestConfusionMatrix:
    def test_identity_pattern(self):
        cm = mx.confusion_matrix([0, 1, 2], [0, 1, 2])
        assert np.trace(cm) == 3 and cm.sum() == 3

    def test_single_off_diagonal_cell(self):
        cm = mx.confusion_matrix([0, 0], [1, 1])
        assert cm[0, 1] == 2 and cm.sum() == 2

    def test_matches_brute_force_tally(self, rng):
        y_true = rng.integers(0, 7, 1000)
        y_pred = rng.integers(0, 7, 1000)
        cm = mx.confusion_matrix(y_true, y_pred)
        expected, *_ = brute_force_report(list(y_true), list(y_pred))
        assert np.array_equal(cm, np.array(expected))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            mx.confusion_matrix([0, 1], [0])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            mx.confusion_matrix([0, 7], [0, 0])


class TestPerClassCounts:
    def test_identity_matrix_has_no_errors(self):
        cm = np.eye(7, dtype=np.int64)
        for c in range(7):
            counts = mx.per_class_counts(cm, c)
            assert counts.fp == 0 and counts.fn == 0

    def test_single_cell_reduction(self):
        cm = np.zeros((7, 7), dtype=np.int64)
        cm[0, 1] = 2
        counts = mx.per_class_counts(cm, 0)
        assert (counts.tp, counts.fn, counts.fp, counts.tn) == (0, 2, 0, 0)

    def test_absent_class_is_all_tn(self):
        cm = np.zeros((7, 7), dtype=np.int64)
        cm[1, 1] = 5
        counts = mx.per_class_counts(cm, 0)
        assert (counts.tp, counts.fp, counts.fn) == (0, 0, 0)
        assert counts.tn == 5

    def test_counts_always_sum_to_total(self, rng):
        cm = rng.integers(0, 20, (7, 7))
        for c in range(7):
            assert mx.per_class_counts(cm, c).total == cm.sum()


class TestRatioMetrics:
    def test_precision_example(self):
        counts = mx.PerClassCounts(tp=3, fp=1, fn=0, tn=0)
        assert mx.precision(counts) == 0.75

    def test_f1_fixed_point(self):
        assert mx.f1(1.0, 1.0) == 1.0

    def test_zero_denominator_flags_degenerate(self):
        counts = mx.PerClassCounts(tp=0, fp=0, fn=2, tn=5)
        p = mx.precision(counts)
        assert p == 0.0 and p.degenerate
        r = mx.recall(counts)
        assert r == 0.0 and not r.degenerate
        f = mx.f1(0.0, 0.0)
        assert f == 0.0 and f.degenerate

    def test_accuracy_is_trace_over_total(self, rng):
        cm = rng.integers(0, 30, (7, 7))
        assert mx.accuracy(cm) == pytest.approx(np.trace(cm) / cm.sum())

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValidationError):
            mx.accuracy(np.zeros((7, 7), dtype=np.int64))


class TestWeightedReport:
    def test_perfect_predictions(self):
        y = list(range(7)) * 3
        report = mx.report_from_predictions(y, y)
        assert report.accuracy == 1.0
        assert report.weighted_precision == 1.0
        assert report.weighted_recall == 1.0
        assert report.weighted_f1 == 1.0

    def test_single_class_data_fully_correct(self):
        report = mx.report_from_predictions([5] * 9, [5] * 9)
        assert report.weighted_precision == 1.0
        assert report.weighted_recall == 1.0
        assert report.weighted_f1 == 1.0

    def test_matches_per_sample_oracle(self, rng):
        for _ in range(25):
            n = int(rng.integers(1, 400))
            y_true = list(rng.integers(0, 7, n))
            y_pred = list(rng.integers(0, 7, n))
            report = mx.report_from_predictions(y_true, y_pred)
            cm, per_class, weighted, acc = brute_force_report(y_true, y_pred)
            assert np.array_equal(report.confusion, np.array(cm))
            assert report.accuracy == pytest.approx(acc, abs=1e-12)
            assert report.weighted_precision == pytest.approx(weighted["precision"], abs=1e-12)
            assert report.weighted_recall == pytest.approx(weighted["recall"], abs=1e-12)
            assert report.weighted_f1 == pytest.approx(weighted["f1"], abs=1e-12)
            for c, name in enumerate(report.per_class):
                m = report.per_class[name]
                p, r, f, s = per_class[c]
                assert m.precision == pytest.approx(p, abs=1e-12)
                assert m.recall == pytest.approx(r, abs=1e-12)
                assert m.f1 == pytest.approx(f, abs=1e-12)
                assert m.support == s

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)),
                    min_size=1, max_size=200))
    @settings(max_examples=60, deadline=None)
    def test_weighted_recall_equals_accuracy(self, pairs):
        y_true = [t for t, _ in pairs]
        y_pred = [p for _, p in pairs]
        report = mx.report_from_predictions(y_true, y_pred)
        assert report.weighted_recall == pytest.approx(report.accuracy, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)),
                    min_size=1, max_size=120),
           st.randoms(use_true_random=False))
    @settings(max_examples=40, deadline=None)
    def test_class_permutation_leaves_aggregates_unchanged(self, pairs, rnd):
        y_true = [t for t, _ in pairs]
        y_pred = [p for _, p in pairs]
        perm = list(range(7))
        rnd.shuffle(perm)
        base = mx.report_from_predictions(y_true, y_pred)
        permuted = mx.report_from_predictions([perm[t] for t in y_true],
                                              [perm[p] for p in y_pred])
        assert permuted.accuracy == pytest.approx(base.accuracy, abs=1e-12)
        assert permuted.weighted_precision == pytest.approx(base.weighted_precision, abs=1e-12)
        assert permuted.weighted_f1 == pytest.approx(base.weighted_f1, abs=1e-12)
        names = list(base.per_class)
        for c in range(7):
            assert permuted.per_class[names[perm[c]]] == base.per_class[names[c]]

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)),
                    min_size=1, max_size=120))
    @settings(max_examples=40, deadline=None)
    def test_f1_bounds(self, pairs):
        report = mx.report_from_predictions([t for t, _ in pairs], [p for _, p in pairs])
        for m in report.per_class.values():
            assert m.f1 <= 2 * min(m.precision, m.recall) + 1e-12
            assert m.f1 <= (m.precision + m.recall) / 2 + 1e-12
            for value in (m.precision, m.recall, m.f1, m.accuracy):
                assert 0.0 <= value <= 1.0


class TestSerialization:
    def test_json_and_csv_outputs(self, tmp_path, rng):
        y = rng.integers(0, 7, 80)
        p = rng.integers(0, 7, 80)
        report = mx.report_from_predictions(y, p)

        report.to_json(tmp_path / "report.json")
        import json

        data = json.loads((tmp_path / "report.json").read_text())
        assert set(data) == {"accuracy", "weighted", "per_class", "confusion_matrix"}
        assert len(data["per_class"]) == 7

        report.to_csv(tmp_path / "report.csv")
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "Class,Accuracy,Precision,Recall,F1-Score,Support"
        assert len(lines) == 1 + 7 + 1  # header, per-class rows, weighted row
        assert lines[-1].startswith("weighted avg")

    def test_confusion_csv_and_heatmap(self, tmp_path, rng):
        cm = mx.confusion_matrix(rng.integers(0, 7, 50), rng.integers(0, 7, 50))
        mx.confusion_to_csv(cm, tmp_path / "cm.csv")
        rows = (tmp_path / "cm.csv").read_text().strip().splitlines()
        assert len(rows) == 8
        mx.render_confusion_heatmap(cm, tmp_path / "cm.png")
        assert (tmp_path / "cm.png").stat().st_size > 0
