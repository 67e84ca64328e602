import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cov3d.dataio import AnnotationSet, ScanRecord
from cov3d.errors import DataError
from cov3d.metrics import (
    ConfusionMatrix,
    evaluate_presence,
    evaluate_task2,
    macro_f1,
    report_from_confusion,
)
from oracles import oracle_f1


def test_perfect_predictions():
    labels = ["pos", "neg", "pos", "neg"]
    assert macro_f1(labels, labels, ["pos", "neg"]) == 1.0


@settings(max_examples=30)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=25))
def test_truth_equals_prediction_scores_one(labels):
    assert macro_f1(labels, labels, sorted(set(labels))) == 1.0


def test_hand_computed_example():
    truth = ["pos", "pos", "neg", "neg"]
    predicted = ["pos", "neg", "neg", "neg"]
    # F1_pos = 2/3, F1_neg = 0.8, macro = 0.733333
    cm = ConfusionMatrix.from_labels(truth, predicted, ["pos", "neg"])
    report = report_from_confusion("presence", cm)
    assert abs(report.per_class["pos"].f1 - 2 / 3) < 1e-12
    assert abs(report.per_class["neg"].f1 - 0.8) < 1e-12
    assert abs(report.macro_f1 - 0.733333) < 5e-7


def test_single_class_predictions_closed_form():
    truth = ["a", "a", "b", "b"]
    predicted = ["a", "a", "a", "a"]
    # class a: P = 0.5, R = 1 -> F1 = 2/3; class b scores 0
    expected = 0.5 * (2 * 0.5 * 1.0 / 1.5)
    assert abs(macro_f1(truth, predicted, ["a", "b"]) - expected) < 1e-12


def test_absent_class_counts_as_zero():
    truth = ["a", "a"]
    predicted = ["a", "a"]
    assert macro_f1(truth, predicted, ["a", "b"]) == 0.5


def test_empty_input_rejected():
    with pytest.raises(DataError, match="empty"):
        macro_f1([], [], ["a"])


def test_label_outside_class_set_rejected():
    with pytest.raises(DataError):
        macro_f1(["a"], ["z"], ["a", "b"])


def test_matches_oracle_randomized(rng):
    classes = list(range(4))
    for _ in range(200):
        n = int(rng.integers(1, 20))
        truth = rng.integers(0, 4, n).tolist()
        predicted = rng.integers(0, 4, n).tolist()
        assert macro_f1(truth, predicted, classes) == oracle_f1(truth, predicted, classes)


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30),
       st.randoms())
def test_permutation_invariance(pairs, shuffler):
    truth = [t for t, _ in pairs]
    predicted = [p for _, p in pairs]
    before = macro_f1(truth, predicted, list(range(4)))
    shuffled = list(pairs)
    shuffler.shuffle(shuffled)
    after = macro_f1([t for t, _ in shuffled], [p for _, p in shuffled], list(range(4)))
    assert before == after


def test_relabeling_invariance(rng):
    mapping = {0: "w", 1: "x", 2: "y", 3: "z"}
    truth = rng.integers(0, 4, 25).tolist()
    predicted = rng.integers(0, 4, 25).tolist()
    direct = macro_f1(truth, predicted, list(range(4)))
    relabeled = macro_f1([mapping[t] for t in truth], [mapping[p] for p in predicted],
                         [mapping[c] for c in range(4)])
    assert direct == relabeled


def _annotations():
    records = [
        ScanRecord("v1", "validation", True, 1),
        ScanRecord("v2", "validation", True, 3),
        ScanRecord("v3", "validation", True, 4),
        ScanRecord("v4", "validation", True, None),
        ScanRecord("v5", "validation", False, None),
    ]
    return AnnotationSet(records)


def test_evaluate_task2_restriction():
    annotations = _annotations()
    predictions = {"v1": 1, "v2": 3, "v3": 4, "v4": 2, "v5": 1}
    report = evaluate_task2(annotations, predictions)
    assert report.n_items == 3  # only the severity-annotated scans
    # classes absent from the annotated truth still count toward the macro
    assert report.macro_f1 == 0.75


def test_evaluate_task2_ignores_unannotated_mistakes():
    records = [ScanRecord(f"s{c}", "validation", True, c) for c in (1, 2, 3, 4)]
    records += [ScanRecord("extra", "validation", True, None),
                ScanRecord("neg", "validation", False, None)]
    annotations = AnnotationSet(records)
    predictions = {"s1": 1, "s2": 2, "s3": 3, "s4": 4, "extra": 4, "neg": 2}
    report = evaluate_task2(annotations, predictions)
    assert report.n_items == 4
    assert report.macro_f1 == 1.0  # wrong answers on unannotated scans are ignored


def test_evaluate_task2_coverage_error():
    with pytest.raises(DataError, match="v2"):
        evaluate_task2(_annotations(), {"v1": 1, "v3": 4})


def test_evaluate_presence_all_labeled():
    annotations = _annotations()
    predictions = {"v1": True, "v2": True, "v3": True, "v4": False, "v5": False}
    report = evaluate_presence(annotations, predictions)
    assert report.n_items == 5
    assert report.macro_f1 < 1.0  # v4 is a positive predicted negative


def test_table2_confusion_hand_example():
    # validation severity counts 22, 10, 22, 5; perfect except one
    # critical->severe confusion:
    # F1(3) = 44/45, F1(4) = 8/9, macro = (1 + 1 + 44/45 + 8/9) / 4
    truth = [1] * 22 + [2] * 10 + [3] * 22 + [4] * 5
    predicted = [1] * 22 + [2] * 10 + [3] * 22 + [4] * 4 + [3]
    expected = (1.0 + 1.0 + 44 / 45 + 8 / 9) / 4
    assert abs(macro_f1(truth, predicted, [1, 2, 3, 4]) - expected) < 1e-12
    assert abs(expected - 0.9666666666666667) < 1e-12


def test_report_serialization(tmp_path):
    report = evaluate_task2(_annotations(), {"v1": 1, "v2": 3, "v3": 3})
    text = report.to_text()
    assert "macro_f1" in text and "severity" in text
    path = tmp_path / "report.kv"
    report.write_kv(path)
    lines = dict(line.split("=", 1) for line in path.read_text().strip().splitlines())
    assert float(lines["macro_f1"]) == report.macro_f1
    assert int(lines["n_items"]) == 3
