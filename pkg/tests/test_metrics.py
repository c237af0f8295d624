import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from malariadx.errors import RejectedInputError, UndefinedMetricError
from malariadx.metrics import (ConfusionMatrix, MetricsReport, accuracy, confusion,
                               evaluate_predictions, format_report, from_csv, parse_report,
                               precision, recall, reference_reports, to_csv)

# the published comparison, one tab-separated row per model
PUBLISHED = """\
Random Forest\t0.651\t0.740\t0.740
VGG16\t0.937\t0.529\t0.744
Watershed Segmentation\t0.90\t0.643\t0.662
Proposed Model\t0.9875\t0.993\t0.995"""


def count_oracle(p, y, t):
    tp = sum(1 for a, b in zip(p, y) if a >= t and b == 1)
    tn = sum(1 for a, b in zip(p, y) if a < t and b == 0)
    fp = sum(1 for a, b in zip(p, y) if a >= t and b == 0)
    fn = sum(1 for a, b in zip(p, y) if a < t and b == 1)
    return tp, tn, fp, fn


pairs = st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60)


# ---------------------------------------------------------------------------
# confusion


def test_confusion_example():
    assert confusion([0.9, 0.1], [1, 0]) == ConfusionMatrix(1, 1, 0, 0)


def test_all_negative():
    assert confusion([0.1, 0.2, 0.49], [0, 0, 0]) == ConfusionMatrix(0, 3, 0, 0)


def test_threshold_is_inclusive():
    assert confusion([0.5], [1]) == ConfusionMatrix(tp=1)


def test_counting_oracle(rng):
    p, y = rng.random(1000), rng.integers(0, 2, 1000)
    cm = confusion(p, y, 0.37)
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == count_oracle(p, y, 0.37)


@pytest.mark.parametrize("p,y", [([0.5], [1, 0]), ([0.5], [0.5]), ([np.nan], [1])])
def test_confusion_rejects(p, y):
    with pytest.raises(RejectedInputError):
        confusion(p, y)


def test_negative_counts_rejected():
    with pytest.raises(RejectedInputError):
        ConfusionMatrix(tp=-1)


# ---------------------------------------------------------------------------
# formulas


def test_accuracy_examples():
    assert accuracy(ConfusionMatrix(1, 1, 0, 0)) == 100.0
    assert accuracy(ConfusionMatrix(2, 2, 1, 0)) == 80.0
    # a fraction of 0.9875 is 98.75 in percent
    assert accuracy(ConfusionMatrix(tp=79, tn=0, fp=1, fn=0)) == 98.75


def test_precision_recall_examples():
    assert precision(ConfusionMatrix(tp=3, fp=1)) == 0.75
    assert precision(ConfusionMatrix(tp=5, tn=3)) == 1.0
    assert recall(ConfusionMatrix(tp=4, fn=1)) == 0.8
    assert recall(ConfusionMatrix(tp=2, fp=7)) == 1.0


def test_undefined_metrics_raise():
    with pytest.raises(UndefinedMetricError):
        accuracy(ConfusionMatrix())
    with pytest.raises(UndefinedMetricError):
        precision(ConfusionMatrix(tn=3, fn=2))
    with pytest.raises(UndefinedMetricError):
        recall(ConfusionMatrix(tn=3, fp=2))


def test_undefined_reported_as_not_applicable():
    r = evaluate_predictions("m", [0.1, 0.2], [0, 0])
    assert r.precision is None and r.recall is None and r.accuracy == 1.0
    assert r.rendered() == ("1.0000", "n/a", "n/a")


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_formulas_match_direct_evaluation(tp, tn, fp, fn):
    cm = ConfusionMatrix(tp, tn, fp, fn)
    if tp + tn + fp + fn:
        assert abs(accuracy(cm) - 100 * (tp + tn) / (tp + tn + fp + fn)) <= 1e-12
    if tp + fp:
        assert abs(precision(cm) - tp / (tp + fp)) <= 1e-12
    if tp + fn:
        assert abs(recall(cm) - tp / (tp + fn)) <= 1e-12


@given(pairs)
def test_threshold_monotonicity(data):
    p = [a for a, _ in data]
    y = [b for _, b in data]
    prev = None
    for t in sorted(set(p)) + [1.01]:
        cm = confusion(p, y, t)
        if prev is not None:
            assert cm.fp <= prev.fp and cm.tp <= prev.tp
        prev = cm


@given(pairs, st.randoms(use_true_random=False))
def test_permutation_invariance(data, rnd):
    shuffled = list(data)
    rnd.shuffle(shuffled)
    a = confusion(*zip(*data))
    b = confusion(*zip(*shuffled))
    assert a == b


# ---------------------------------------------------------------------------
# reports


def test_reference_fixture_matches_published_rows():
    rows = [line.split("\t") for line in PUBLISHED.splitlines()]
    refs = reference_reports()
    assert [r.model for r in refs] == [row[0] for row in rows]
    for r, row in zip(refs, rows):
        assert list(r.rendered()) == row[1:]


def test_format_reference_table():
    text = format_report(reference_reports())
    lines = text.splitlines()
    assert lines[0].split() == ["Model", "Name", "Accuracy", "Precision", "Recall"]
    published = [line.split("\t") for line in PUBLISHED.splitlines()]
    for line, row in zip(lines[1:], published):
        name, *values = line.rsplit(None, 3)
        assert [name.rstrip(), *values] == row
    assert "0.993" in text and "0.995" in text and "0.9875" in text


def test_empty_report_is_header_only():
    text = format_report([])
    assert text.count("\n") == 1 and parse_report(text) == []


@given(st.lists(st.tuples(
    st.text(st.characters(whitelist_categories=("L", "N"), max_codepoint=127), min_size=1, max_size=12)
    .map(lambda s: s + " x"),
    st.one_of(st.none(), st.integers(0, 10_000)),
    st.one_of(st.none(), st.integers(0, 10_000)),
    st.one_of(st.none(), st.integers(0, 10_000))), max_size=6))
def test_table_and_csv_round_trip(rows):
    reports = [MetricsReport(name, *(None if v is None else v / 10_000 for v in vals))
               for name, *vals in rows]
    assert parse_report(format_report(reports)) == reports
    assert from_csv(to_csv(reports)) == reports


def test_csv_is_byte_deterministic():
    refs = reference_reports()
    assert to_csv(refs) == to_csv(reference_reports())
    assert to_csv(refs).splitlines()[0] == "model,accuracy,precision,recall"


def test_bad_reports_rejected():
    with pytest.raises(RejectedInputError):
        MetricsReport("m", 1.5, None, None)
    with pytest.raises(RejectedInputError):
        MetricsReport("a,b", 0.5, 0.5, 0.5)
    with pytest.raises(RejectedInputError):
        parse_report("not a table\n")
    with pytest.raises(RejectedInputError):
        from_csv("a,b\n")
