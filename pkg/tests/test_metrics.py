import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhddbench.metrics import (
    CSV_HEADER,
    ConfusionMatrix,
    accumulate_confusion,
    compute_metrics,
    confusion_from_labels,
    render_confusion,
    report_from_json,
    serialize_report,
    top_confusions,
)


def brute_force(true, pred, k=10):
    """Per-sample counting with plain Python, independent of the confusion matrix."""
    prec, rec, f1 = [], [], []
    for c in range(k):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        pc = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else 0.0)
    acc = sum(1 for t, p in zip(true, pred) if t == p) / len(true)
    return sum(prec) / k, sum(rec) / k, sum(f1) / k, acc, prec, rec, f1


def two_class_block():
    counts = np.zeros((10, 10), dtype=np.int64)
    counts[:2, :2] = [[1, 1], [0, 2]]
    return ConfusionMatrix(counts)


def test_perfect_predictions():
    cm = confusion_from_labels(np.arange(10).repeat(3), np.arange(10).repeat(3))
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    r = compute_metrics(cm)
    assert r.precision == r.recall == r.f1 == r.accuracy == 1.0
    assert r.flagged_classes == []


def test_single_sample_cell():
    assert confusion_from_labels([1], [0]).counts[1, 0] == 1


def test_accumulation_is_associative():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 10, 200), rng.integers(0, 10, 200)
    halves = ConfusionMatrix()
    accumulate_confusion(halves, t[:100], p[:100])
    accumulate_confusion(halves, t[100:], p[100:])
    assert halves == confusion_from_labels(t, p)
    assert confusion_from_labels(t[:100], p[:100]) + confusion_from_labels(t[100:], p[100:]) == halves


def test_out_of_range_label():
    with pytest.raises(ValueError):
        confusion_from_labels([10], [0])
    with pytest.raises(ValueError):
        confusion_from_labels([0, 1], [0])


def test_two_class_hand_example():
    r = compute_metrics(two_class_block())
    c0, c1 = r.per_class[0], r.per_class[1]
    assert (c0.precision, c0.recall) == (1.0, 0.5)
    assert c0.f1 == pytest.approx(2 / 3, abs=1e-15)
    assert c1.precision == pytest.approx(2 / 3, abs=1e-15) and c1.recall == 1.0
    assert c1.f1 == pytest.approx(0.8, abs=1e-15)
    assert r.accuracy == 0.75
    assert r.flagged_classes == list(range(2, 10))
    assert r.f1 == pytest.approx((2 / 3 + 0.8) / 10, abs=1e-15)
    true = [0, 0, 1, 1]
    pred = [0, 1, 1, 1]
    bp, br, bf, ba, *_ = brute_force(true, pred)
    assert (r.precision, r.recall, r.f1, r.accuracy) == (bp, br, bf, ba)


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        compute_metrics(ConfusionMatrix())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=60))
def test_matches_brute_force_exactly(pairs):
    true, pred = zip(*pairs)
    r = compute_metrics(confusion_from_labels(true, pred))
    bp, br, bf, ba, prec, rec, f1 = brute_force(true, pred)
    assert (r.precision, r.recall, r.f1, r.accuracy) == (bp, br, bf, ba)
    assert [c.precision for c in r.per_class] == prec
    assert [c.f1 for c in r.per_class] == f1
    assert 0 <= r.accuracy <= 1
    assert r.f1 <= max(c.f1 for c in r.per_class)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=60),
       st.permutations(list(range(10))))
def test_class_relabelling_permutes_per_class(pairs, perm):
    perm = np.array(perm)
    true, pred = map(np.array, zip(*pairs))
    a = compute_metrics(confusion_from_labels(true, pred))
    b = compute_metrics(confusion_from_labels(perm[true], perm[pred]))
    for c in range(10):
        assert a.per_class[c] == b.per_class[perm[c]]
    assert a.accuracy == b.accuracy
    for key in ("precision", "recall", "f1"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-15)


def test_top_confusions():
    assert top_confusions(ConfusionMatrix(np.diag(np.arange(10)))) == []
    counts = np.diag(np.full(10, 50))
    counts[1, 0] = 35
    counts[4, 9] = 7
    counts[9, 4] = 7
    counts[2, 3] = 1
    cm = ConfusionMatrix(counts)
    assert top_confusions(cm, 3) == [(1, 0, 35), (4, 9, 7), (9, 4, 7)]
    assert len(top_confusions(cm, 10)) == 4
    with pytest.raises(ValueError):
        top_confusions(cm, 0)


def test_json_round_trip_and_rounding():
    rng = np.random.default_rng(0)
    r = compute_metrics(confusion_from_labels(rng.integers(0, 10, 300), rng.integers(0, 10, 300)),
                        model="CNN", metadata={"seed": 42, "epochs": 5})
    blob = serialize_report(r, "json")
    assert report_from_json(blob) == r
    d = json.loads(blob)
    assert list(d)[:5] == ["model", "precision", "recall", "f1", "accuracy"]
    assert d["precision"] == round(r.precision, 4) and d["raw"]["precision"] == r.precision
    assert len(d["confusion_matrix"]) == 10 and all(len(row) == 10 for row in d["confusion_matrix"])
    assert serialize_report(r, "json") == blob


def test_csv_layout_and_four_decimals():
    r = compute_metrics(two_class_block(), model="CNN")
    r.precision = 0.99591
    rows = list(csv.reader(io.StringIO(serialize_report(r, "csv").decode())))
    assert rows[0] == list(CSV_HEADER) == ["model", "precision", "recall", "f1", "accuracy"]
    assert rows[1][0] == "CNN" and rows[1][1] == "0.9959" and rows[1][4] == "0.7500"
    with pytest.raises(ValueError):
        serialize_report(r, "xml")


def test_render_confusion_has_headers():
    text = render_confusion(two_class_block())
    lines = text.splitlines()
    assert len(lines) == 11
    assert lines[0].split()[1:] == [str(i) for i in range(10)]
    assert [ln.split()[0] for ln in lines[1:]] == [str(i) for i in range(10)]
