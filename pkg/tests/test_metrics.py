import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.data import BinaryMapping
from fedsim.errors import DataError
from fedsim.metrics import (ConfusionMatrix, FunctionalCase, confusion, functional_eval, load_suite,
                            weighted_metrics)


def tally(true, pred, C):
    grid = [[0] * C for _ in range(C)]
    for t, p in zip(true, pred):
        grid[t][p] += 1
    return grid


def test_confusion_perfect_is_diagonal():
    cm = confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))


def test_confusion_all_class_zero():
    cm = confusion([0, 1, 2, 1], [0, 0, 0, 0], 3)
    assert cm.counts[:, 1:].sum() == 0 and cm.counts[:, 0].sum() == 4


def test_confusion_matches_tally_oracle(rng):
    true = rng.integers(0, 4, size=50).tolist()
    pred = rng.integers(0, 4, size=50).tolist()
    cm = confusion(true, pred, 4)
    assert cm.counts.tolist() == tally(true, pred, 4)
    assert cm.total == 50


def test_confusion_errors():
    with pytest.raises(ValueError, match="length"):
        confusion([0, 1], [0], 2)
    with pytest.raises(ValueError, match="outside"):
        confusion([0, 2], [0, 1], 2)


def test_weighted_perfect():
    r = weighted_metrics(ConfusionMatrix(np.diag([3, 5, 2])))
    assert r.weighted_precision == r.weighted_recall == r.weighted_f1 == 1.0


def test_weighted_binary_golden():
    r = weighted_metrics(ConfusionMatrix(np.array([[50, 0], [50, 0]])))
    # class 0: p = 50/100, r = 1, f1 = 2/3; class 1 never predicted: all 0
    assert r.precision.tolist() == [0.5, 0.0]
    assert r.recall.tolist() == [1.0, 0.0]
    assert abs(r.f1[0] - 2 / 3) <= 1e-12 and r.f1[1] == 0.0
    assert abs(r.weighted_f1 - 1 / 3) <= 1e-12
    assert abs(r.weighted_precision - 0.25) <= 1e-12
    assert abs(r.weighted_recall - 0.5) <= 1e-12


def test_weighted_single_class():
    r = weighted_metrics(ConfusionMatrix(np.array([[7, 0], [0, 0]])))
    assert r.weighted_f1 == 1.0


def test_weighted_empty_raises():
    with pytest.raises(ValueError):
        weighted_metrics(ConfusionMatrix(np.zeros((2, 2), dtype=int)))


def test_confusion_merge_is_elementwise():
    a = confusion([0, 1], [1, 1], 2)
    b = confusion([1, 0], [0, 0], 2)
    assert (a + b).counts.tolist() == confusion([0, 1, 1, 0], [1, 1, 0, 0], 2).counts.tolist()


matrices = st.integers(2, 5).flatmap(
    lambda C: st.lists(st.integers(0, 30), min_size=C * C, max_size=C * C)
    .map(lambda xs: np.array(xs).reshape(C, C))
    .filter(lambda m: m.sum() > 0))


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_metrics_in_unit_interval(m):
    r = weighted_metrics(ConfusionMatrix(m))
    for v in (r.weighted_precision, r.weighted_recall, r.weighted_f1):
        assert 0.0 <= v <= 1.0
    for arr in (r.precision, r.recall, r.f1):
        assert np.all((arr >= 0) & (arr <= 1))


@settings(max_examples=200, deadline=None)
@given(matrices, st.randoms(use_true_random=False))
def test_permutation_invariance(m, rnd):
    perm = list(range(m.shape[0]))
    rnd.shuffle(perm)
    a = weighted_metrics(ConfusionMatrix(m))
    b = weighted_metrics(ConfusionMatrix(m[np.ix_(perm, perm)]))
    for x, y in ((a.weighted_precision, b.weighted_precision), (a.weighted_recall, b.weighted_recall),
                 (a.weighted_f1, b.weighted_f1)):
        assert x == pytest.approx(y, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5), st.integers(1, 20), st.randoms(use_true_random=False))
def test_equal_support_recall_is_accuracy(C, support, rnd):
    m = np.zeros((C, C), dtype=int)
    for t in range(C):
        for _ in range(support):
            m[t, rnd.randrange(C)] += 1
    r = weighted_metrics(ConfusionMatrix(m))
    assert r.weighted_recall == pytest.approx(np.trace(m) / m.sum(), abs=1e-12)


# -- functional evaluation --------------------------------------------------

CLASSES = ["none", "hate", "offensive"]
MAPPING = BinaryMapping({"hate", "offensive"}, {"none"})


def fixed(preds):
    return lambda texts: [preds[t] for t in texts]


def test_functional_always_hate():
    cases = [FunctionalCase(f"t{i}", "F1", "hate") for i in range(4)]
    results, _ = functional_eval(cases, lambda texts: ["offensive"] * len(texts), MAPPING, CLASSES)
    assert results["F1"].accuracy == 1.0 and results["F1"].n_cases == 4


def test_functional_two_groups_hand_tally():
    cases = [FunctionalCase("a", "F1", "hate"), FunctionalCase("b", "F1", "not-hate"),
             FunctionalCase("c", "F2", "hate"), FunctionalCase("d", "F2", "not-hate")]
    preds = {"a": "hate", "b": "none", "c": "hate", "d": "offensive"}
    results, per_case = functional_eval(cases, fixed(preds), MAPPING, CLASSES)
    assert {k: v.accuracy for k, v in results.items()} == {"F1": 1.0, "F2": 0.5}
    assert [p.correct for p in per_case] == [True, True, True, False]
    assert sum(r.n_correct for r in results.values()) == sum(p.correct for p in per_case)


def test_functional_missing_group_warns(caplog):
    cases = [FunctionalCase("a", "F1", "hate")]
    with caplog.at_level(logging.WARNING):
        results, _ = functional_eval(cases, fixed({"a": "hate"}), MAPPING, CLASSES, functionalities=["F1", "F9"])
    assert list(results) == ["F1"]
    assert "F9" in caplog.text


def test_functional_mapping_errors():
    cases = [FunctionalCase("a", "F1", "hate")]
    with pytest.raises(DataError, match="missing class"):
        functional_eval(cases, fixed({"a": "hate"}), BinaryMapping({"hate"}, {"none"}), CLASSES)


def test_functional_case_validation():
    with pytest.raises(DataError):
        FunctionalCase("x", "", "hate")
    with pytest.raises(DataError):
        FunctionalCase("x", "F1", "maybe")


def test_load_suite(tmp_path):
    path = tmp_path / "suite.jsonl"
    path.write_text(json.dumps({"text": "x", "functionality": "F1", "gold": "hate"}) + "\n"
                    + json.dumps({"text": "y", "functionality": "F2", "gold": "nope"}) + "\n")
    with pytest.raises(DataError, match="suite.jsonl:2"):
        load_suite(path)
