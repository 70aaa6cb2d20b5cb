import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score, jaccard_score

from deflect.metrics import compute_metrics, confusion_matrix


def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1])
    m = compute_metrics(y, y, 3)
    assert np.all(m.f1 == 1) and np.all(m.iou == 1)
    assert m.mean_f1 == m.mean_iou == m.accuracy == 1.0


def test_disjoint_class_has_zero_iou():
    m = compute_metrics([1, 1, 0], [0, 0, 1], 2)
    assert m.iou[0] == 0 and m.iou[1] == 0


def test_three_class_hand_computed():
    # true 0: predicted 0,0,1 / true 1: predicted 1,2 / true 2: predicted 2,2,2,0
    labels = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    preds = [0, 0, 1, 1, 2, 2, 2, 2, 0]
    m = compute_metrics(preds, labels, 3)
    np.testing.assert_array_equal(m.confusion, [[2, 1, 0], [0, 1, 1], [1, 0, 3]])
    # class 0: tp 2, fp 1, fn 1 -> 4/6; class 1: tp 1, fp 1, fn 1 -> 2/4; class 2: tp 3, fp 1, fn 1 -> 6/8
    np.testing.assert_allclose(m.f1, [4 / 6, 2 / 4, 6 / 8])
    np.testing.assert_allclose(m.iou, [2 / 4, 1 / 3, 3 / 5])
    assert m.mean_f1 == pytest.approx((4 / 6 + 1 / 2 + 3 / 4) / 3)


def test_mean_over_present_classes_only():
    m = compute_metrics([0, 1, 1], [0, 1, 1], 4)
    assert m.mean_f1 == 1.0
    assert list(m.present) == [True, True, False, False]


def test_ignore_index_excluded():
    m = compute_metrics(np.array([[0, 1], [1, 1]]), np.array([[0, 255], [1, 255]]), 2, ignore_index=255)
    assert m.confusion.sum() == 2 and m.mean_f1 == 1.0


def test_bad_inputs():
    with pytest.raises(ValueError):
        compute_metrics([], [], 3)
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0], 2)
    with pytest.raises(ValueError):
        compute_metrics([0, 3], [0, 1], 2)
    with pytest.raises(ValueError):
        compute_metrics([255], [255], 2, ignore_index=255)


labels_and_preds = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 3), min_size=n, max_size=n), st.lists(st.integers(0, 3), min_size=n, max_size=n))
)


@settings(max_examples=60, deadline=None)
@given(labels_and_preds, st.permutations(range(4)))
def test_label_permutation_symmetry(pair, perm):
    labels, preds = map(np.array, pair)
    perm = np.array(perm)
    a = compute_metrics(preds, labels, 4)
    b = compute_metrics(perm[preds], perm[labels], 4)
    assert a.mean_f1 == pytest.approx(b.mean_f1) and a.mean_iou == pytest.approx(b.mean_iou)
    assert a.confusion.sum() == len(labels)
    assert 0 <= a.mean_f1 <= 1 and 0 <= a.mean_iou <= 1


@settings(max_examples=60, deadline=None)
@given(labels_and_preds)
def test_agrees_with_sklearn(pair):
    labels, preds = map(np.array, pair)
    present = np.unique(labels)
    m = compute_metrics(preds, labels, 4)
    assert m.mean_f1 == pytest.approx(f1_score(labels, preds, labels=present, average="macro", zero_division=0))
    assert m.mean_iou == pytest.approx(jaccard_score(labels, preds, labels=present, average="macro", zero_division=0))
    np.testing.assert_array_equal(confusion_matrix(preds, labels, 4).sum(1)[present] > 0, True)
