import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from toolseg.metrics import (ConfusionMatrix, EvalReport, binarize, boundary, boundary_f1,
                             class_iou, confusion_matrix, evaluate, format_table, jaccard,
                             overall_pixel, per_class, summarize)

WORKED = [[50, 10], [5, 35]]


def oracle_counts(gt, pred, n_classes=2):
    c = [[0] * n_classes for _ in range(n_classes)]
    for g, p in zip(np.ravel(gt).tolist(), np.ravel(pred).tolist()):
        c[g][p] += 1
    return c


def oracle_scores(c):
    n = len(c)
    g = [sum(c[i]) for i in range(n)]
    p = [sum(c[i][j] for i in range(n)) for j in range(n)]
    op = sum(c[i][i] for i in range(n)) / sum(g)
    pcs = [c[i][i] / g[i] for i in range(n) if g[i] > 0]
    ious = [c[i][i] / (g[i] + p[i] - c[i][i]) for i in range(n) if g[i] + p[i] > 0]
    return op, sum(pcs) / len(pcs), sum(ious) / len(ious)


# ---------------------------------------------------------------- binarize


def test_binarize_extremes_and_tie():
    assert not binarize(np.full((3, 3), -1.0)).any()
    assert binarize(np.full((3, 3), 1.0)).all()
    assert binarize(np.array([0.0, 1e-9, -1e-9])).tolist() == [0, 1, 0]
    assert binarize(np.array([0.5]), threshold=0.5).tolist() == [0]


def test_binarize_matches_loop():
    x = np.random.default_rng(0).uniform(-1, 1, size=(9, 11))
    out = binarize(x, 0.1)
    for idx in np.ndindex(x.shape):
        assert out[idx] == (1 if x[idx] > 0.1 else 0)


# ---------------------------------------------------------------- confusion


def test_confusion_worked_example():
    c = confusion_matrix(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    assert c.to_list() == [[1, 1], [0, 2]]


def test_perfect_prediction_is_diagonal():
    gt = np.random.default_rng(1).integers(0, 3, size=(6, 7))
    c = confusion_matrix(gt, gt, 3)
    assert np.count_nonzero(c.counts - np.diag(np.diag(c.counts))) == 0
    assert c.total == gt.size


def test_confusion_additive():
    rng = np.random.default_rng(2)
    g1, p1, g2, p2 = (rng.integers(0, 2, size=(5, 5)) for _ in range(4))
    joint = confusion_matrix(np.concatenate([g1, g2]), np.concatenate([p1, p2]))
    assert joint == confusion_matrix(g1, p1) + confusion_matrix(g2, p2)


def test_out_of_range_label_reported():
    with pytest.raises(ValueError, match="label 2"):
        confusion_matrix(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError, match="label -1"):
        confusion_matrix(np.array([0, 1]), np.array([-1, 1]))


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_matrix_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix([[1]])
    with pytest.raises(ValueError):
        ConfusionMatrix([[1, -1], [0, 0]])


def test_totals():
    c = ConfusionMatrix(WORKED)
    assert c.gt_totals.tolist() == [60, 40]
    assert c.pred_totals.tolist() == [55, 45]


# ---------------------------------------------------------------- scores


def test_worked_example_scores():
    assert overall_pixel(WORKED) == pytest.approx(0.85, abs=1e-12)
    assert per_class(WORKED) == pytest.approx(0.5 * (50 / 60 + 35 / 40), abs=1e-12)
    assert per_class(WORKED) == pytest.approx(0.8541666666666667, abs=1e-12)
    ious, mean = jaccard(WORKED)
    assert ious == pytest.approx([50 / 65, 0.7], abs=1e-12)
    assert mean == pytest.approx(0.7346153846153847, abs=1e-12)


def test_diagonal_scores_one():
    c = np.diag([4, 9])
    assert overall_pixel(c) == per_class(c) == jaccard(c)[1] == 1.0


def test_zero_diagonal_scores_zero():
    c = [[0, 7], [3, 0]]
    assert overall_pixel(c) == 0.0
    assert jaccard(c)[1] == 0.0


def test_absent_class_excluded():
    assert per_class([[10, 0], [0, 0]]) == 1.0
    ious, mean = jaccard([[10, 0], [0, 0]])
    assert math.isnan(ious[1]) and mean == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(1, 1), (3, 4), (16, 16)]))
def test_scores_equal_pixel_oracle(seed, shape):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, 2, size=shape), rng.integers(0, 2, size=shape)
    c = confusion_matrix(gt, pred)
    assert c.to_list() == oracle_counts(gt, pred)
    op, pc, ji = oracle_scores(oracle_counts(gt, pred))
    assert (overall_pixel(c), per_class(c), jaccard(c)[1]) == (op, pc, ji)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=4, max_size=4).filter(lambda v: sum(v) > 0))
def test_jaccard_bounded_by_recall_and_precision(v):
    c = ConfusionMatrix(np.array(v).reshape(2, 2))
    g, p = c.gt_totals, c.pred_totals
    for i, iou in enumerate(class_iou(c)):
        if math.isnan(iou):
            continue
        bound = min(c.counts[i, i] / g[i] if g[i] else 1.0, c.counts[i, i] / p[i] if p[i] else 1.0)
        assert 0.0 <= iou <= bound + 1e-15 <= 1.0 + 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_permutation_invariance_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, 2, size=64), rng.integers(0, 2, size=64)
    perm = rng.permutation(64)
    a, b = summarize(confusion_matrix(gt, pred)), summarize(confusion_matrix(gt[perm], pred[perm]))
    assert a == b
    assert jaccard(confusion_matrix(gt, pred))[1] == pytest.approx(
        jaccard(confusion_matrix(pred, gt))[1], abs=1e-15)


# ---------------------------------------------------------------- boundary F1


def exhaustive_boundary_f1(gt, pred, tol):
    bg, bp = np.argwhere(boundary(gt)), np.argwhere(boundary(pred))
    if len(bg) == 0 and len(bp) == 0:
        return 1.0
    if len(bg) == 0 or len(bp) == 0:
        return 0.0
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    precision = float((d.min(axis=1) <= tol).mean())
    recall = float((d.min(axis=0) <= tol).mean())
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def rect(h=40, w=40, box=(10, 30, 8, 28)):
    m = np.zeros((h, w), np.uint8)
    m[box[0]:box[1], box[2]:box[3]] = 1
    return m


def test_boundary_f1_identity_and_empty():
    m = rect()
    assert boundary_f1(m, m, 0) == 1.0
    assert boundary_f1(m, np.zeros_like(m), 2) == 0.0
    assert boundary_f1(np.zeros_like(m), np.zeros_like(m), 2) == 1.0


def test_dilated_rectangle_within_one_pixel():
    m = rect()
    dilated = ndimage.binary_dilation(m).astype(np.uint8)
    assert exhaustive_boundary_f1(m, dilated, 1) == 1.0
    assert boundary_f1(m, dilated, 1) == 1.0
    assert boundary_f1(m, dilated, 0) < 1.0


@pytest.mark.parametrize("seed", range(5))
def test_boundary_f1_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    gt = ndimage.binary_opening(rng.random((24, 24)) > 0.5).astype(np.uint8)
    pred = ndimage.binary_opening(rng.random((24, 24)) > 0.5).astype(np.uint8)
    for tol in (0, 1, 2, 3.5):
        assert boundary_f1(gt, pred, tol) == pytest.approx(exhaustive_boundary_f1(gt, pred, tol), abs=1e-12)


# ---------------------------------------------------------------- evaluate


def mask_set(n=6, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for k in range(n):
        gt = np.zeros((16, 16), np.uint8)
        y, x = rng.integers(0, 10, size=2)
        gt[y:y + 5, x:x + 4] = 1
        image = np.repeat((gt * 2.0 - 1.0)[..., None], 3, axis=2).astype(np.float32)
        items.append((image, gt, f"seq{k % 2}"))
    return items


def test_oracle_model_scores_one():
    report = evaluate(lambda img: img[..., :1], mask_set())
    m = report.metrics
    assert m["op"] == m["pc"] == m["ji"] == m["fg_iou"] == 1.0
    assert report.n_samples == 6 and set(report.sequences) == {"seq0", "seq1"}


def test_torch_module_model(tmp_path):
    from toolseg.networks import IdentitySegmenter
    report = evaluate(IdentitySegmenter(), mask_set(), boundary_tolerance=2)
    assert report.metrics["ji"] == 1.0 and report.boundary_f1 == 1.0


def test_constant_background_model():
    items = mask_set()
    report = evaluate(lambda img: -np.ones(img.shape[:2]), items)
    n_bg = sum(int((gt == 0).sum()) for _, gt, _ in items)
    total = sum(gt.size for _, gt, _ in items)
    assert report.metrics["ji"] == pytest.approx(0.5 * (n_bg / total + 0.0), abs=1e-15)
    assert report.metrics["fg_iou"] == 0.0


def test_report_consistent_with_serialized_matrix():
    report = evaluate(lambda img: np.roll(img[..., 0], 1, axis=1), mask_set(), boundary_tolerance=1)
    data = json.loads(report.to_json())
    back = EvalReport.from_dict(data)
    assert back.pooled == report.pooled
    assert summarize(ConfusionMatrix(data["pooled"]["confusion"])) == report.metrics
    assert data["pooled"]["ji"] == report.metrics["ji"]
    pooled = sum(report.sequences.values(), ConfusionMatrix.zeros())
    assert pooled == report.pooled


def test_dim_mismatch_skipped():
    items = mask_set(3)
    items.append((np.zeros((8, 8, 3), np.float32), np.zeros((16, 16), np.uint8), "bad"))
    report = evaluate(lambda img: img[..., 0], items)
    assert report.n_skipped == 1 and report.n_samples == 3


def test_model_rejecting_dims_is_skipped():
    from toolseg.networks import GeneratorSpec, build_generator
    net = build_generator(GeneratorSpec(3, 1, base_width=2, n_residual_blocks=0), 0)
    items = [(np.zeros((18, 16, 3), np.float32), np.zeros((18, 16), np.uint8))]
    assert evaluate(net, items).n_skipped == 1


def test_format_table_rows():
    r1 = evaluate(lambda img: img[..., 0], mask_set())
    r2 = evaluate(lambda img: -np.ones(img.shape[:2]), mask_set())
    table = format_table({"oracle": r1, "background": r2})
    lines = table.splitlines()
    assert "oracle" in lines[0] and "background" in lines[0]
    assert lines[1].startswith("seq0") and lines[-1].startswith("Pooled")
    assert "1.000" in lines[-1]
