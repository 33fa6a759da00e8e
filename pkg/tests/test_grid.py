import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import iou_reference
from vmr.grid import (INVALID_LABEL, MomentGrid, TemporalInterval, enumerate_candidates,
                      grid_for_video, iou, scaled_labels)


def test_interval_invariants():
    iv = TemporalInterval(1.0, 4.0)
    assert iv.length == 3.0
    with pytest.raises(ValueError):
        TemporalInterval(4.0, 4.0)
    with pytest.raises(ValueError):
        TemporalInterval(-1.0, 2.0)
    with pytest.raises(ValueError):
        TemporalInterval(0.0, float("inf"))


@pytest.mark.parametrize("T,expected", [(1, 1), (4, 10), (16, 136)])
def test_candidate_counts(T, expected):
    grid = enumerate_candidates(T)
    assert grid.num_candidates == expected
    assert expected == T * (T + 1) // 2  # count oracle
    assert grid.valid_mask.sum() == expected


def test_single_clip_grid():
    grid = enumerate_candidates(1)
    assert grid.candidate_list == ((0, 0),)


def test_zero_clips_rejected():
    with pytest.raises(ValueError):
        enumerate_candidates(0)


def test_candidate_order_row_major():
    grid = enumerate_candidates(3)
    assert grid.candidate_list == ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def test_cell_interval_half_open():
    grid = enumerate_candidates(4, clip_duration=2.5)
    iv = grid.cell_interval(1, 2)
    assert iv.start == 2.5 and iv.end == 7.5


def test_iou_examples():
    assert iou(TemporalInterval(2, 6), TemporalInterval(2, 6)) == 1.0
    assert iou(TemporalInterval(0, 4), TemporalInterval(5, 9)) == 0.0
    assert iou(TemporalInterval(0, 4), TemporalInterval(2, 6)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_against_interval_arithmetic_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        s1, s2 = rng.uniform(0, 50, size=2)
        a = TemporalInterval(s1, s1 + rng.uniform(0.01, 30))
        b = TemporalInterval(s2, s2 + rng.uniform(0.01, 30))
        assert iou(a, b) == pytest.approx(
            iou_reference(a.start, a.end, b.start, b.end), abs=1e-9)


def test_iou_nested_equals_length_ratio():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        s = rng.uniform(0, 40)
        outer = TemporalInterval(s, s + rng.uniform(1.0, 20))
        u, v = np.sort(rng.uniform(outer.start, outer.end, size=2))
        if v - u < 1e-6:
            continue
        inner = TemporalInterval(u, v)
        assert iou(inner, outer) == pytest.approx(inner.length / outer.length, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.floats(0.01, 50), st.floats(0, 100), st.floats(0.01, 50))
def test_iou_symmetric_bounded(s1, l1, s2, l2):
    a, b = TemporalInterval(s1, s1 + l1), TemporalInterval(s2, s2 + l2)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    if (a.start, a.end) == (b.start, b.end):
        assert v == 1.0


def test_iou_one_iff_identical():
    a = TemporalInterval(1, 3)
    assert iou(a, TemporalInterval(1, 3.0001)) < 1.0


def test_scaled_labels_clamps():
    grid = enumerate_candidates(4, 1.0)
    # gt aligned with cell (0, 3): IoU 1 there
    labels = scaled_labels(TemporalInterval(0, 4), grid, 0.5, 1.0)
    assert labels[0, 3] == 1.0
    # cell (0, 1) has IoU 0.5 = t_min -> label 0
    assert iou(grid.cell_interval(0, 1), TemporalInterval(0, 4)) == 0.5
    assert labels[0, 1] == 0.0
    assert labels[1, 0] == INVALID_LABEL


def test_scaled_labels_midpoint():
    # IoU 0.75 rescaled by (0.5, 1.0) -> 0.5
    grid = enumerate_candidates(4, 1.0)
    labels = scaled_labels(TemporalInterval(0, 3), grid, 0.5, 1.0)
    assert iou(grid.cell_interval(0, 3), TemporalInterval(0, 3)) == 0.75
    assert labels[0, 3] == pytest.approx(0.5, abs=1e-12)


def test_scaled_labels_bad_thresholds():
    grid = enumerate_candidates(2)
    with pytest.raises(ValueError):
        scaled_labels(TemporalInterval(0, 1), grid, 0.6, 0.6)
    with pytest.raises(ValueError):
        scaled_labels(TemporalInterval(0, 1), grid, 0.8, 0.5)


def test_scaled_labels_monotone_in_iou():
    grid = enumerate_candidates(8, 1.0)
    gt = TemporalInterval(2.0, 5.0)
    labels = scaled_labels(gt, grid)
    ious = grid.candidate_ious(gt)
    ai, bi = grid.candidate_indices()
    vals = labels[ai, bi]
    order = np.argsort(ious)
    assert np.all(np.diff(vals[order]) >= -1e-12)


def test_cell_interval_roundtrip_bijection():
    grid = enumerate_candidates(7, 1.7)
    seen = set()
    for a, b in grid.candidate_list:
        iv = grid.cell_interval(a, b)
        key = (round(iv.start, 9), round(iv.end, 9))
        assert key not in seen
        seen.add(key)
        assert grid.best_cell(iv) == (a, b)


def test_grid_for_video_duration():
    grid = grid_for_video(16, 32.0)
    assert grid.clip_duration == 2.0
    assert grid.duration == 32.0


def test_best_cell_prefers_max_iou():
    grid = enumerate_candidates(4, 1.0)
    assert grid.best_cell(TemporalInterval(0.9, 3.1)) == (0, 3) or \
        grid.best_cell(TemporalInterval(0.9, 3.1)) == (1, 2)
    ious = grid.candidate_ious(TemporalInterval(0.9, 3.1))
    best = grid.best_cell(TemporalInterval(0.9, 3.1))
    k = grid.candidate_list.index(best)
    assert ious[k] == ious.max()
