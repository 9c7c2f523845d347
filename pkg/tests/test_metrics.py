import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metric_oracle import FastOracle, oracle, small_masks, to_mask
from ugcemt.errors import MetricUndefinedError, ShapeError
from ugcemt.metrics import (MetricReport, asd, dice, disparity, evaluate_case, hd95, jaccard,
                            mean_report, surface, surface_distances)


def cube(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m


def test_identical_masks():
    m = cube((8, 8, 8), (2, 2, 2), (6, 6, 6))
    assert dice(m, m) == 1.0 and jaccard(m, m) == 1.0
    assert hd95(m, m) == 0.0 and asd(m, m) == 0.0


def test_dice_jaccard_examples():
    a = np.zeros((1, 1, 4), bool); a[0, 0, :2] = True
    b = np.zeros((1, 1, 4), bool); b[0, 0, 1:3] = True
    assert dice(a, b) == 0.5
    assert jaccard(a, b) == pytest.approx(1 / 3)
    empty = np.zeros((2, 2, 2), bool)
    assert dice(empty, empty) == 1.0 and jaccard(empty, empty) == 1.0
    assert dice(empty, ~empty) == 0.0


def test_disjoint_cubes_hd95_is_gap():
    a = cube((12, 4, 4), (0, 0, 0), (4, 4, 4))
    b = cube((12, 4, 4), (8, 0, 0), (12, 4, 4))
    # nearest surfaces of the two cubes are the facing planes x=3 and x=8
    assert asd(a, b) >= 5.0
    assert hd95(a, b) >= 5.0


def test_surface_of_solid_cube():
    m = cube((5, 5, 5), (0, 0, 0), (5, 5, 5))
    s = surface(m)
    assert s.sum() == 125 - 27  # grid border counts as background


def test_undefined_on_empty():
    empty = np.zeros((4, 4, 4), bool)
    full = cube((4, 4, 4), (1, 1, 1), (3, 3, 3))
    with pytest.raises(MetricUndefinedError):
        hd95(empty, full)
    with pytest.raises(MetricUndefinedError):
        asd(full, empty)
    r = evaluate_case(empty, full, (1, 1, 1), "x")
    assert math.isnan(r.hd95) and math.isnan(r.asd) and r.dice == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_spacing_scales_distances():
    a = cube((10, 6, 6), (1, 1, 1), (4, 4, 4))
    b = cube((10, 6, 6), (5, 1, 1), (8, 4, 4))
    base = surface_distances(a, b)
    scaled = surface_distances(a, b, (2.0, 2.0, 2.0))
    assert np.allclose(scaled, 2 * base)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_dice_jaccard_relation_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((4, 4, 4)) < 0.4, rng.random((4, 4, 4)) < 0.4
    d, j = dice(p, g), jaccard(p, g)
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)
    assert dice(g, p) == d and jaccard(g, p) == j
    assert disparity(p, g) == pytest.approx(1 - j)
    if p.any() and g.any():
        assert hd95(p, g) == pytest.approx(hd95(g, p), abs=1e-12)
        assert asd(p, g) == pytest.approx(asd(g, p), abs=1e-12)


def test_against_loop_oracle_random():
    rng = np.random.default_rng(7)
    spacings = [(1.0, 1.0, 1.0), (1.0, 1.0, 2.5), (0.7, 1.3, 3.0)]
    for k in range(60):
        p, g = rng.random((5, 5, 5)) < 0.3, rng.random((5, 5, 5)) < 0.3
        sp = spacings[k % 3]
        d, j, h, a = oracle(p, g, sp)
        r = evaluate_case(p, g, sp)
        assert abs(r.dice - d) < 1e-9 and abs(r.jaccard - j) < 1e-9
        if h is None:
            assert math.isnan(r.hd95)
        else:
            assert abs(r.hd95 - h) < 1e-9 and abs(r.asd - a) < 1e-9


def test_fast_oracle_agrees_with_loop_oracle():
    shape, sp = (3, 3, 3), (1.0, 2.0, 0.5)
    fast = FastOracle(shape, sp)
    masks = [m for m in small_masks(shape, 3)][::97]
    for p in masks:
        for g in masks[:20]:
            a = fast(p, g)
            b = oracle(to_mask(p, shape), to_mask(g, shape), sp)
            for x, y in zip(a, b):
                assert (x is None and y is None) or abs(x - y) < 1e-12


def test_mean_report_skips_nan():
    rs = [MetricReport("a", 0.8, 0.6, 2.0, 1.0), MetricReport("b", 0.6, 0.4, float("nan"), float("nan"))]
    m = mean_report(rs)
    assert m.dice == pytest.approx(0.7) and m.hd95 == 2.0 and m.asd == 1.0
    assert math.isnan(mean_report([]).dice)
