import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from btol.metrics import MetricReport, asd, boundary, dice, format_table, report_from_masks


# --------------------------------------------------------------------------
# brute-force oracles, written independently of the library code

def brute_boundary(mask):
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    out.append((i, j))
                    break
    return out


def brute_asd(pred, gt, c):
    bp, bg = brute_boundary(pred == c), brute_boundary(gt == c)
    if not bp or not bg:
        return None
    def nearest(src, dst):
        # all pairs, row-major over src
        s, d = np.asarray(src, np.int64), np.asarray(dst, np.int64)
        sq = ((s[:, None, :] - d[None, :, :]) ** 2).sum(-1)
        return np.sqrt(sq.min(axis=1).astype(np.float64))
    fwd, rev = nearest(bp, bg), nearest(bg, bp)
    return float((np.sum(fwd) + np.sum(rev)) / (len(fwd) + len(rev)))


def brute_dice(pred, gt, c):
    p = [v == c for v in pred.ravel()]
    g = [v == c for v in gt.ravel()]
    inter = sum(1 for a, b in zip(p, g) if a and b)
    total = sum(p) + sum(g)
    return 1.0 if total == 0 else 2.0 * inter / total


def all_masks(h, w):
    for bits in itertools.product((0, 1), repeat=h * w):
        yield np.array(bits, dtype=np.uint8).reshape(h, w)


def _agree(pred, gt):
    assert dice(pred, gt, 1) == brute_dice(pred, gt, 1)
    assert asd(pred, gt, 1) == brute_asd(pred, gt, 1)


# --------------------------------------------------------------------------
# exhaustive small instances

@pytest.mark.parametrize("shape", [(1, 1), (1, 2), (2, 1), (1, 3), (2, 2), (1, 4), (2, 3), (3, 2)])
def test_every_mask_pair_agrees_with_brute_force(shape):
    masks = list(all_masks(*shape))
    for pred in masks:
        for gt in masks:
            _agree(pred, gt)


def test_every_3x3_mask_against_every_3x3_mask_boundary():
    # 512 masks: compare boundaries exhaustively, and ASD against a spread of references
    masks = list(all_masks(3, 3))
    for m in masks:
        got = list(zip(*np.nonzero(boundary(m.astype(bool)))))
        assert got == brute_boundary(m.astype(bool))
    for gt in masks[::37]:
        for pred in masks:
            _agree(pred, gt)


def test_every_4x4_mask_against_fixed_references():
    refs = [np.eye(4, dtype=np.uint8), np.pad(np.ones((2, 2), np.uint8), 1)]
    for pred in all_masks(4, 4):
        for gt in refs:
            _agree(pred, gt)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 16), w=st.integers(1, 16), seed=st.integers(0, 2 ** 32 - 1),
       density=st.floats(0.05, 0.95), k=st.integers(2, 4))
def test_random_masks_up_to_16x16_agree(h, w, seed, density, k):
    rng = np.random.default_rng(seed)
    pred = (rng.random((h, w)) * k * density).astype(np.uint8) % k
    gt = (rng.random((h, w)) * k).astype(np.uint8) % k
    for c in range(k):
        assert dice(pred, gt, c) == brute_dice(pred, gt, c)
        assert asd(pred, gt, c) == brute_asd(pred, gt, c)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), dy=st.integers(-3, 3), dx=st.integers(-3, 3))
def test_symmetry_and_translation(seed, dy, dx):
    rng = np.random.default_rng(seed)
    a = np.zeros((16, 16), np.uint8)
    b = np.zeros((16, 16), np.uint8)
    a[4:12, 4:12] = rng.integers(0, 2, (8, 8))
    b[4:12, 4:12] = rng.integers(0, 2, (8, 8))
    assert dice(a, b, 1) == dice(b, a, 1)
    assert asd(a, b, 1) == asd(b, a, 1)
    shift = lambda m: np.roll(np.roll(m, dy, 0), dx, 1)  # stays inside the frame
    assert dice(shift(a), shift(b), 1) == dice(a, b, 1)


# --------------------------------------------------------------------------
# worked examples

def test_dice_examples():
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = 1
    assert dice(m, m, 1) == 1.0
    other = np.zeros((4, 4), np.uint8)
    other[2:, 2:] = 1
    assert dice(m, other, 1) == 0.0
    g = np.zeros((4, 4), np.uint8)
    g[:2, :4] = 1
    assert dice(m, g, 1) == pytest.approx(2 * 4 / (4 + 8))
    assert dice(np.zeros((3, 3)), np.zeros((3, 3)), 1) == 1.0
    assert dice(np.zeros((3, 3)), np.eye(3), 1) == 0.0


def test_asd_examples():
    a = np.zeros((4, 4), np.uint8)
    b = np.zeros((4, 4), np.uint8)
    a[0, 0] = 1
    b[0, 3] = 1
    assert asd(a, b, 1) == 3.0
    assert asd(a, a, 1) == 0.0
    assert asd(a, np.zeros_like(a), 1) is None


def test_asd_square_shifted_right_by_one():
    a = np.zeros((8, 8), np.uint8)
    a[2:6, 1:5] = 1
    b = np.roll(a, 1, axis=1)
    # boundary of a 4x4 square is its 12 outer pixels; hand count: 12 per side, 6 at distance 1
    assert asd(a, b, 1) == brute_asd(a, b, 1) == pytest.approx(0.5)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)), 1)
    with pytest.raises(ValueError):
        asd(np.zeros((2, 2)), np.zeros((3, 2)), 1)


# --------------------------------------------------------------------------
# aggregation

def test_report_matches_hand_arithmetic():
    gt = np.zeros((3, 4, 4), np.uint8)
    gt[:, :2, :2] = 1
    pred = gt.copy()
    pred[1, :2, :2] = 0
    pred[1, :2, :4] = 1          # dice 2*4/(8+4) = 2/3
    pred[2] = 0                  # dice 0, asd undefined
    r = report_from_masks(pred, gt, num_classes=2)
    d = [1.0, 2 / 3, 0.0]
    assert r.per_class[1].dice_mean == pytest.approx(np.mean(d))
    assert r.per_class[1].dice_std == pytest.approx(np.std(d, ddof=1))
    a1 = brute_asd(pred[1], gt[1], 1)
    assert r.per_class[1].asd_mean == pytest.approx(np.mean([0.0, a1]))
    assert r.per_class[1].asd_std == pytest.approx(np.std([0.0, a1], ddof=1))
    assert r.per_class[1].n_asd_excluded == 1 and r.n_asd_excluded == 1
    assert r.n_samples == 3


def test_perfect_prediction_report():
    gt = np.random.default_rng(0).integers(0, 3, (5, 8, 8)).astype(np.uint8)
    r = report_from_masks(gt, gt, 3)
    assert r.classes == [1, 2]
    assert r.dice_avg_mean == 1.0 and r.asd_avg_mean == 0.0
    assert r.dice_avg_std == 0.0


def test_single_sample_std_is_zero():
    gt = np.eye(4, dtype=np.uint8)[None]
    assert report_from_masks(gt, gt, 2).dice_avg_std == 0.0


def test_report_json_round_trip_and_table():
    gt = np.random.default_rng(1).integers(0, 3, (4, 6, 6)).astype(np.uint8)
    pred = np.random.default_rng(2).integers(0, 3, (4, 6, 6)).astype(np.uint8)
    r = report_from_masks(pred, gt, 3)
    assert MetricReport.from_dict(json.loads(r.to_json())) == r
    table = format_table({"source": r, "bpba": r})
    assert table.splitlines()[0].startswith("Method | Dice c1 | Dice c2 | Dice Avg")
    assert len(table.splitlines()) == 3
