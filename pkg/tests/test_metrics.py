"""Metric oracles: pixel enumeration, pairwise-rank AUC, and set-operation
morphology, all written independently of the implementations they check."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselnext.metrics import (
    ConfusionCounts,
    basic_metrics,
    cal,
    confusion,
    count_components,
    dilate_disc,
    roc_auc,
    thin,
)


# ---------------------------------------------------------------------------
# independent oracle routines (plain loops, no shared code)


def oracle_confusion(pred, truth, fov):
    tp = tn = fp = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if fov[i, j] == 0:
                continue
            if truth[i, j] == 1 and pred[i, j] == 1:
                tp += 1
            elif truth[i, j] == 1:
                fn += 1
            elif pred[i, j] == 1:
                fp += 1
            else:
                tn += 1
    return tp, tn, fp, fn


def oracle_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def oracle_dilate(mask, radius):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    if di * di + dj * dj <= radius * radius:
                        y, x = i + di, j + dj
                        if 0 <= y < h and 0 <= x < w:
                            out[y, x] = 1
    return out


def oracle_components(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    count = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                count += 1
                queue = [(i, j)]
                seen[i, j] = True
                while queue:
                    y, x = queue.pop(0)
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = y + dy, x + dx
                            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] \
                                    and not seen[ny, nx]:
                                seen[ny, nx] = True
                                queue.append((ny, nx))
    return count


def oracle_thin(mask):
    # classic two-subiteration thinning written with explicit loops
    img = np.pad(mask.astype(np.uint8), 1)

    def neighbors(y, x):
        return [img[y - 1, x], img[y - 1, x + 1], img[y, x + 1], img[y + 1, x + 1],
                img[y + 1, x], img[y + 1, x - 1], img[y, x - 1], img[y - 1, x - 1]]

    while True:
        removed_any = False
        for step in (0, 1):
            marked = []
            for y in range(1, img.shape[0] - 1):
                for x in range(1, img.shape[1] - 1):
                    if img[y, x] != 1:
                        continue
                    n = neighbors(y, x)
                    b = sum(n)
                    if not 2 <= b <= 6:
                        continue
                    ring = n + n[:1]
                    a = sum(1 for u, v in zip(ring, ring[1:]) if u == 0 and v == 1)
                    if a != 1:
                        continue
                    p2, _, p4, _, p6, _, p8, _ = n
                    if step == 0:
                        ok = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
                    else:
                        ok = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
                    if ok:
                        marked.append((y, x))
            for y, x in marked:
                img[y, x] = 0
            removed_any = removed_any or bool(marked)
        if not removed_any:
            return img[1:-1, 1:-1]


def oracle_cal(pred, truth, alpha=2, beta=2):
    n_truth = truth.sum()
    c = 1.0 - min(1.0, abs(oracle_components(truth) - oracle_components(pred)) / n_truth)
    union = np.logical_or(pred, truth).sum()
    overlap = np.logical_or(oracle_dilate(pred, alpha) & truth,
                            pred & oracle_dilate(truth, alpha)).sum()
    a = overlap / union
    sp, st_ = oracle_thin(pred), oracle_thin(truth)
    num = np.logical_or(sp & oracle_dilate(truth, beta),
                        oracle_dilate(pred, beta) & st_).sum()
    den = np.logical_or(sp, st_).sum()
    l = num / den
    return c, a, l


def random_mask(rng, h, w, p=0.3):
    return (rng.random((h, w)) < p).astype(np.uint8)


# ---------------------------------------------------------------------------
# confusion and basic ratios


class TestConfusion:
    def test_perfect_agreement(self, rng):
        truth = random_mask(rng, 8, 8)
        fov = np.ones_like(truth)
        cc = confusion(truth, truth, fov)
        assert cc.fp == 0 and cc.fn == 0
        assert cc.tp == truth.sum() and cc.total == 64

    def test_total_inversion(self, rng):
        truth = random_mask(rng, 8, 8)
        cc = confusion(1 - truth, truth, np.ones_like(truth))
        assert cc.tp == 0 and cc.tn == 0

    def test_matches_enumeration_oracle(self, rng):
        for _ in range(25):
            h, w = rng.integers(2, 17), rng.integers(2, 17)
            pred, truth = random_mask(rng, h, w), random_mask(rng, h, w)
            fov = random_mask(rng, h, w, p=0.8)
            if fov.sum() == 0:
                continue
            cc = confusion(pred, truth, fov)
            assert (cc.tp, cc.tn, cc.fp, cc.fn) == oracle_confusion(pred, truth, fov)

    def test_shape_and_binary_validation(self):
        with pytest.raises(ValueError, match="shape"):
            confusion(np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((2, 2)))
        with pytest.raises(ValueError, match="binary|0 and 1"):
            confusion(np.full((2, 2), 2), np.zeros((2, 2)), np.ones((2, 2)))


class TestBasicMetrics:
    def test_all_correct(self):
        m = basic_metrics(ConfusionCounts(tp=1, tn=1, fp=0, fn=0))
        assert (m.acc, m.sp, m.se, m.precision, m.f1) == (1, 1, 1, 1, 1)
        assert not m.undefined

    def test_by_hand(self):
        m = basic_metrics(ConfusionCounts(tp=1, tn=0, fp=1, fn=1))
        assert m.precision == 0.5 and m.se == 0.5 and m.f1 == 0.5
        assert abs(m.acc - 1 / 3) < 1e-15

    def test_undefined_marker(self):
        m = basic_metrics(ConfusionCounts(tp=0, tn=5, fp=0, fn=0))
        assert m.precision == 0.0 and "precision" in m.undefined
        assert "se" in m.undefined

    def test_accuracy_integer_identity(self, rng):
        for _ in range(20):
            tp, tn, fp, fn = (int(v) for v in rng.integers(0, 50, 4))
            if tp + tn + fp + fn == 0:
                continue
            m = basic_metrics(ConfusionCounts(tp, tn, fp, fn))
            assert m.acc * (tp + tn + fp + fn) == pytest.approx(tp + tn, abs=1e-9)

    @given(tp=st.integers(0, 500), tn=st.integers(0, 500),
           fp=st.integers(0, 500), fn=st.integers(0, 500))
    @settings(max_examples=150, deadline=None)
    def test_f1_forms_agree(self, tp, tn, fp, fn):
        # harmonic-mean form vs counts form
        if tp + tn + fp + fn == 0:
            return
        m = basic_metrics(ConfusionCounts(tp, tn, fp, fn))
        if tp + fp > 0 and tp + fn > 0 and m.precision + m.se > 0:
            harmonic = 2 * m.precision * m.se / (m.precision + m.se)
            assert abs(m.f1 - harmonic) < 1e-12

    def test_all_outputs_in_unit_interval(self, rng):
        for _ in range(30):
            tp, tn, fp, fn = (int(v) for v in rng.integers(0, 20, 4))
            if tp + tn + fp + fn == 0:
                continue
            m = basic_metrics(ConfusionCounts(tp, tn, fp, fn))
            for v in m.as_dict().values():
                assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# ROC / AUC


class TestRocAuc:
    def as_rasters(self, scores, labels):
        s = np.asarray(scores, dtype=float).reshape(1, -1)
        l = np.asarray(labels).reshape(1, -1)
        return s, l, np.ones_like(l)

    def test_perfect_separation(self):
        r = roc_auc(*self.as_rasters([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]))
        assert r.auc == 1.0

    def test_all_tied(self):
        r = roc_auc(*self.as_rasters([0.5] * 6, [1, 0, 1, 0, 1, 0]))
        assert r.auc == 0.5
        assert r.note == "all scores tied"

    def test_matches_pairwise_rank_oracle(self, rng):
        for _ in range(20):
            n = 20
            scores = np.round(rng.random(n), 2)  # duplicates force tie handling
            labels = (rng.random(n) > 0.5).astype(np.uint8)
            if labels.sum() in (0, n):
                continue
            r = roc_auc(*self.as_rasters(scores, labels))
            assert abs(r.auc - oracle_auc(scores, labels)) < 1e-12

    def test_monotone_transform_invariance(self, rng):
        scores = rng.random(50)
        labels = (rng.random(50) > 0.6).astype(np.uint8)
        a = roc_auc(*self.as_rasters(scores, labels)).auc
        b = roc_auc(*self.as_rasters(scores ** 3, labels)).auc
        assert abs(a - b) < 1e-12

    def test_endpoints(self, rng):
        scores = rng.random(30)
        labels = (rng.random(30) > 0.5).astype(np.uint8)
        r = roc_auc(*self.as_rasters(scores, labels))
        t0, f0, tp0 = r.points[0]
        tN, fN, tpN = r.points[-1]
        assert (f0, tp0) == (0.0, 0.0) and t0 == math.inf
        assert (fN, tpN) == (1.0, 1.0)
        csv = r.as_csv()
        assert csv.splitlines()[0] == "threshold,fpr,tpr"

    def test_absent_class_flagged(self):
        r = roc_auc(*self.as_rasters([0.1, 0.9], [1, 1]))
        assert r.undefined and r.note == "one class absent"

    def test_pooling_across_images(self, rng):
        s1, l1 = rng.random((4, 4)), random_mask(rng, 4, 4)
        s2, l2 = rng.random((4, 4)), random_mask(rng, 4, 4)
        fov = np.ones((4, 4), dtype=np.uint8)
        pooled = roc_auc([s1, s2], [l1, l2], [fov, fov]).auc
        flat = roc_auc(np.concatenate([s1, s2]).reshape(1, -1),
                       np.concatenate([l1, l2]).reshape(1, -1),
                       np.ones((1, 32), dtype=np.uint8)).auc
        assert abs(pooled - flat) < 1e-15


# ---------------------------------------------------------------------------
# morphology and the vessel-quality triple


class TestMorphology:
    def test_dilate_matches_oracle(self, rng):
        for radius in (1, 2):
            mask = random_mask(rng, 12, 12, p=0.15)
            assert np.array_equal(dilate_disc(mask, radius), oracle_dilate(mask, radius))

    def test_component_count_matches_oracle(self, rng):
        for _ in range(10):
            mask = random_mask(rng, 14, 14, p=0.25)
            assert count_components(mask) == oracle_components(mask)

    def test_diagonal_counts_as_connected(self):
        mask = np.eye(5, dtype=np.uint8)
        assert count_components(mask) == 1

    def test_thin_matches_loop_oracle(self, rng):
        for _ in range(8):
            mask = random_mask(rng, 12, 12, p=0.45)
            assert np.array_equal(thin(mask), oracle_thin(mask))

    def test_thin_bar_to_centerline(self):
        mask = np.zeros((9, 16), dtype=np.uint8)
        mask[3:6, 1:15] = 1
        skel = thin(mask)
        assert skel.sum() < mask.sum()
        assert (skel.sum(axis=0)[3:12] == 1).all()  # one pixel per column inside
        assert skel[4, 3:12].all()  # and it is the center row

    def test_thin_idempotent(self, rng):
        mask = random_mask(rng, 16, 16, p=0.4)
        once = thin(mask)
        assert np.array_equal(thin(once), once)


class TestCal:
    def vessel_pair(self, rng):
        # two synthetic vessels: a horizontal tube and a diagonal streak
        truth = np.zeros((16, 16), dtype=np.uint8)
        truth[4:6, 2:14] = 1
        for i in range(9, 14):
            truth[i, i - 2:i] = 1
        pred = truth.copy()
        pred[4:6, 11:14] = 0            # miss the tube's tail
        pred[12:14, 3:5] = 1            # spurious blob
        return pred, truth

    def test_self_comparison_is_perfect(self, rng):
        mask = random_mask(rng, 10, 10, p=0.3)
        if mask.sum() == 0:
            mask[0, 0] = 1
        s = cal(mask, mask)
        assert (s.c, s.a, s.l, s.f) == (1.0, 1.0, 1.0, 1.0)

    def test_empty_prediction(self, rng):
        truth = random_mask(rng, 8, 8, p=0.4)
        truth[0, 0] = 1
        s = cal(np.zeros_like(truth), truth)
        assert s.a == 0.0 and s.l == 0.0 and s.f == 0.0

    def test_both_empty_convention(self):
        s = cal(np.zeros((4, 4), dtype=np.uint8), np.zeros((4, 4), dtype=np.uint8))
        assert (s.c, s.a, s.l, s.f) == (1.0, 1.0, 1.0, 1.0)
        assert s.note == "both masks empty"

    def test_matches_set_operation_oracle(self, rng):
        pred, truth = self.vessel_pair(rng)
        s = cal(pred, truth)
        c, a, l = oracle_cal(pred, truth)
        assert s.c == pytest.approx(c, abs=1e-12)
        assert s.a == pytest.approx(a, abs=1e-12)
        assert s.l == pytest.approx(l, abs=1e-12)
        assert s.f == s.c * s.a * s.l

    def test_random_masks_match_oracle(self, rng):
        for _ in range(6):
            pred, truth = random_mask(rng, 12, 12), random_mask(rng, 12, 12)
            if truth.sum() == 0 or pred.sum() == 0:
                continue
            s = cal(pred, truth)
            c, a, l = oracle_cal(pred, truth)
            assert (s.c, s.a, s.l) == pytest.approx((c, a, l), abs=1e-12)

    def test_area_component_symmetric(self, rng):
        pred, truth = self.vessel_pair(rng)
        assert cal(pred, truth).a == pytest.approx(cal(truth, pred).a, abs=1e-15)

    def test_components_in_unit_interval(self, rng):
        for _ in range(10):
            pred, truth = random_mask(rng, 10, 10), random_mask(rng, 10, 10)
            s = cal(pred, truth)
            for v in (s.c, s.a, s.l, s.f):
                assert 0.0 <= v <= 1.0
