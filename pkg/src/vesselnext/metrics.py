"""Segmentation metrics restricted to the field of view, ROC/AUC over
pooled pixels, and the connectivity/area/length triple for vessel quality.

Ratio metrics guard their denominators: an undefined ratio reports 0.0 and
carries an "undefined" marker instead of a NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# confusion counts and the five basic ratios


@dataclass
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def _check_binary(name, arr):
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")


def confusion(pred: np.ndarray, truth: np.ndarray, fov: np.ndarray) -> ConfusionCounts:
    """Pixel confusion counts over fov==1 only."""
    if not (pred.shape == truth.shape == fov.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, "
                         f"fov {fov.shape}")
    for name, arr in (("pred", pred), ("truth", truth), ("fov", fov)):
        _check_binary(name, arr)
    keep = fov.astype(bool)
    p = pred[keep].astype(np.int64)
    t = truth[keep].astype(np.int64)
    joint = np.bincount(2 * t + p, minlength=4)
    return ConfusionCounts(tp=int(joint[3]), tn=int(joint[0]),
                           fp=int(joint[1]), fn=int(joint[2]))


@dataclass
class BasicMetrics:
    acc: float
    sp: float
    se: float
    precision: float
    f1: float
    undefined: frozenset = frozenset()

    def as_dict(self) -> dict:
        return {"acc": self.acc, "sp": self.sp, "se": self.se,
                "precision": self.precision, "f1": self.f1}


def basic_metrics(cc: ConfusionCounts) -> BasicMetrics:
    """Accuracy, specificity, sensitivity, precision and F1 from counts."""
    if cc.total <= 0:
        raise ValueError("no pixels inside the field of view")
    undefined = set()

    def ratio(name, num, den):
        if den == 0:
            undefined.add(name)
            return 0.0
        return num / den

    acc = (cc.tp + cc.tn) / cc.total
    sp = ratio("sp", cc.tn, cc.tn + cc.fp)
    se = ratio("se", cc.tp, cc.tp + cc.fn)
    precision = ratio("precision", cc.tp, cc.tp + cc.fp)
    f1 = ratio("f1", cc.tp, cc.tp + (cc.fp + cc.fn) / 2.0)
    return BasicMetrics(acc=acc, sp=sp, se=se, precision=precision, f1=f1,
                        undefined=frozenset(undefined))


# ---------------------------------------------------------------------------
# ROC / AUC


@dataclass
class RocCurve:
    auc: float
    points: list = field(default_factory=list)  # (threshold, fpr, tpr)
    undefined: bool = False
    note: str = ""

    def as_csv(self) -> str:
        lines = ["threshold,fpr,tpr"]
        lines += [f"{t},{fpr},{tpr}" for t, fpr, tpr in self.points]
        return "\n".join(lines) + "\n"


def _pool(rasters, truths, fovs):
    if isinstance(rasters, np.ndarray):
        rasters, truths, fovs = [rasters], [truths], [fovs]
    scores, labels = [], []
    for prob, truth, fov in zip(rasters, truths, fovs):
        keep = fov.astype(bool)
        scores.append(np.asarray(prob, dtype=np.float64)[keep])
        labels.append(np.asarray(truth)[keep])
    return np.concatenate(scores), np.concatenate(labels)


def roc_auc(prob_rasters, truths, fovs) -> RocCurve:
    """ROC sweep over the distinct scores of all pooled in-FOV pixels.

    A prediction at threshold t marks score >= t as vessel. The area uses
    the trapezoid rule, which equals the tie-aware rank statistic
    P(s+ > s-) + 0.5 P(s+ = s-).
    """
    scores, labels = _pool(prob_rasters, truths, fovs)
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    _check_binary("truth", labels)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        return RocCurve(auc=0.0, points=[(math.inf, 0.0, 0.0)], undefined=True,
                        note="one class absent")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # one curve point per distinct score block
    block_end = np.nonzero(np.diff(s_sorted))[0]
    ends = np.concatenate([block_end, [scores.size - 1]])
    ctp = np.cumsum(l_sorted, dtype=np.int64)[ends]
    cnt = ends + 1
    cfp = cnt - ctp
    tpr = ctp / pos
    fpr = cfp / neg
    points = [(math.inf, 0.0, 0.0)]
    points += [(float(s_sorted[e]), float(f), float(t)) for e, f, t in zip(ends, fpr, tpr)]

    xs = np.concatenate([[0.0], fpr])
    ys = np.concatenate([[0.0], tpr])
    auc = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) * 0.5))
    note = "all scores tied" if len(ends) == 1 else ""
    return RocCurve(auc=auc, points=points, note=note)


# ---------------------------------------------------------------------------
# binary morphology for the vessel-quality triple


def disc_offsets(radius: int):
    r2 = radius * radius
    return [(dy, dx) for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1) if dy * dy + dx * dx <= r2]


def dilate_disc(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean disc structuring element."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    src = mask.astype(bool)
    for dy, dx in disc_offsets(radius):
        ys = slice(max(0, dy), min(h, h + dy))
        yd = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, dx), min(w, w + dx))
        xd = slice(max(0, -dx), min(w, w - dx))
        out[yd, xd] |= src[ys, xs]
    return out.astype(np.uint8)


def count_components(mask: np.ndarray) -> int:
    """Number of 8-connected foreground components."""
    todo = mask.astype(bool).copy()
    h, w = todo.shape
    count = 0
    neighbors = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    for start in zip(*np.nonzero(todo)):
        if not todo[start]:
            continue
        count += 1
        stack = [start]
        todo[start] = False
        while stack:
            y, x = stack.pop()
            for dy, dx in neighbors:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and todo[ny, nx]:
                    todo[ny, nx] = False
                    stack.append((ny, nx))
    return count


def thin(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to one-pixel-wide centerlines.

    Two alternating sub-iterations delete boundary pixels with 2..6
    neighbors and exactly one 0->1 transition around the ring, until a
    full pass deletes nothing. Vectorized over the whole image.
    """
    img = np.pad(mask.astype(np.uint8), 1)
    while True:
        deleted = False
        for step in (0, 1):
            p2 = img[:-2, 1:-1]
            p3 = img[:-2, 2:]
            p4 = img[1:-1, 2:]
            p5 = img[2:, 2:]
            p6 = img[2:, 1:-1]
            p7 = img[2:, :-2]
            p8 = img[1:-1, :-2]
            p9 = img[:-2, :-2]
            ring = (p2, p3, p4, p5, p6, p7, p8, p9)
            b = sum(int_arr.astype(np.int64) for int_arr in ring)
            a = sum(((ring[i] == 0) & (ring[(i + 1) % 8] == 1)).astype(np.int64)
                    for i in range(8))
            if step == 0:
                cond = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            core = img[1:-1, 1:-1]
            kill = (core == 1) & (b >= 2) & (b <= 6) & (a == 1) & cond
            if kill.any():
                core[kill] = 0
                deleted = True
        if not deleted:
            return img[1:-1, 1:-1].copy()


@dataclass
class CalScore:
    c: float
    a: float
    l: float
    f: float
    note: str = ""


def cal(pred: np.ndarray, truth: np.ndarray, alpha: int = 2, beta: int = 2) -> CalScore:
    """Connectivity, area and length agreement of two vessel masks.

    C compares 8-connected component counts relative to the truth's vessel
    pixel count; A is the dilation-tolerant overlap of the masks; L is the
    dilation-tolerant overlap of their centerlines. The composite is the
    plain product f = c * a * l.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    _check_binary("pred", pred)
    _check_binary("truth", truth)
    pred = pred.astype(np.uint8)
    truth = truth.astype(np.uint8)
    n_pred, n_truth = int(pred.sum()), int(truth.sum())
    if n_pred == 0 and n_truth == 0:
        return CalScore(1.0, 1.0, 1.0, 1.0, note="both masks empty")

    if n_truth == 0:
        c = 0.0  # components appeared out of nothing
    else:
        c = 1.0 - min(1.0, abs(count_components(truth) - count_components(pred)) / n_truth)

    union = np.logical_or(pred, truth).sum()
    overlap = np.logical_or(dilate_disc(pred, alpha) & truth,
                            pred & dilate_disc(truth, alpha)).sum()
    a = float(overlap / union)

    skel_pred, skel_truth = thin(pred), thin(truth)
    skel_union = np.logical_or(skel_pred, skel_truth).sum()
    note = ""
    if skel_union == 0:
        l = 1.0
        note = "both skeletons empty"
    else:
        skel_overlap = np.logical_or(skel_pred & dilate_disc(truth, beta),
                                     dilate_disc(pred, beta) & skel_truth).sum()
        l = float(skel_overlap / skel_union)
    return CalScore(c=c, a=a, l=l, f=c * a * l, note=note)
