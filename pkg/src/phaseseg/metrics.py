"""Dataset-global Hungarian matching and frame-level segmentation metrics.

All metrics are computed on frame counts pooled over the whole evaluated
split after a single cluster-to-class mapping is chosen for every video.

F1 is the frame-wise macro F1 over the K classes (a class with no predicted
and no true frames scores 0 and is flagged). mIoU averages over classes that
occur in the ground truth. mAP ranks all frames by their soft transport score
for each class and integrates precision over recall steps, with tied scores
forming one threshold.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class MatchResult:
    mapping: np.ndarray  # predicted cluster id -> ground-truth class id
    confusion: np.ndarray  # confusion[pred, true]

    def apply(self, labels):
        if isinstance(labels, np.ndarray):
            return self.mapping[labels]
        return [self.mapping[np.asarray(x)] for x in labels]


@dataclass
class MetricsReport:
    mof: float
    f1: float
    miou: float
    map: float
    per_class: list
    mapping: list
    confusion: list
    num_frames: int
    num_videos: int
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mof": self.mof, "f1": self.f1, "miou": self.miou, "map": self.map,
            "num_frames": self.num_frames, "num_videos": self.num_videos,
            "mapping": self.mapping, "confusion": self.confusion,
            "per_class": self.per_class, "flags": self.flags, **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "iou", "ap", "support"])
        for row in self.per_class:
            w.writerow([row["class"], *(_fmt(row[k]) for k in ("precision", "recall", "f1", "iou", "ap")), row["support"]])
        w.writerow(["overall", "", "", _fmt(self.f1), _fmt(self.miou), _fmt(self.map), self.num_frames])
        w.writerow(["mof", _fmt(self.mof), "", "", "", "", ""])
        return buf.getvalue()


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square matrix; returns column per row.

    Shortest augmenting path with row/column potentials, O(n^3).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost has non-finite entries")
    n = cost.shape[0]
    # 1-based arrays with a virtual column 0
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[col] = row
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta, j1 = np.inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    result = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        result[owner[j] - 1] = j - 1
    return result


def _pool(labels):
    if isinstance(labels, np.ndarray):
        return labels.astype(np.int64).ravel()
    parts = [np.asarray(x, dtype=np.int64).ravel() for x in labels]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def confusion_matrix(predictions, truths, K: int) -> np.ndarray:
    p, t = _pool(predictions), _pool(truths)
    C = np.zeros((K, K), dtype=np.int64)
    np.add.at(C, (p, t), 1)
    return C


def global_match(predictions, truths, K: int, video_ids=None) -> MatchResult:
    """One cluster-to-class mapping for the whole dataset, maximizing agreement."""
    predictions = [np.asarray(x) for x in predictions]
    truths = [np.asarray(x) for x in truths]
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} prediction sequences for {len(truths)} truth sequences")
    for i, (p, t) in enumerate(zip(predictions, truths)):
        if len(p) != len(t):
            name = video_ids[i] if video_ids is not None else i
            raise ValueError(f"video {name}: {len(p)} predictions for {len(t)} labels")
    C = confusion_matrix(predictions, truths, K)
    mapping = hungarian(C.max() - C)
    return MatchResult(mapping, C)


def mof(mapped_predictions, truths) -> float:
    p, t = _pool(mapped_predictions), _pool(truths)
    if len(p) != len(t):
        raise ValueError("predictions and truths differ in length")
    return float(np.mean(p == t)) if len(t) else 0.0


def _counts(mapped_predictions, truths, K):
    p, t = _pool(mapped_predictions), _pool(truths)
    tp = np.array([np.sum((p == k) & (t == k)) for k in range(K)])
    fp = np.array([np.sum((p == k) & (t != k)) for k in range(K)])
    fn = np.array([np.sum((p != k) & (t == k)) for k in range(K)])
    return tp, fp, fn


def per_class_scores(mapped_predictions, truths, K):
    tp, fp, fn = _counts(mapped_predictions, truths, K)
    rows = []
    for k in range(K):
        prec = tp[k] / (tp[k] + fp[k]) if tp[k] + fp[k] else 0.0
        rec = tp[k] / (tp[k] + fn[k]) if tp[k] + fn[k] else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        union = tp[k] + fp[k] + fn[k]
        iou = tp[k] / union if tp[k] + fn[k] else None
        rows.append({"class": k, "precision": float(prec), "recall": float(rec), "f1": float(f),
                     "iou": None if iou is None else float(iou), "support": int(tp[k] + fn[k]),
                     "predicted": int(tp[k] + fp[k])})
    return rows


def f1(mapped_predictions, truths, K: int) -> float:
    return float(np.mean([r["f1"] for r in per_class_scores(mapped_predictions, truths, K)]))


def miou(mapped_predictions, truths, K: int) -> float:
    ious = [r["iou"] for r in per_class_scores(mapped_predictions, truths, K) if r["iou"] is not None]
    return float(np.mean(ious)) if ious else 0.0


def average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve; tied scores share a threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    tps = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end index of each tie group
    tp, seen = tps[last], last + 1
    precision = tp / seen
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def map_metric(soft_scores, truths, mapping) -> float:
    """Mean AP over ground-truth classes, scoring class c by the cluster mapped to c."""
    scores = np.concatenate([np.asarray(s, dtype=np.float64) for s in soft_scores])
    t = _pool(truths)
    if len(scores) != len(t):
        raise ValueError(f"{len(scores)} scored frames for {len(t)} labels")
    mapping = np.asarray(mapping)
    inverse = np.argsort(mapping)  # inverse[c] = cluster assigned to class c
    aps = [average_precision(scores[:, inverse[c]], t == c) for c in range(len(mapping)) if np.any(t == c)]
    return float(np.mean(aps)) if aps else 0.0


def per_class_ap(soft_scores, truths, mapping):
    scores = np.concatenate([np.asarray(s, dtype=np.float64) for s in soft_scores])
    t = _pool(truths)
    inverse = np.argsort(np.asarray(mapping))
    return [average_precision(scores[:, inverse[c]], t == c) if np.any(t == c) else None
            for c in range(len(mapping))]


def evaluate(predictions, truths, soft_scores, K: int, video_ids=None) -> MetricsReport:
    match = global_match(predictions, truths, K, video_ids)
    mapped = match.apply(list(predictions))
    rows = per_class_scores(mapped, truths, K)
    aps = per_class_ap(soft_scores, truths, match.mapping)
    flags = []
    for row, ap in zip(rows, aps):
        row["ap"] = ap
        if row["support"] == 0 and row["predicted"] == 0:
            flags.append(f"class {row['class']} absent from predictions and ground truth; scored F1=0")
    return MetricsReport(
        mof=mof(mapped, truths), f1=f1(mapped, truths, K), miou=miou(mapped, truths, K),
        map=map_metric(soft_scores, truths, match.mapping), per_class=rows,
        mapping=match.mapping.tolist(), confusion=match.confusion.tolist(),
        num_frames=int(len(_pool(truths))), num_videos=len(list(truths)), flags=flags,
    )


def to_segments(labels) -> list[tuple[int, int, int]]:
    """Maximal constant runs as (class, start, end) with half-open ends."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(labels) != 0) + 1
    starts = np.r_[0, cuts]
    ends = np.r_[cuts, len(labels)]
    return [(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def expand_segments(segments) -> np.ndarray:
    out = [np.full(e - s, c, dtype=np.int64) for c, s, e in segments]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
