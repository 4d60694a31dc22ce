"""Classification and temporal segmentation metrics, all reported in percent."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Segment:
    label: int
    start: int
    end: int  # exclusive


def rle(frames) -> list[Segment]:
    frames = list(np.asarray(frames).tolist())
    segs: list[Segment] = []
    start = 0
    for i in range(1, len(frames) + 1):
        if i == len(frames) or frames[i] != frames[start]:
            segs.append(Segment(frames[start], start, i))
            start = i
    return segs


def expand_segments(segs: list[Segment]) -> list[int]:
    out: list[int] = []
    for s in segs:
        out.extend([s.label] * (s.end - s.start))
    return out


def frame_accuracy(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return 100.0 * float(np.mean(pred == gt))


def levenshtein(a: list, b: list) -> int:
    m, n = len(a), len(b)
    row = list(range(n + 1))
    for i in range(1, m + 1):
        prev, row[0] = row[0], i
        for j in range(1, n + 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev + (a[i - 1] != b[j - 1]))
            prev, row[j] = row[j], cur
    return row[n]


def segmental_edit_score(pred, gt) -> float:
    p = [s.label for s in rle(pred)]
    g = [s.label for s in rle(gt)]
    denom = max(len(p), len(g))
    if denom == 0:
        return 100.0
    return 100.0 * (1.0 - levenshtein(p, g) / denom)


def _iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (max(a.end, b.end) - min(a.start, b.start))


def _max_matching(adj: list[list[int]], n_right: int) -> int:
    """Maximum bipartite matching by augmenting paths."""
    owner = [-1] * n_right

    def augment(u, seen):
        for v in adj[u]:
            if v in seen:
                continue
            seen.add(v)
            if owner[v] < 0 or augment(owner[v], seen):
                owner[v] = u
                return True
        return False

    return sum(augment(u, set()) for u in range(len(adj)))


def _greedy_matching(pred: list[Segment], gt: list[Segment], threshold: float) -> int:
    used = [False] * len(gt)
    tp = 0
    for p in pred:
        ious = [(_iou(p, g) if g.label == p.label else 0.0) for g in gt]
        if not ious:
            continue
        j = int(np.argmax(ious))
        if ious[j] >= threshold and not used[j]:
            used[j] = True
            tp += 1
    return tp


def segment_tp(pred, gt, threshold: float, matching: str = "optimal") -> tuple[int, int, int]:
    """(tp, fp, fn) counts for one sequence pair."""
    if not 0 < threshold < 1:
        raise ContractError("threshold must lie in (0, 1)")
    ps, gs = rle(pred), rle(gt)
    if matching == "greedy":
        tp = _greedy_matching(ps, gs, threshold)
    else:
        adj = [[j for j, g in enumerate(gs) if g.label == p.label and _iou(p, g) >= threshold]
               for p in ps]
        tp = _max_matching(adj, len(gs))
    return tp, len(ps) - tp, len(gs) - tp


def f1_at(pred, gt, threshold: float, matching: str = "optimal") -> float:
    tp, fp, fn = segment_tp(pred, gt, threshold, matching)
    return f1_from_counts(tp, fp, fn)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def classification_report(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        return 0.0
    return 100.0 * float(np.mean(preds == labels))


THRESHOLDS = (0.10, 0.25, 0.50)


def segmentation_summary(preds: list, targets: list) -> dict[str, float]:
    """Dataset-level Acc/Edit/F1@k: accuracy over all frames, mean edit, F1 from pooled counts."""
    all_p = np.concatenate([np.asarray(p) for p in preds])
    all_g = np.concatenate([np.asarray(g) for g in targets])
    out = {"acc": frame_accuracy(all_p, all_g),
           "edit": float(np.mean([segmental_edit_score(p, g) for p, g in zip(preds, targets)]))}
    for t in THRESHOLDS:
        counts = np.sum([segment_tp(p, g, t) for p, g in zip(preds, targets)], axis=0)
        out[f"f1@{int(round(t * 100))}"] = f1_from_counts(*counts)
    return out


def write_metrics_csv(path: str | Path, rows: list[tuple[str, float, float | str]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value", "threshold"))
        for name, value, thr in rows:
            w.writerow((name, f"{value:.6f}", thr))
