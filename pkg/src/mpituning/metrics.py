"""COCO-style mean average precision with size strata.

mAP averages AP over IoU thresholds 0.50, 0.55, ..., 0.95 and over every
category that has ground truth.  AP uses 101-point interpolation of the
precision envelope.

Strata restrict the ground truth by area.  Matching is done once against all
ground truth; a detection matched to a box outside the stratum is ignored, and
an unmatched detection counts as a false positive only in the stratum its own
area falls into.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .scenes import STRATA, StrataConfig, box_area, size_stratum

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
REPORT_COLUMNS = ("mAP", "mAP50", "mAP75", "mAP_eS", "mAP_rS", "mAP_gS", "mAP_N")


@dataclass
class Detection:
    image_id: int
    box: tuple      # xyxy pixels
    score: float
    category: int


@dataclass
class GroundTruth:
    image_id: int
    box: tuple
    category: int


@dataclass
class EvalReport:
    mAP: float | None
    mAP50: float | None
    mAP75: float | None
    mAP_eS: float | None
    mAP_rS: float | None
    mAP_gS: float | None
    mAP_N: float | None
    per_category: dict = field(default_factory=dict)
    support: dict = field(default_factory=dict)

    def columns(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def match_at_iou(dets: list, gts: list, iou_thr: float) -> list:
    """Greedy matching of score-sorted detections to same-category ground truth.

    Returns, for each detection, the index of its matched ground truth or -1.
    """
    taken = [False] * len(gts)
    out = []
    for d in dets:
        best, best_iou = -1, iou_thr
        for j, g in enumerate(gts):
            if taken[j] or g.category != d.category or g.image_id != d.image_id:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


def average_precision(tp, num_gt: int) -> float | None:
    """101-point interpolated AP of score-ordered TP(1)/FP(0) flags; None if num_gt == 0."""
    if num_gt == 0:
        return None
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def _top_per_image(dets: list, max_dets: int) -> list:
    by_image: dict = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append((i, d))
    keep = []
    for items in by_image.values():
        items.sort(key=lambda t: -t[1].score)
        keep.extend(i for i, _ in items[:max_dets])
    return [dets[i] for i in sorted(keep)]


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((iw > 0) & (ih > 0) & (union > 0), inter / np.where(union > 0, union, 1), 0.0)


def _greedy(ious: np.ndarray, thr: float) -> np.ndarray:
    matched = np.full(ious.shape[0], -1, dtype=np.int64)
    free = np.ones(ious.shape[1], dtype=bool)
    for i in range(ious.shape[0]):
        cand = np.where(free & (ious[i] >= thr), ious[i], -1.0)
        if cand.size and cand.max() >= 0:
            j = int(np.argmax(cand))
            matched[i] = j
            free[j] = False
    return matched


def evaluate(dets: list, gts: list, strata: StrataConfig = StrataConfig(),
             max_dets: int = MAX_DETS) -> EvalReport:
    dets = _top_per_image(dets, max_dets)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable
    dets = [dets[i] for i in order]
    gt_stratum = np.array([size_stratum(g.box, strata) for g in gts], dtype=object)
    det_stratum = np.array([size_stratum(d.box, strata) for d in dets], dtype=object)
    categories = sorted({g.category for g in gts} | {d.category for d in dets})
    n_thr = len(IOU_THRESHOLDS)

    # ap[stratum][category] -> list over thresholds
    ap = {s: {} for s in ("all",) + STRATA}
    for c in categories:
        cd_idx = [i for i, d in enumerate(dets) if d.category == c]
        cg_idx = [j for j, g in enumerate(gts) if g.category == c]
        # matched[t, k]: global gt index matched by the k-th detection of this category
        matched = np.full((n_thr, len(cd_idx)), -1, dtype=np.int64)
        gts_by_image: dict = {}
        for j in cg_idx:
            gts_by_image.setdefault(gts[j].image_id, []).append(j)
        dets_by_image: dict = {}
        for k, i in enumerate(cd_idx):
            dets_by_image.setdefault(dets[i].image_id, []).append(k)
        for img, ks in dets_by_image.items():
            js = gts_by_image.get(img)
            if not js:
                continue
            ious = _iou_matrix(np.array([dets[cd_idx[k]].box for k in ks], dtype=np.float64),
                               np.array([gts[j].box for j in js], dtype=np.float64))
            for t, thr in enumerate(IOU_THRESHOLDS):
                m = _greedy(ious, thr)
                hit = m >= 0
                matched[t, np.array(ks)[hit]] = np.array(js)[m[hit]]
        d_str = det_stratum[cd_idx] if cd_idx else np.array([], dtype=object)
        for s in ("all",) + STRATA:
            n_gt = len(cg_idx) if s == "all" else int(sum(gt_stratum[j] == s for j in cg_idx))
            row = []
            for t in range(n_thr):
                m = matched[t]
                if s == "all":
                    flags = (m >= 0).astype(np.float64)
                else:
                    hit = m >= 0
                    in_s = np.zeros(len(m), dtype=bool)
                    if hit.any():
                        in_s[hit] = gt_stratum[m[hit]] == s
                    keep = (hit & in_s) | (~hit & (d_str == s))
                    flags = in_s[keep].astype(np.float64)
                row.append(average_precision(flags, n_gt))
            ap[s][c] = row

    def summary(s, t_idx):
        per_cat = [float(np.mean([ap[s][c][t] for t in t_idx]))
                   for c in categories if ap[s][c][0] is not None]
        return float(np.mean(per_cat)) if per_cat else None

    everything = range(n_thr)
    report = EvalReport(
        mAP=summary("all", everything),
        mAP50=summary("all", (IOU_THRESHOLDS.index(0.5),)),
        mAP75=summary("all", (IOU_THRESHOLDS.index(0.75),)),
        mAP_eS=summary("eS", everything),
        mAP_rS=summary("rS", everything),
        mAP_gS=summary("gS", everything),
        mAP_N=summary("N", everything),
    )
    report.per_category = {c: _mean(ap["all"][c]) for c in categories}
    report.support = {s: int(sum(1 for x in gt_stratum if x == s)) for s in STRATA}
    return report


def detections_from_output(boxes: np.ndarray, logits: np.ndarray, image_ids, image_size: int,
                           max_dets: int = MAX_DETS) -> list:
    """Top-scoring (query, category) pairs of a batch as pixel-space detections."""
    out = []
    scores = 1.0 / (1.0 + np.exp(-logits))
    for b, img_id in enumerate(image_ids):
        cx, cy, w, h = (boxes[b, :, k] for k in range(4))
        xyxy = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
        xyxy = np.clip(xyxy, 0.0, 1.0) * image_size
        flat = scores[b].reshape(-1)
        top = np.argsort(-flat, kind="stable")[:max_dets]
        T = scores.shape[2]
        for f in top:
            q, t = divmod(int(f), T)
            out.append(Detection(int(img_id), tuple(float(v) for v in xyxy[q]), float(flat[f]), t))
    return out


def ground_truth_from_scenes(scenes, start_id: int = 0) -> list:
    return [
        GroundTruth(start_id + i, tuple(float(v) for v in box), int(lab))
        for i, sc in enumerate(scenes)
        for box, lab in zip(sc.boxes, sc.labels)
    ]


# ---------------------------------------------------------------------------
# report tables
# ---------------------------------------------------------------------------

TABLE_HEADER = ("Method", "#Params") + REPORT_COLUMNS


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{100.0 * v:.2f}"
    return str(v)


def report_rows(rows: list) -> list:
    """rows: [(method, n_params, EvalReport or columns dict)] -> string cells."""
    out = []
    for method, n_params, rep in rows:
        cols = rep.columns() if isinstance(rep, EvalReport) else rep
        out.append([method, str(int(n_params))] + [_fmt(cols.get(k)) for k in REPORT_COLUMNS])
    return out


def to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    w.writerows(report_rows(rows))
    return buf.getvalue()


def to_markdown(rows: list) -> str:
    cells = [list(TABLE_HEADER)] + report_rows(rows)
    widths = [max(len(r[i]) for r in cells) for i in range(len(TABLE_HEADER))]
    lines = []
    for n, r in enumerate(cells):
        lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |")
        if n == 0:
            lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines) + "\n"
