"""Bipartite matching and the DETR-family detection objective.

Predictions are matched one-to-one to ground truth with the Hungarian
algorithm on a detached cost.  The loss then combines

* a sigmoid focal loss on the query-category alignment logits (matched
  queries are positive for their category, everything else negative),
* L1 on normalised (cx, cy, w, h),
* 1 - GIoU,

for the final decoder block, every auxiliary block, and the encoder tokens
that drive query selection.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericalError


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


@dataclass(frozen=True)
class Box:
    """A box with an explicit coordinate convention ('xyxy' or 'cxcywh')."""

    coords: tuple
    fmt: str = "xyxy"

    def __post_init__(self):
        if self.fmt not in ("xyxy", "cxcywh"):
            raise ContractError(f"unknown box format {self.fmt!r}")
        xyxy = self.xyxy()
        if xyxy[2] < xyxy[0] or xyxy[3] < xyxy[1]:
            raise ContractError(f"box {self.coords} ({self.fmt}) has negative extent")

    def xyxy(self) -> tuple:
        if self.fmt == "xyxy":
            return tuple(float(v) for v in self.coords)
        return tuple(float(v) for v in cxcywh_to_xyxy(np.array(self.coords)))

    def cxcywh(self) -> tuple:
        if self.fmt == "cxcywh":
            return tuple(float(v) for v in self.coords)
        return tuple(float(v) for v in xyxy_to_cxcywh(np.array(self.coords)))

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.xyxy()
        return (x2 - x1) * (y2 - y1)


def _as_xyxy(b):
    return b.xyxy() if isinstance(b, Box) else tuple(float(v) for v in b)


def giou(a, b) -> float:
    """Generalised IoU of two boxes (Box or xyxy sequence).

    Two degenerate zero-area boxes give 0 by convention.
    """
    ax1, ay1, ax2, ay2 = _as_xyxy(a)
    bx1, by1, bx2, by2 = _as_xyxy(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if hull <= 0.0:
        return 0.0
    iou = inter / union if union > 0 else 0.0
    return iou - (hull - union) / hull


def giou_loss(a, b) -> float:
    return 1.0 - giou(a, b)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU matrix between xyxy arrays a (n, 4) and b (m, 4)."""
    a = a[:, None, :]
    b = b[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    hull = ((np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0]))
            * (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])))
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        out = iou - np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1), 0.0)
    return np.where(hull > 0, out, 0.0)


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted (n, 4) and target (n, 4) cxcywh boxes."""
    cx, cy, w, h = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    px1, py1, px2, py2 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    t = cxcywh_to_xyxy(target)
    tx1, ty1, tx2, ty2 = (Tensor(t[:, k]) for k in range(4))
    iw = ad.relu(ad.minimum(px2, tx2) - ad.maximum(px1, tx1))
    ih = ad.relu(ad.minimum(py2, ty2) - ad.maximum(py1, ty1))
    inter = iw * ih
    union = w * h + (tx2 - tx1) * (ty2 - ty1) - inter
    hull = (ad.maximum(px2, tx2) - ad.minimum(px1, tx1)) * (ad.maximum(py2, ty2) - ad.minimum(py1, ty1))
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------------------
# Hungarian algorithm
# ---------------------------------------------------------------------------

def _hungarian_rows(cost: np.ndarray) -> tuple:
    """Shortest-augmenting-path assignment for an n x m cost with n <= m.

    Returns ``(col, u, v)``: the column of each row and the final row/column
    potentials (1-based, index 0 unused).  Potentials keep reduced costs
    non-negative; each row is inserted with one Dijkstra-like sweep, giving
    O(n^2 m) overall.
    """
    n, m = cost.shape
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col[p[j] - 1] = j - 1
    return col, u, v


def _perfect_matching(adj: np.ndarray, rows, cols) -> dict | None:
    """Kuhn's augmenting paths on the boolean ``adj`` restricted to rows x cols."""
    owner: dict = {}
    allowed = set(cols)

    def augment(r, seen):
        for c in np.nonzero(adj[r])[0]:
            c = int(c)
            if c in allowed and c not in seen:
                seen.add(c)
                if c not in owner or augment(owner[c], seen):
                    owner[c] = r
                    return True
        return False

    for r in rows:
        if not augment(r, set()):
            return None
    return {r: c for c, r in owner.items()}


def _lexicographic(cost: np.ndarray, col: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Among optimal assignments of the n x m ``cost``, give rows in turn the lowest column.

    With optimal potentials the optimal assignments are the matchings on
    zero-reduced-cost edges that use every column with a negative potential.
    Unused columns are modelled as m - n dummy rows adjacent to the columns
    whose potential is zero.
    """
    n, m = cost.shape
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = np.vstack([cost - u[1:, None] - v[None, 1:] <= tol,
                       np.tile(np.abs(v[1:]) <= tol, (m - n, 1))])
    full = np.concatenate([col, np.setdiff1d(np.arange(m), col)])
    fixed: dict = {}
    for g in range(n):
        taken = set(fixed.values())
        for c in np.nonzero(tight[g])[0]:
            c = int(c)
            if c in taken:
                continue
            if c == full[g]:
                fixed[g] = c
                break
            rest = _perfect_matching(tight, [r for r in range(m) if r != g and r not in fixed],
                                     [k for k in range(m) if k != c and k not in taken])
            if rest is not None:
                fixed[g] = full[g] = c
                for r, k in rest.items():
                    full[r] = k
                break
    return full[:n]


def hungarian(cost) -> tuple[list, float]:
    """Minimum-cost matching of every ground truth (column) to a prediction (row).

    ``cost`` is K x G with K >= G.  Returns the (pred, gt) pairs sorted by
    prediction index, and the total cost.  Ties between optimal assignments
    go to the one whose ground truths, taken in index order, get the lowest
    prediction indices.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-d, got shape {cost.shape}")
    K, G = cost.shape
    if K < G:
        raise ContractError(f"need at least as many predictions as ground truths, got {K} < {G}")
    if not np.all(np.isfinite(cost)):
        raise NumericalError("cost matrix has non-finite entries")
    if G == 0:
        return [], 0.0
    # rows = ground truths, so the square-or-wide precondition holds
    col, u, v = _hungarian_rows(cost.T)
    pred_of_gt = _lexicographic(cost.T, col, u, v)
    pairs = sorted((int(pred_of_gt[g]), g) for g in range(G))
    total = float(sum(cost[p, g] for p, g in pairs))
    return pairs, total


def brute_force_assignment(cost) -> float:
    """Exhaustive minimum over injective gt -> prediction maps (small sizes only)."""
    cost = np.asarray(cost, dtype=np.float64)
    K, G = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(K), G):
        best = min(best, sum(cost[perm[g], g] for g in range(G)))
    return best


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha=0.25, gamma=2.0) -> Tensor:
    """Summed sigmoid focal loss for binary targets, as one fused op."""
    logits = ad.as_tensor(logits)
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ContractError(f"targets shape {t.shape} does not match logits {x.shape}")
    p = ad._sigmoid(x)
    log_p = -_softplus(-x)
    log_1mp = -_softplus(x)
    pos = alpha * (1 - p) ** gamma * (-log_p)
    neg = (1 - alpha) * p ** gamma * (-log_1mp)
    value = np.sum(t * pos + (1 - t) * neg)

    def bw(g):
        dpos = alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
        dneg = (1 - alpha) * p ** gamma * (-gamma * (1 - p) * log_1mp + p)
        return (g * (t * dpos + (1 - t) * dneg),)

    return ad.make_node(np.array(value), (logits,), bw, "focal")


def focal_cost(logits: np.ndarray, alpha=0.25, gamma=2.0) -> np.ndarray:
    """Per-entry classification matching cost: positive minus negative focal term."""
    p = ad._sigmoid(logits)
    pos = alpha * (1 - p) ** gamma * _softplus(-logits)
    neg = (1 - alpha) * p ** gamma * _softplus(logits)
    return pos - neg


# ---------------------------------------------------------------------------
# detection objective
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    aux: bool = True
    encoder: bool = True

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class Target:
    """Ground truth of one image: normalised cxcywh boxes and category indices."""

    boxes: np.ndarray   # (G, 4)
    labels: np.ndarray  # (G,)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))


def match(boxes: np.ndarray, logits: np.ndarray, target: Target, w: LossWeights) -> list:
    """Hungarian matching for one image on detached predictions."""
    G = len(target.labels)
    if G == 0:
        return []
    c_cls = focal_cost(logits)[:, target.labels]
    c_l1 = np.abs(boxes[:, None, :] - target.boxes[None, :, :]).sum(-1)
    c_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(target.boxes))
    pairs, _ = hungarian(w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou)
    return pairs


def set_loss(boxes: Tensor, logits: Tensor, targets: list, w: LossWeights,
             matches: list | None = None, num_boxes: float | None = None) -> tuple:
    """Loss of one prediction set (B, K, .) against per-image targets.

    ``matches`` may be given to freeze the assignment (for gradient checks).
    Returns (loss tensor, matches, parts dict).
    """
    B, K, T = logits.shape
    if matches is None:
        matches = [match(boxes.data[b], logits.data[b], targets[b], w) for b in range(B)]
    if num_boxes is None:
        num_boxes = max(1.0, float(sum(len(t.labels) for t in targets)))
    cls_target = np.zeros((B, K, T))
    bi, qi, tb = [], [], []
    for b, pairs in enumerate(matches):
        for q, g in pairs:
            cls_target[b, q, targets[b].labels[g]] = 1.0
            bi.append(b)
            qi.append(q)
            tb.append(targets[b].boxes[g])
    loss_cls = sigmoid_focal_loss(logits, cls_target) * (1.0 / num_boxes)
    total = loss_cls * w.cls
    parts = {"cls": loss_cls.item(), "l1": 0.0, "giou": 0.0}
    if bi:
        pred = boxes[np.array(bi), np.array(qi)]
        tgt = np.array(tb)
        loss_l1 = ad.absolute(pred - tgt).sum() * (1.0 / num_boxes)
        loss_giou = (1.0 - giou_tensor(pred, tgt)).sum() * (1.0 / num_boxes)
        total = total + loss_l1 * w.l1 + loss_giou * w.giou
        parts["l1"], parts["giou"] = loss_l1.item(), loss_giou.item()
    return total, matches, parts


def classification_loss(logits: Tensor, matched: list, labels, num_boxes: float = 1.0) -> Tensor:
    """Focal loss of one image's K x T logits; ``matched`` is [(query, gt)] pairs."""
    t = np.zeros(logits.shape)
    for q, g in matched:
        t[q, labels[g]] = 1.0
    return sigmoid_focal_loss(logits, t) * (1.0 / num_boxes)


def encoder_targets(enc_shape, targets: list, grid: int) -> np.ndarray:
    """One-hot token targets: the token whose cell holds a box centre is positive."""
    B, S, T = enc_shape
    out = np.zeros(enc_shape)
    for b, tgt in enumerate(targets):
        for box, lab in zip(tgt.boxes, tgt.labels):
            col = min(grid - 1, int(box[0] * grid))
            row = min(grid - 1, int(box[1] * grid))
            out[b, row * grid + col, lab] = 1.0
    return out


def total_loss(output, targets: list, weights: LossWeights | None = None,
               grid: int | None = None, matches: list | None = None) -> tuple:
    """Full training objective for a DetectorOutput.

    Returns (scalar loss tensor, info dict with the per-term values).
    """
    w = weights or LossWeights()
    num_boxes = max(1.0, float(sum(len(t.labels) for t in targets)))
    loss, used, parts = set_loss(output.boxes, output.logits, targets, w,
                                 matches=None if matches is None else matches[0],
                                 num_boxes=num_boxes)
    info = {"main": parts, "matches": [used]}
    if w.aux:
        for i, (bx, lg) in enumerate(output.aux):
            m = None if matches is None else matches[i + 1]
            aux_loss, used, _ = set_loss(bx, lg, targets, w, matches=m, num_boxes=num_boxes)
            loss = loss + aux_loss
            info["matches"].append(used)
    if w.encoder and output.enc_logits is not None and grid is not None:
        enc_t = encoder_targets(output.enc_logits.shape, targets, grid)
        enc = sigmoid_focal_loss(output.enc_logits, enc_t) * (w.cls / num_boxes)
        loss = loss + enc
        info["encoder"] = enc.item()
    info["total"] = loss.item()
    return loss, info
