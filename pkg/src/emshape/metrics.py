"""Instance-level evaluation: voxel overlap tables, instance Dice, 3D mAP.

Ground-truth/prediction agreement is computed from exact voxel overlap
counts between instance IDs (background 0 excluded on both sides). Dice
uses greedy one-to-one matching by descending IoU. Average precision uses
detection-style greedy matching per IoU threshold with the area under the
interpolated precision-recall curve; mAP averages AP over the thresholds
0.50:0.05:0.95. Unscored predictions rank by descending size, then by ID.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .volume import LabelVolume

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class InstanceMatchTable:
    """Pairwise voxel-overlap counts between predicted and GT instances."""

    pred_ids: np.ndarray
    gt_ids: np.ndarray
    pred_sizes: np.ndarray
    gt_sizes: np.ndarray
    overlaps: sparse.csr_matrix

    @property
    def n_pred(self) -> int:
        return int(self.pred_ids.size)

    @property
    def n_gt(self) -> int:
        return int(self.gt_ids.size)

    def overlap_entries(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pred_index, gt_index, count) triplets for all nonzero overlaps."""
        coo = self.overlaps.tocoo()
        return coo.row, coo.col, coo.data

    def iou_entries(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pred_index, gt_index, iou) triplets for all nonzero overlaps."""
        rows, cols, counts = self.overlap_entries()
        union = self.pred_sizes[rows] + self.gt_sizes[cols] - counts
        return rows, cols, counts / union


@dataclass(frozen=True)
class EvalReport:
    """Instance Dice plus per-threshold AP, mAP, and match counts."""

    instance_dice: float
    ap_per_threshold: Dict[float, float]
    map: float
    counts: Dict[float, Dict[str, int]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "instance_dice": self.instance_dice,
            "ap": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
            "map": self.map,
            "counts": {f"{t:.2f}": dict(c) for t, c in self.counts.items()},
        }


def build_match_table(pred: LabelVolume, gt: LabelVolume) -> InstanceMatchTable:
    """Exact overlap counts between pred and gt instances in one joint pass."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.data.ravel()
    g = gt.data.ravel()

    pred_ids, pred_sizes = np.unique(p[p != 0], return_counts=True)
    gt_ids, gt_sizes = np.unique(g[g != 0], return_counts=True)
    n_pred, n_gt = pred_ids.size, gt_ids.size

    both = (p != 0) & (g != 0)
    if n_pred and n_gt and both.any():
        pi = np.searchsorted(pred_ids, p[both]).astype(np.int64)
        gi = np.searchsorted(gt_ids, g[both]).astype(np.int64)
        keys, counts = np.unique(pi * n_gt + gi, return_counts=True)
        rows = keys // n_gt
        cols = keys % n_gt
        overlaps = sparse.csr_matrix(
            (counts.astype(np.int64), (rows, cols)), shape=(n_pred, n_gt)
        )
    else:
        overlaps = sparse.csr_matrix((n_pred, n_gt), dtype=np.int64)

    return InstanceMatchTable(
        pred_ids=pred_ids,
        gt_ids=gt_ids,
        pred_sizes=pred_sizes.astype(np.int64),
        gt_sizes=gt_sizes.astype(np.int64),
        overlaps=overlaps,
    )


def instance_dice(table: InstanceMatchTable) -> float:
    """Mean Dice over greedily matched pairs, with 0 for unmatched instances.

    Pairs are matched one-to-one in order of descending IoU (ties broken by
    gt index, then pred index). The mean runs over all gt instances plus all
    unmatched predictions. With nothing on either side the score is 1.0.
    """
    n_pred, n_gt = table.n_pred, table.n_gt
    if n_pred == 0 and n_gt == 0:
        return 1.0
    rows, cols, ious = table.iou_entries()
    counts = table.overlaps.tocoo().data

    order = np.lexsort((rows, cols, -ious))
    pred_used = np.zeros(n_pred, dtype=bool)
    gt_used = np.zeros(n_gt, dtype=bool)
    dice_sum = 0.0
    n_matched = 0
    for k in order:
        i, j = int(rows[k]), int(cols[k])
        if pred_used[i] or gt_used[j]:
            continue
        pred_used[i] = True
        gt_used[j] = True
        dice_sum += 2.0 * counts[k] / (table.pred_sizes[i] + table.gt_sizes[j])
        n_matched += 1
    denom = n_gt + (n_pred - n_matched)
    return float(dice_sum / denom)


def _pred_order(table: InstanceMatchTable, scores: Optional[np.ndarray]) -> np.ndarray:
    if scores is None:
        scores = np.ones(table.n_pred, dtype=np.float64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (table.n_pred,):
            raise ValueError(
                f"scores must have one entry per predicted instance ({table.n_pred}), "
                f"got shape {scores.shape}"
            )
    # descending score, then descending size, then ascending ID
    return np.lexsort((table.pred_ids, -table.pred_sizes, -scores))


def _ap_from_flags(tp_flags: np.ndarray, n_gt: int) -> float:
    """Area under the interpolated precision-recall curve."""
    tp_cum = np.cumsum(tp_flags)
    precisions = tp_cum / np.arange(1, tp_flags.size + 1)
    recalls = tp_cum / n_gt
    precisions = np.concatenate([[0.0], precisions, [0.0]])
    recalls = np.concatenate([[0.0], recalls, [1.0]])
    for i in range(precisions.size - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    steps = np.where(recalls[1:] != recalls[:-1])[0] + 1
    return float(np.sum((recalls[steps] - recalls[steps - 1]) * precisions[steps]))


def average_precision_3d(
    table: InstanceMatchTable,
    scores: Optional[np.ndarray] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Detection AP per IoU threshold, plus mAP and instance Dice.

    Per threshold, predictions are visited in score order; each matches its
    highest-IoU still-unmatched gt instance and counts as TP iff that IoU
    reaches the threshold (the gt is only consumed on a TP).
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("at least one IoU threshold is required")
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"IoU thresholds must lie in (0, 1), got {t}")

    n_pred, n_gt = table.n_pred, table.n_gt
    order = _pred_order(table, scores)
    iou_csr = table.overlaps.tocsr().astype(np.float64)
    iou_csr.sort_indices()

    rows_cols: List[np.ndarray] = []
    rows_ious: List[np.ndarray] = []
    for i in range(n_pred):
        lo, hi = iou_csr.indptr[i], iou_csr.indptr[i + 1]
        cols = iou_csr.indices[lo:hi]
        counts = iou_csr.data[lo:hi]
        union = table.pred_sizes[i] + table.gt_sizes[cols] - counts
        rows_cols.append(cols)
        rows_ious.append(counts / union)

    ap: Dict[float, float] = {}
    counts_out: Dict[float, Dict[str, int]] = {}
    for t in thresholds:
        if n_pred == 0 and n_gt == 0:
            ap[t] = 1.0
            counts_out[t] = {"tp": 0, "fp": 0, "fn": 0}
            continue
        if n_pred == 0 or n_gt == 0:
            ap[t] = 0.0
            counts_out[t] = {"tp": 0, "fp": n_pred, "fn": n_gt}
            continue
        gt_used = np.zeros(n_gt, dtype=bool)
        tp_flags = np.zeros(n_pred, dtype=bool)
        for rank, i in enumerate(order):
            cols = rows_cols[i]
            ious = rows_ious[i]
            free = ~gt_used[cols]
            if not free.any():
                continue
            cand_ious = ious[free]
            best = int(np.argmax(cand_ious))
            if cand_ious[best] >= t:
                gt_used[cols[free][best]] = True
                tp_flags[rank] = True
        tp = int(tp_flags.sum())
        ap[t] = _ap_from_flags(tp_flags, n_gt)
        counts_out[t] = {"tp": tp, "fp": n_pred - tp, "fn": n_gt - tp}

    return EvalReport(
        instance_dice=instance_dice(table),
        ap_per_threshold=ap,
        map=float(np.mean(list(ap.values()))),
        counts=counts_out,
    )


def evaluate_labels(
    pred: LabelVolume,
    gt: LabelVolume,
    scores: Optional[np.ndarray] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Build the match table and produce the full evaluation report."""
    return average_precision_3d(build_match_table(pred, gt), scores, thresholds)
