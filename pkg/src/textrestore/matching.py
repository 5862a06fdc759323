"""Optimal bipartite matching between predicted queries and ground truth.

The assignment minimizing total cost is solved with the Hungarian method
(scipy's linear_sum_assignment); the pair cost follows the set-prediction
convention of weighted classification + box L1 + (1 - gIoU) terms, using the
same lambda weights as the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import TsmConfig
from .geometry import giou


@dataclass(frozen=True)
class MatchAssignment:
    """Injective pairing (prediction index, ground-truth index)."""

    pairs: tuple[tuple[int, int], ...]

    @property
    def pred_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]

    def gt_for_pred(self) -> dict[int, int]:
        return {p: g for p, g in self.pairs}


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective assignment of size min(P, G).

    Empty cost matrices yield the empty assignment. Non-finite costs are
    rejected.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    if cost.size == 0:
        return MatchAssignment(pairs=())
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
    return MatchAssignment(pairs=pairs)


def match_cost(confidence: float, pred_box, gt_box, cfg: TsmConfig) -> float:
    """Cost of pairing one query with one ground-truth instance.

    Weighted sum of a classification probability term (1 - confidence), box
    L1, and (1 - gIoU), all under the configured lambda weights. Finite for
    degenerate (zero-area) boxes.
    """
    pred_box = np.asarray(pred_box, dtype=np.float64)
    gt_box = np.asarray(gt_box, dtype=np.float64)
    cost_cls = cfg.lambda_cls * (1.0 - float(confidence))
    cost_box = cfg.lambda_box * float(np.abs(pred_box - gt_box).mean())
    cost_giou = cfg.lambda_giou * (1.0 - giou(pred_box, gt_box))
    return cost_cls + cost_box + cost_giou


def match_cost_matrix(confidences, pred_boxes, gt_boxes, cfg: TsmConfig) -> np.ndarray:
    """(P, G) cost matrix from per-query confidences/boxes and GT boxes."""
    P, G = len(confidences), len(gt_boxes)
    cost = np.zeros((P, G))
    for p in range(P):
        for g in range(G):
            cost[p, g] = match_cost(confidences[p], pred_boxes[p], gt_boxes[g], cfg)
    return cost
