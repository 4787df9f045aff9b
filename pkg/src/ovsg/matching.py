"""Bipartite assignment between ground-truth and predicted nodes.

The objective maximizes total similarity; we minimize its negation, a
cost built from category similarity, L1 box distance and GIoU.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autograd import _sigmoid
from .concepts import ConceptTable
from .types import BBox, Node, center_to_corner, pairwise_iou_giou

SENTINEL = 1e6


@dataclass(frozen=True)
class MatchCost:
    cat: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    mode: str = "full"

    def __post_init__(self):
        if min(self.cat, self.l1, self.giou) < 0:
            raise ValueError("match cost weights must be non-negative")
        if self.mode not in ("full", "category"):
            raise ValueError(f"unknown match mode {self.mode!r}")


@dataclass
class MatchResult:
    """Binary assignment ``matrix`` (N x K) with its cost.

    ``breakdown`` holds the per-pair cost terms (N x K each). Costs are
    negated similarities: lower is better.
    """

    matrix: np.ndarray
    total_cost: float
    breakdown: dict = field(default_factory=dict)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.matrix)
        return list(zip(rows.tolist(), cols.tolist()))

    @property
    def columns(self) -> list[int]:
        """Matched prediction index per ground-truth row."""
        return [int(np.argmax(r)) for r in self.matrix]

    @property
    def similarity(self) -> float:
        return -self.total_cost


def cost_terms(gt_concepts: Sequence[np.ndarray], gt_boxes: Optional[np.ndarray],
               pred_features: np.ndarray, pred_boxes: Optional[np.ndarray], c: MatchCost) -> dict[str, np.ndarray]:
    """Per-pair cost components; ``gt_concepts`` are embedding rows."""
    W = np.atleast_2d(np.asarray(gt_concepts, dtype=np.float64))
    V = np.asarray(pred_features, dtype=np.float64)
    terms = {"cat": c.cat * (1.0 - _sigmoid(W @ V.T))}
    if c.mode == "full":
        if gt_boxes is None or pred_boxes is None:
            raise ValueError("full-mode matching needs boxes on both sides")
        gb = np.asarray(gt_boxes, dtype=np.float64)
        pb = np.asarray(pred_boxes, dtype=np.float64)
        terms["l1"] = c.l1 * np.abs(gb[:, None, :] - pb[None, :, :]).sum(-1)
        _, g = pairwise_iou_giou(center_to_corner(gb), center_to_corner(pb))
        terms["giou"] = c.giou * (1.0 - g)
    return terms


def pairwise_cost(gt: Node, pred_box, pred_feature, c: MatchCost, concepts: ConceptTable) -> float:
    """Cost of assigning one ground-truth node to one prediction."""
    if gt.concept not in concepts:
        raise KeyError(f"concept {gt.concept!r} not in concept table")
    w = concepts[gt.concept]
    gb = None if gt.box is None else gt.box.as_array()[None]
    pb = None if pred_box is None else np.asarray(pred_box, dtype=np.float64)[None]
    terms = cost_terms([w], gb, np.asarray(pred_feature)[None], pb, c)
    return float(sum(t[0, 0] for t in terms.values()))


def _tiebreak_weights(n: int, k: int) -> list[int]:
    # column sequences compare lexicographically as base-k integers
    return [k ** (n - 1 - i) for i in range(n)]


def linear_assignment(cost: np.ndarray) -> list[int]:
    """Minimum-cost injective assignment of rows to columns (rows <= columns).

    Kuhn-Munkres with row/column potentials. Costs are compared as pairs
    (cost, tie-break) so that among equal-cost optima the assignment whose
    column sequence is lexicographically smallest wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more ground truths ({n}) than predictions ({m})")
    if n == 0:
        return []
    if not np.all(np.isfinite(cost)):
        cost = np.where(np.isfinite(cost), cost, SENTINEL)
    a = cost.tolist()
    tw = _tiebreak_weights(n, m)
    INF = math.inf
    u0 = [0.0] * (n + 1)
    u1 = [0] * (n + 1)
    v0 = [0.0] * (m + 1)
    v1 = [0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        min0 = [INF] * (m + 1)
        min1 = [0] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            d0, d1, j1 = INF, 0, 0
            row = a[i0 - 1]
            w = tw[i0 - 1]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                c0 = row[j - 1] - u0[i0] - v0[j]
                c1 = (j - 1) * w - u1[i0] - v1[j]
                if c0 < min0[j] or (c0 == min0[j] and c1 < min1[j]):
                    min0[j], min1[j] = c0, c1
                    way[j] = j0
                if min0[j] < d0 or (min0[j] == d0 and min1[j] < d1):
                    d0, d1, j1 = min0[j], min1[j], j
            for j in range(m + 1):
                if used[j]:
                    u0[p[j]] += d0
                    u1[p[j]] += d1
                    v0[j] -= d0
                    v1[j] -= d1
                else:
                    min0[j] -= d0
                    min1[j] -= d1
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def bruteforce_assignment(cost: np.ndarray, max_size: int = 8) -> list[int]:
    """Exhaustive minimum over all injections; first (lexicographic) minimum wins."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more ground truths ({n}) than predictions ({m})")
    if m > max_size:
        raise ValueError(f"instance too large for brute force ({m} > {max_size})")
    best, best_cols = math.inf, []
    rows = cost.tolist()
    for cols in itertools.permutations(range(m), n):
        total = 0.0
        for i, j in enumerate(cols):
            total += rows[i][j]
        if total < best:
            best, best_cols = total, list(cols)
    return best_cols


def _result(cost: np.ndarray, cols: list[int], breakdown: dict) -> MatchResult:
    n, m = cost.shape
    M = np.zeros((n, m), dtype=np.int64)
    total = 0.0
    for i, j in enumerate(cols):
        M[i, j] = 1
        total += float(cost[i, j])
    return MatchResult(M, total, breakdown)


def _gt_arrays(gts, concepts: ConceptTable):
    names = [g.concept for g in gts]
    missing = [n for n in names if n not in concepts]
    if missing:
        raise KeyError(f"unresolvable concepts: {missing}")
    W = concepts.matrix(names) if names else np.zeros((0, concepts.dim))
    boxes = None
    if gts and all(g.box is not None for g in gts):
        boxes = np.stack([g.box.as_array() for g in gts])
    return W, boxes


def build_cost(gts: Sequence[Node], pred_features, pred_boxes, c: MatchCost, concepts: ConceptTable):
    W, boxes = _gt_arrays(gts, concepts)
    if len(gts) == 0:
        return np.zeros((0, len(pred_features))), {}
    terms = cost_terms(W, boxes, pred_features, pred_boxes, c)
    return sum(terms.values()), terms


def match_bipartite(gts: Sequence[Node], pred_features, pred_boxes, c: MatchCost,
                    concepts: ConceptTable) -> MatchResult:
    """Optimal one-to-one matching of every ground truth to a distinct prediction."""
    if len(gts) > len(pred_features):
        raise ValueError(f"{len(gts)} ground truths but only {len(pred_features)} predictions")
    cost, terms = build_cost(gts, pred_features, pred_boxes, c, concepts)
    return _result(cost, linear_assignment(cost), terms)


def match_bruteforce(gts: Sequence[Node], pred_features, pred_boxes, c: MatchCost,
                     concepts: ConceptTable) -> MatchResult:
    if len(gts) > len(pred_features):
        raise ValueError(f"{len(gts)} ground truths but only {len(pred_features)} predictions")
    cost, terms = build_cost(gts, pred_features, pred_boxes, c, concepts)
    return _result(cost, bruteforce_assignment(cost), terms)


def match_cost_matrix(cost: np.ndarray) -> MatchResult:
    return _result(np.asarray(cost, dtype=np.float64), linear_assignment(cost), {})


def match_cost_matrix_bruteforce(cost: np.ndarray) -> MatchResult:
    return _result(np.asarray(cost, dtype=np.float64), bruteforce_assignment(cost), {})
