"""Training objectives: focal node classification, box regression, relation
BCE over positive/negative samples, edge-feature distillation, and the total."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .matching import MatchCost
from .types import SceneGraph


@dataclass
class TrainConfig:
    lam: float = 0.1
    alpha: float = 0.25
    gamma: float = 2.0
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_rel: float = 1.0
    neg_ratio: int = 8
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    clip_norm: Optional[float] = 10.0
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    log_every: int = 10
    node_loss: bool = True
    match: dict = field(default_factory=lambda: {"cat": 2.0, "l1": 5.0, "giou": 2.0})

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("distillation weight must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def match_cost(self, mode: str = "full") -> MatchCost:
        return MatchCost(mode=mode, **self.match)

    def to_json(self) -> dict:
        return asdict(self)


def focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0, reduction: str = "sum") -> Tensor:
    """Binary focal loss on sigmoid(logits).

    ``alpha`` weights positives and ``1 - alpha`` negatives; ``gamma`` is the
    focusing exponent on ``1 - p_t``.
    """
    x = as_tensor(logits)
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), x.shape)
    ce = ag.softplus(x) - x * t
    p = ag.sigmoid(x)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    loss = ce * (alpha * t + (1.0 - alpha) * (1.0 - t))
    if gamma:
        loss = loss * ag.power(1.0 - p_t, gamma)
    if reduction == "sum":
        return ag.tsum(loss)
    if reduction == "mean":
        return ag.mean(loss)
    return loss


def _corners(b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def giou_rows(pred, gt) -> Tensor:
    """Row-wise GIoU between center-format box tensors of equal length."""
    p, g = as_tensor(pred), as_tensor(gt)
    px1, py1, px2, py2 = _corners(p)
    gx1, gy1, gx2, gy2 = _corners(g)
    iw = ag.relu(ag.minimum(px2, gx2) - ag.maximum(px1, gx1))
    ih = ag.relu(ag.minimum(py2, gy2) - ag.maximum(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    enclosure = (ag.maximum(px2, gx2) - ag.minimum(px1, gx1)) * (ag.maximum(py2, gy2) - ag.minimum(py1, gy1))
    return inter / union - (enclosure - union) / enclosure


def box_losses(pred, gt) -> tuple[Tensor, Tensor]:
    """(L1, GIoU) box terms summed over rows.

    L1 is taken on center-format 4-vectors; the GIoU term is ``1 - giou``.
    """
    p = as_tensor(pred)
    g = np.asarray(gt, dtype=np.float64)
    if p.data.ndim == 1:
        p = ag.reshape(p, (1, 4))
        g = g.reshape(1, 4)
    if p.shape != g.shape:
        raise ag.ShapeError(f"box shapes {p.shape} and {g.shape} differ")
    l1 = ag.tsum(ag.absolute(p - g))
    gi = ag.tsum(1.0 - giou_rows(p, Tensor(g)))
    return l1, gi


@dataclass
class SampleSets:
    """Relation samples for one image.

    ``pairs`` lists ordered (subject, object) query pairs; ``pos`` and
    ``neg`` are (pair row, predicate column) element indices.
    ``background`` lists the pair rows carrying no positive predicate,
    the domain of the distillation term.
    """

    pairs: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.pos = np.asarray(self.pos, dtype=np.int64).reshape(-1, 2)
        self.neg = np.asarray(self.neg, dtype=np.int64).reshape(-1, 2)
        self.background = np.asarray(self.background, dtype=np.int64).reshape(-1)
        if set(map(tuple, self.pos.tolist())) & set(map(tuple, self.neg.tolist())):
            raise ValueError("positive and negative sample sets overlap")

    @property
    def size(self) -> int:
        return len(self.pos) + len(self.neg)

    def targets(self, n_rel: int) -> np.ndarray:
        """Multi-hot relation targets per pair row."""
        y = np.zeros((len(self.pairs), n_rel))
        if len(self.pos):
            y[self.pos[:, 0], self.pos[:, 1]] = 1.0
        return y


def build_sample_sets(graph: SceneGraph, gt_to_query: Sequence[int], relation_names: Sequence[str],
                      rng: np.random.Generator, neg_ratio: int = 8) -> SampleSets:
    """Positives from matched ground-truth edges; negatives as described below.

    Negatives: every other predicate on a pair that has a ground-truth edge
    (uniformly subsampled to at most ``neg_ratio * |P|``), plus every
    predicate on each ordered pair of matched nodes with no ground-truth edge.
    """
    rel_index = {r: i for i, r in enumerate(relation_names)}
    n_rel = len(relation_names)
    q = list(gt_to_query)
    labelled: dict[tuple[int, int], set[int]] = {}
    for e in graph.edges:
        if e.predicate not in rel_index:
            continue
        key = (q[e.subject], q[e.object])
        labelled.setdefault(key, set()).add(rel_index[e.predicate])
    pairs = list(labelled)
    pos = [(k, r) for k, key in enumerate(pairs) for r in sorted(labelled[key])]
    edge_neg = [(k, r) for k, key in enumerate(pairs) for r in range(n_rel) if r not in labelled[key]]
    cap = neg_ratio * len(pos)
    if len(edge_neg) > cap:
        keep = np.sort(rng.choice(len(edge_neg), size=cap, replace=False))
        edge_neg = [edge_neg[i] for i in keep]
    background = []
    for a in range(len(q)):
        for b in range(len(q)):
            if a != b and (q[a], q[b]) not in labelled:
                background.append(len(pairs))
                pairs.append((q[a], q[b]))
    bg_neg = [(k, r) for k in background for r in range(n_rel)]
    return SampleSets(np.array(pairs, dtype=np.int64).reshape(-1, 2), pos, edge_neg + bg_neg, background)


def relation_bce(logits, sets: SampleSets) -> Tensor:
    """Mean binary cross-entropy over the union of positive and negative samples."""
    if sets.size == 0:
        raise ValueError("empty positive and negative sample sets")
    x = as_tensor(logits)
    idx = np.concatenate([sets.pos, sets.neg])
    y = np.concatenate([np.ones(len(sets.pos)), np.zeros(len(sets.neg))])
    s = x[idx[:, 0], idx[:, 1]]
    return ag.mean(ag.softplus(s) - s * y)


def bce_from_logits(logits, y) -> Tensor:
    x = as_tensor(logits)
    return ag.mean(ag.softplus(x) - x * np.asarray(y, dtype=np.float64))


def distill_loss(student, teacher) -> Tensor:
    """Mean over edges of the L1 distance between student and teacher edge features."""
    s = as_tensor(student)
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"student/teacher edge sets misaligned: {s.shape} vs {t.shape}")
    if s.shape[0] == 0:
        return Tensor(0.0)
    return ag.mean(ag.l1_distance(s, t, axis=1))


@dataclass
class LossComponents:
    node_focal: Tensor = field(default_factory=lambda: Tensor(0.0))
    box_l1: Tensor = field(default_factory=lambda: Tensor(0.0))
    box_giou: Tensor = field(default_factory=lambda: Tensor(0.0))
    rel_bce: Tensor = field(default_factory=lambda: Tensor(0.0))
    distill: Tensor = field(default_factory=lambda: Tensor(0.0))


BREAKDOWN_KEYS = ("node_focal", "box_l1", "box_giou", "rel_bce", "distill")


def total_loss(c: LossComponents, cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted node terms + relation BCE + lambda * distillation."""
    parts = [as_tensor(getattr(c, k)) for k in BREAKDOWN_KEYS]
    for k, t in zip(BREAKDOWN_KEYS, parts):
        if not np.isfinite(t.data).all():
            raise ag.NonFiniteError(f"loss component {k} is not finite")
    total = (cfg.w_cls * parts[0] + cfg.w_l1 * parts[1] + cfg.w_giou * parts[2]
             + cfg.w_rel * parts[3] + cfg.lam * parts[4])
    breakdown = {k: float(t.data) for k, t in zip(BREAKDOWN_KEYS, parts)}
    breakdown["total"] = float(total.data)
    return total, breakdown
