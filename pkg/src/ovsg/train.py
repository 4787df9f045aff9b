"""Per-image loss assembly and the gradient-descent training loop."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import Adam, ParamStore, SGD
from .concepts import ConceptTable
from .features import FeatureMap
from .losses import (LossComponents, TrainConfig, box_losses, build_sample_sets, distill_loss,
                     focal_loss, relation_bce, total_loss)
from .matching import cost_terms, linear_assignment
from .model import ModelConfig, edge_alignment_scores, edge_features, forward_nodes, predict_scene_graph
from .types import Record, SceneGraph

logger = logging.getLogger(__name__)


class Teacher:
    """Frozen copy of a pretrained model; supplies edge features for distillation."""

    def __init__(self, params: ParamStore, cfg: ModelConfig, obj_matrix: np.ndarray):
        self.params = params.frozen_copy()
        self.cfg = cfg
        self.obj_matrix = obj_matrix
        self._cache: dict = {}

    def node_features(self, key: str, fm: FeatureMap, token_order: np.ndarray) -> np.ndarray:
        ck = (key, tuple(token_order.tolist()))
        if ck not in self._cache:
            out = forward_nodes(fm, self.params, self.cfg, self.obj_matrix, token_order=token_order)
            self._cache[ck] = out.features.data
        return self._cache[ck]

    def edge_features(self, key: str, fm: FeatureMap, token_order: np.ndarray, pairs: np.ndarray) -> np.ndarray:
        v = self.node_features(key, fm, token_order)
        return edge_features(pairs, v, self.params, self.cfg).data


@dataclass
class Vocab:
    """Training-time name lists with their embedding matrices."""

    object_names: list
    relation_names: list
    obj_matrix: np.ndarray
    rel_matrix: np.ndarray

    @classmethod
    def build(cls, objects: ConceptTable, relations: ConceptTable, object_names, relation_names) -> "Vocab":
        return cls(list(object_names), list(relation_names),
                   objects.matrix(list(object_names)), relations.matrix(list(relation_names)))


def image_losses(fm: FeatureMap, graph: SceneGraph, P: dict, cfg: ModelConfig, tcfg: TrainConfig, vocab: Vocab,
                 rng: np.random.Generator, teacher: Optional[Teacher] = None, key: str = "") -> LossComponents:
    """All loss terms for one image against its (possibly pseudo) ground truth."""
    nodes = forward_nodes(fm, P, cfg, vocab.obj_matrix)
    index = {n: i for i, n in enumerate(vocab.object_names)}
    gt_nodes = list(graph.nodes)
    unknown = [n.concept for n in gt_nodes if n.concept not in index]
    if unknown:
        raise KeyError(f"{key}: ground-truth concepts outside the training vocabulary: {unknown}")
    n_gt = len(gt_nodes)
    comps = LossComponents()
    if n_gt:
        W = vocab.obj_matrix[[index[n.concept] for n in gt_nodes]]
        gt_boxes = np.stack([n.box.as_array() for n in gt_nodes])
        mode = "full" if tcfg.match.get("l1", 0) or tcfg.match.get("giou", 0) else "category"
        terms = cost_terms(W, gt_boxes, nodes.features.data, nodes.boxes.data, tcfg.match_cost(mode))
        cost = sum(terms.values())
        cols = linear_assignment(cost)
    else:
        cols = []
    if tcfg.node_loss:
        targets = np.zeros(nodes.logits.shape)
        for g, q in enumerate(cols):
            targets[q, index[gt_nodes[g].concept]] = 1.0
        norm = max(1, n_gt)
        comps.node_focal = focal_loss(nodes.logits, targets, tcfg.alpha, tcfg.gamma) * (1.0 / norm)
        if n_gt:
            l1, gi = box_losses(nodes.boxes[np.array(cols)], gt_boxes)
            comps.box_l1 = l1 * (1.0 / norm)
            comps.box_giou = gi * (1.0 / norm)
    if tcfg.w_rel and len(cols) >= 2 and vocab.relation_names:
        sets = build_sample_sets(graph, cols, vocab.relation_names, rng, tcfg.neg_ratio)
        if sets.size:
            e = edge_features(sets.pairs, nodes.features, P, cfg)
            logits = edge_alignment_scores(e, vocab.rel_matrix, P)
            comps.rel_bce = relation_bce(logits, sets)
            if teacher is not None and tcfg.lam > 0 and len(sets.background):
                bg = sets.pairs[sets.background]
                t_e = teacher.edge_features(key, fm, nodes.token_index, bg)
                comps.distill = distill_loss(e[sets.background], t_e)
    return comps


@dataclass
class TrainState:
    params: ParamStore
    history: list = field(default_factory=list)


def train(params: ParamStore, records: Sequence[Record], features, cfg: ModelConfig, tcfg: TrainConfig,
          vocab: Vocab, teacher: Optional[Teacher] = None,
          on_log: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Mini-batch gradient descent over ``records``; updates ``params`` in place."""
    if not records:
        raise ValueError("no training records")
    rng = np.random.default_rng(tcfg.seed)
    if tcfg.optimizer == "adam":
        opt = Adam(params, tcfg.lr, clip_norm=tcfg.clip_norm)
    else:
        opt = SGD(params, tcfg.lr, tcfg.momentum, tcfg.clip_norm)
    state = TrainState(params)
    n = len(records)
    order = rng.permutation(n)
    cursor = 0
    for step in range(tcfg.steps):
        batch = []
        while len(batch) < min(tcfg.batch_size, n):
            if cursor == n:
                order = rng.permutation(n)
                cursor = 0
            batch.append(records[order[cursor]])
            cursor += 1
        P = params.tensors()
        total = None
        sums: dict[str, float] = {}
        for rec in batch:
            fm = features.get(rec.features) if hasattr(features, "get") else features[rec.features]
            comps = image_losses(fm, rec.graph, P, cfg, tcfg, vocab, rng, teacher, rec.image_id)
            loss, parts = total_loss(comps, tcfg)
            total = loss if total is None else total + loss
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        total = total * (1.0 / len(batch))
        total.backward()
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for name, t in P.items() if params.trainable(name)}
        gnorm = opt.step(grads)
        entry = {"step": step, **{k: v / len(batch) for k, v in sums.items()}, "grad_norm": gnorm}
        state.history.append(entry)
        if on_log is not None and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            on_log(entry)
    return state


def predict_dataset(params: ParamStore, records: Sequence[Record], features, cfg: ModelConfig,
                    vocabulary, objects: ConceptTable, relations: ConceptTable,
                    graph_constraint: Optional[bool] = None, workers: int = 1) -> dict[str, list]:
    """Ranked triplets per image id, as produced by ``predict_scene_graph``.

    Images are independent, so ``workers > 1`` spreads them over a thread
    pool; results keep record order.
    """
    maps = [features.get(r.features) if hasattr(features, "get") else features[r.features] for r in records]

    def one(fm):
        return predict_scene_graph(fm, vocabulary, params, cfg, objects, relations, graph_constraint)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, maps))
    else:
        results = [one(fm) for fm in maps]
    return {r.image_id: res for r, res in zip(records, results)}
