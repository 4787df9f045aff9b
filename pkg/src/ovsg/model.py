"""Set-prediction scene-graph model over frozen feature fixtures.

Node side: object queries are picked from the feature tokens by their best
concept similarity, refined by dot-product cross-attention, then decoded
into boxes (three fully connected layers) and concept scores (dot product
with the frozen concept embeddings, no classifier weights).

Edge side: ``e = f([v_s, v_o, r])`` with a two-layer MLP ``f`` and learned
relation queries ``r`` (averaged when there are several), scored against
relation names through a one-layer text projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor, init_uniform
from .concepts import ConceptTable, project_text
from .features import FeatureMap
from .types import Vocabulary


@dataclass
class ModelConfig:
    K: int = 10
    M: int = 1
    d: int = 64
    d_e: int = 64
    d_h: int = 64
    d_ff: int = 64
    feat_dim: int = 72
    pos_dim: int = 16
    text_dim: int = 64
    depth: int = 1
    heads: int = 1
    top_n_detections: int = 100
    graph_constraint: bool = True
    objectness: str = "max_concept_score"

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be at least 1")
        if self.d != self.text_dim:
            raise ValueError("node feature dim must equal text embedding dim")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.depth < 1:
            raise ValueError("decoder depth must be at least 1")

    @property
    def n_detections(self) -> int:
        """Detections kept for pairing; the configured pool is capped at K."""
        return min(self.top_n_detections, self.K)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Uniform(+-1/sqrt(fan_in)) init from a seeded generator."""
    rng = np.random.default_rng(seed)
    p = ParamStore()
    d = cfg.d

    def lin(name, fan_in, fan_out, bias=True):
        p.add(f"{name}.W", init_uniform(rng, fan_in, (fan_in, fan_out)))
        if bias:
            p.add(f"{name}.b", init_uniform(rng, fan_in, (fan_out,)))

    lin("dec.in", cfg.feat_dim, d)
    lin("dec.pos", cfg.pos_dim, d, bias=False)
    for layer in range(cfg.depth):
        for part in ("q", "k", "v", "o"):
            lin(f"dec.{layer}.{part}", d, d, bias=False)
        lin(f"dec.{layer}.ff1", d, cfg.d_ff)
        lin(f"dec.{layer}.ff2", cfg.d_ff, d)
    lin("box.0", d, d)
    lin("box.1", d, d)
    lin("box.2", d, 4)
    p.add("rel.query", init_uniform(rng, d, (cfg.M, d)))
    lin("rel.fc1", 3 * d, cfg.d_h)
    lin("rel.fc2", cfg.d_h, cfg.d_e)
    lin("text", cfg.text_dim, cfg.d_e)
    return p


Params = Union[ParamStore, dict]


def _tensors(params: Params) -> dict:
    if isinstance(params, ParamStore):
        return {n: Tensor(v) for n, v in params.items()}
    return params


@dataclass
class NodeOutputs:
    """Differentiable decoder outputs for one image."""

    features: Tensor
    boxes: Tensor
    logits: Tensor
    token_index: np.ndarray


@dataclass
class PredictionSet:
    features: np.ndarray
    boxes: np.ndarray
    logits: np.ndarray
    token_index: np.ndarray
    concept_names: tuple[str, ...] = ()

    @property
    def scores(self) -> np.ndarray:
        return ag._sigmoid(self.logits)

    @property
    def objectness(self) -> np.ndarray:
        if self.logits.shape[1] == 0:
            return np.zeros(len(self.logits))
        return self.scores.max(axis=1)

    def __len__(self):
        return len(self.features)


def select_queries(content: np.ndarray, concept_matrix: np.ndarray, k: int) -> np.ndarray:
    """Top-k tokens by best concept similarity; stable under ties."""
    if concept_matrix.shape[0]:
        score = (content @ concept_matrix.T).max(axis=1)
    else:
        score = np.zeros(len(content))
    return np.argsort(-score, kind="stable")[:k]


def forward_nodes(fm: FeatureMap, params: Params, cfg: ModelConfig, concept_matrix: np.ndarray,
                  token_order: Optional[np.ndarray] = None) -> NodeOutputs:
    if fm.dim != cfg.feat_dim or fm.pos_dim != cfg.pos_dim:
        raise ag.ShapeError(f"feature map dims ({fm.dim},{fm.pos_dim}) != config ({cfg.feat_dim},{cfg.pos_dim})")
    if cfg.K > fm.n_tokens:
        raise ag.ShapeError(f"K={cfg.K} exceeds the {fm.n_tokens} feature tokens")
    if concept_matrix.shape[0] and concept_matrix.shape[1] != cfg.d:
        raise ag.ShapeError(f"concept dim {concept_matrix.shape[1]} != node dim {cfg.d}")
    P = _tensors(params)
    content = Tensor(fm.tokens) @ P["dec.in.W"] + P["dec.in.b"]
    memory = content + Tensor(fm.pos) @ P["dec.pos.W"]
    if token_order is None:
        token_order = select_queries(content.data, concept_matrix, cfg.K)
    q = memory[token_order]
    dh = cfg.d // cfg.heads
    for layer in range(cfg.depth):
        Q = q @ P[f"dec.{layer}.q.W"]
        Km = memory @ P[f"dec.{layer}.k.W"]
        V = memory @ P[f"dec.{layer}.v.W"]
        ctx = []
        for h in range(cfg.heads):
            cols = slice(h * dh, (h + 1) * dh)
            att = ag.softmax(Q[:, cols] @ Km[:, cols].T * (1.0 / np.sqrt(dh)), axis=-1)
            ctx.append(att @ V[:, cols])
        ctx = ctx[0] if cfg.heads == 1 else ag.concat(ctx, axis=1)
        h_ = q + ctx @ P[f"dec.{layer}.o.W"]
        ff = ag.relu(h_ @ P[f"dec.{layer}.ff1.W"] + P[f"dec.{layer}.ff1.b"]) @ P[f"dec.{layer}.ff2.W"] + P[f"dec.{layer}.ff2.b"]
        q = h_ + ff
    v = q
    x = ag.relu(v @ P["box.0.W"] + P["box.0.b"])
    x = ag.relu(x @ P["box.1.W"] + P["box.1.b"])
    boxes = ag.sigmoid(x @ P["box.2.W"] + P["box.2.b"])
    logits = v @ Tensor(concept_matrix.T) if concept_matrix.shape[0] else Tensor(np.zeros((cfg.K, 0)))
    return NodeOutputs(v, boxes, logits, np.asarray(token_order))


def decode_nodes(fm: FeatureMap, params: Params, cfg: ModelConfig, concepts: ConceptTable,
                 names: Sequence[str]) -> PredictionSet:
    """Decode K predicted nodes with boxes and per-concept scores."""
    out = forward_nodes(fm, params, cfg, concepts.matrix(list(names)))
    return PredictionSet(out.features.data, out.boxes.data, out.logits.data, out.token_index, tuple(names))


def node_similarity(v, w) -> float:
    """Category similarity: sigmoid of the dot product."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if v.shape != w.shape:
        raise ag.ShapeError(f"node feature dim {v.shape} != concept dim {w.shape}")
    return float(ag._sigmoid(np.array([v @ w]))[0])


def edge_features(pairs, v, params: Params, cfg: Optional[ModelConfig] = None) -> Tensor:
    """Edge features for ordered (subject, object) query pairs, one row per pair.

    With several relation queries the per-query head outputs are averaged.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValueError("edge subject and object must differ")
    v = ag.as_tensor(v)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= v.shape[0]):
        raise IndexError("pair index out of range")
    P = _tensors(params)
    rq = P["rel.query"]
    vs, vo = v[pairs[:, 0]], v[pairs[:, 1]]
    n = len(pairs)
    M = rq.shape[0]
    heads = []
    for m in range(M):
        r = rq[np.zeros(n, dtype=np.int64) + m]
        x = ag.concat([vs, vo, r], axis=1)
        hidden = ag.relu(x @ P["rel.fc1.W"] + P["rel.fc1.b"])
        heads.append(hidden @ P["rel.fc2.W"] + P["rel.fc2.b"])
    if M == 1:
        return heads[0]
    total = heads[0]
    for h in heads[1:]:
        total = total + h
    return total * (1.0 / M)


def relation_text_features(relation_matrix: np.ndarray, params: Params) -> Tensor:
    P = _tensors(params)
    return project_text(relation_matrix, P["text.W"], P["text.b"])


def edge_alignment_scores(e, relation_matrix: np.ndarray, params: Params) -> Tensor:
    """Raw alignment logits <e, f(w_r)> for every relation row of ``relation_matrix``."""
    e = ag.as_tensor(e)
    if relation_matrix.shape[0] == 0:
        return Tensor(np.zeros((e.shape[0], 0)))
    return e @ relation_text_features(relation_matrix, params).T


@dataclass(frozen=True)
class Triplet:
    subject: int
    object: int
    s_box: tuple[float, float, float, float]
    o_box: tuple[float, float, float, float]
    s_name: str
    o_name: str
    predicate: str
    score: float

    def to_json(self) -> dict:
        return {"s_box": list(self.s_box), "o_box": list(self.o_box), "s_name": self.s_name,
                "o_name": self.o_name, "predicate": self.predicate, "score": self.score}


def predict_scene_graph(fm: FeatureMap, vocab: Vocabulary, params: Params, cfg: ModelConfig,
                        objects: ConceptTable, relations: ConceptTable,
                        graph_constraint: Optional[bool] = None) -> list[Triplet]:
    """Ranked triplets: subject score x object score x relation score, descending."""
    if not vocab.object_names or not vocab.relation_names:
        raise ValueError("empty vocabulary")
    gc = cfg.graph_constraint if graph_constraint is None else graph_constraint
    obj_names, rel_names = list(vocab.object_names), list(vocab.relation_names)
    nodes = forward_nodes(fm, params, cfg, objects.matrix(obj_names))
    scores = ag._sigmoid(nodes.logits.data)
    label = scores.argmax(axis=1)
    obj_score = scores.max(axis=1)
    keep = np.argsort(-obj_score, kind="stable")[: cfg.n_detections]
    pairs = np.array([(a, b) for a in keep for b in keep if a != b], dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return []
    e = edge_features(pairs, nodes.features, params, cfg)
    rel_logits = edge_alignment_scores(e, relations.matrix(rel_names), params).data
    triple = obj_score[pairs[:, 0], None] * obj_score[pairs[:, 1], None] * ag._sigmoid(rel_logits)
    if gc:
        pred_idx = triple.argmax(axis=1)
        cand_pair = np.arange(len(pairs))
        cand_score = triple[cand_pair, pred_idx]
    else:
        cand_pair = np.repeat(np.arange(len(pairs)), len(rel_names))
        pred_idx = np.tile(np.arange(len(rel_names)), len(pairs))
        cand_score = triple.ravel()
    order = np.lexsort((pred_idx, cand_pair, -cand_score))
    boxes = nodes.boxes.data
    out = []
    for k in order:
        s, o = pairs[cand_pair[k]]
        out.append(Triplet(int(s), int(o), tuple(boxes[s].tolist()), tuple(boxes[o].tolist()),
                           obj_names[label[s]], obj_names[label[o]], rel_names[pred_idx[k]], float(cand_score[k])))
    return out


# prediction dump --------------------------------------------------------------


def write_prediction_dump(path, records: dict[str, list[Triplet]], metadata: Optional[dict] = None) -> Path:
    """JSON lines, one image per line; an optional leading metadata line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if metadata is not None:
            fh.write(json.dumps({"metadata": metadata}) + "\n")
        for image_id, triplets in records.items():
            fh.write(json.dumps({"image_id": image_id, "triplets": [t.to_json() for t in triplets]}) + "\n")
    return path


def read_prediction_dump(path) -> tuple[dict[str, list[dict]], dict]:
    preds, meta = {}, {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "metadata" in rec:
                meta = rec["metadata"]
                continue
            preds[rec["image_id"]] = rec["triplets"]
    return preds, meta
