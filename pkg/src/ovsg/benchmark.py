"""Split construction, synthetic scene generation and SGDET Recall@K."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, Optional, Sequence

import numpy as np

from .concepts import DEFAULT_TEXT_DIM, fixture_vector
from .features import FeatureMap, positional_encoding
from .types import (BBox, Dataset, Edge, Node, Record, SceneGraph, Vocabulary,
                    center_to_corner, pairwise_iou_giou)

logger = logging.getLogger(__name__)

SETTINGS = ("closed", "ovd", "ovr", "ovd_r")

# training-image counts after filtering, for reference only
VG150_TRAIN_IMAGES = {"ovd": 50107, "ovr": 44333, "ovd_r": 36425}


@dataclass(frozen=True)
class SplitSpec:
    setting: str = "closed"
    base_object_fraction: float = 0.70
    novel_relation_count: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        if not 0.0 < self.base_object_fraction <= 1.0:
            raise ValueError("base_object_fraction must lie in (0, 1]")
        if self.novel_relation_count is not None and self.novel_relation_count < 0:
            raise ValueError("novel_relation_count must be non-negative")

    def n_novel_relations(self, n_relations: int) -> int:
        # 15 of VG150's 50 predicates, scaled for smaller vocabularies
        n = self.novel_relation_count
        if n is None:
            n = 15 if n_relations >= 50 else max(1, round(0.3 * n_relations))
        if n >= n_relations:
            raise ValueError(f"novel relation count {n} must be below vocabulary size {n_relations}")
        return n


def choose_base_names(vocab: Vocabulary, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Seeded base/novel selection: ceil(fraction * |objects|) base objects and
    all but the novel-relation count of relations."""
    rng = np.random.default_rng(spec.seed)
    objects = list(vocab.object_names)
    relations = list(vocab.relation_names)
    n_base = math.ceil(spec.base_object_fraction * len(objects) - 1e-9)
    if n_base < 1:
        raise ValueError("split selects zero base object categories")
    base_obj_idx = set(rng.choice(len(objects), size=n_base, replace=False).tolist())
    n_novel = spec.n_novel_relations(len(relations))
    novel_rel_idx = set(rng.choice(len(relations), size=n_novel, replace=False).tolist())
    base_objects = [o for i, o in enumerate(objects) if i in base_obj_idx]
    base_relations = [r for i, r in enumerate(relations) if i not in novel_rel_idx]
    return base_objects, base_relations


def build_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, dict]:
    """Return (training set, evaluation set, manifest) for one setting.

    Training graphs lose novel-object nodes (ovd), novel-predicate edges (ovr)
    or both (ovd_r); evaluation keeps the full annotation.
    """
    v = ds.vocabulary
    if spec.setting == "closed":
        base_objects, base_relations = list(v.object_names), list(v.relation_names)
    else:
        base_objects, base_relations = choose_base_names(v, spec)
        if spec.setting == "ovd":
            base_relations = list(v.relation_names)
        elif spec.setting == "ovr":
            base_objects = list(v.object_names)
    bo, br = set(base_objects), set(base_relations)
    vocab = Vocabulary(v.object_names, v.relation_names,
                       tuple(n in bo for n in v.object_names), tuple(n in br for n in v.relation_names))
    if spec.setting == "closed":
        train_records = list(ds.records)
    else:
        train_records = []
        drop_objects = spec.setting in ("ovd", "ovd_r")
        drop_relations = spec.setting in ("ovr", "ovd_r")
        for r in ds.records:
            g = r.graph
            if drop_objects:
                g = g.drop_nodes(i for i, n in enumerate(g.nodes) if n.concept not in bo)
            if drop_relations:
                g = SceneGraph(g.nodes, tuple(e for e in g.edges if e.predicate in br), g.image_id)
            if not g.edges:
                continue
            train_records.append(Record(r.image_id, r.features, g, r.caption, r.provenance))
    train = Dataset(vocab, train_records, ds.root)
    evaluation = Dataset(vocab, list(ds.records), ds.root)
    manifest = {
        "setting": spec.setting,
        "seed": spec.seed,
        "base_object_fraction": spec.base_object_fraction,
        "novel_relation_count": len(v.relation_names) - len(base_relations),
        "base_objects": [n for n in v.object_names if n in bo],
        "novel_objects": [n for n in v.object_names if n not in bo],
        "base_relations": [n for n in v.relation_names if n in br],
        "novel_relations": [n for n in v.relation_names if n not in br],
        "n_train_images": len(train_records),
        "n_eval_images": len(ds.records),
    }
    return train, evaluation, manifest


# evaluation ----------------------------------------------------------------

SLICES = ("all", "base", "novel_object", "novel_relation", "novel_both", "novel_object_any", "novel_relation_any")
PARTITION = ("base", "novel_object", "novel_relation", "novel_both")
DEFAULT_KS = (20, 50, 100)


def triplet_slices(s_name: str, o_name: str, predicate: str, vocab: Vocabulary) -> list[str]:
    novel_o = set(vocab.novel_objects)
    novel_r = set(vocab.novel_relations)
    obj_novel = s_name in novel_o or o_name in novel_o
    rel_novel = predicate in novel_r
    out = ["all"]
    if obj_novel and rel_novel:
        out.append("novel_both")
    elif obj_novel:
        out.append("novel_object")
    elif rel_novel:
        out.append("novel_relation")
    else:
        out.append("base")
    if obj_novel:
        out.append("novel_object_any")
    if rel_novel:
        out.append("novel_relation_any")
    return out


def _match_matrix(gt_rows: list[tuple], preds: list[dict], iou_threshold: float) -> np.ndarray:
    """Boolean (n_gt x n_pred) triplet match matrix."""
    if not gt_rows or not preds:
        return np.zeros((len(gt_rows), len(preds)), dtype=bool)
    gs = center_to_corner(np.array([g[0] for g in gt_rows]))
    go = center_to_corner(np.array([g[3] for g in gt_rows]))
    ps = center_to_corner(np.array([p["s_box"] for p in preds], dtype=np.float64))
    po = center_to_corner(np.array([p["o_box"] for p in preds], dtype=np.float64))
    iou_s, _ = pairwise_iou_giou(gs, ps)
    iou_o, _ = pairwise_iou_giou(go, po)
    names = np.array([[g[1] == p["s_name"] and g[2] == p["predicate"] and g[4] == p["o_name"]
                       for p in preds] for g in gt_rows], dtype=bool)
    return names & (iou_s >= iou_threshold) & (iou_o >= iou_threshold)


def _greedy(match: np.ndarray, k: int) -> list[int]:
    """Per ground truth in order, rank of the first unused matching prediction within top-k, or -1."""
    used = np.zeros(match.shape[1], dtype=bool)
    out = []
    for row in match:
        hit = -1
        for j in np.flatnonzero(row[:k]):
            if not used[j]:
                used[j] = True
                hit = int(j)
                break
        out.append(hit)
    return out


@dataclass
class EvalReport:
    recall: dict
    per_image: list
    matched: list
    counts: dict
    ks: tuple = DEFAULT_KS
    iou_threshold: float = 0.5
    graph_constraint: bool = True
    setting: str = "closed"

    def r(self, k: int, slice_: str = "all") -> Optional[float]:
        return self.recall[slice_][str(k)]

    def to_json(self) -> dict:
        return {
            "setting": self.setting,
            "graph_constraint": self.graph_constraint,
            "iou_threshold": self.iou_threshold,
            "ks": list(self.ks),
            "recall": self.recall,
            "counts": self.counts,
            "per_image": self.per_image,
            "matched": self.matched,
        }


def evaluate_sgdet(preds: Mapping[str, Sequence[dict]], gts: Dataset, iou_threshold: float = 0.5,
                   ks: Sequence[int] = DEFAULT_KS, graph_constraint: bool = True,
                   setting: str = "closed") -> EvalReport:
    """SGDET Recall@K, averaged per image, with base/novel slices.

    A ground-truth triplet is recalled when an unused prediction in the top-K
    has matching subject, predicate and object names and both boxes reach
    ``iou_threshold`` IoU. Ground truths are visited in annotation order and
    take the highest-ranked available match.
    """
    vocab = gts.vocabulary
    ks = tuple(sorted(ks))
    per_image = []
    matched = []
    pooled = {s: {"total": 0, **{str(k): 0 for k in ks}} for s in SLICES}
    for rec in gts.records:
        g = rec.graph
        rows = []
        for e in g.edges:
            s, o = g.nodes[e.subject], g.nodes[e.object]
            rows.append((s.box.as_array(), s.concept, e.predicate, o.box.as_array(), o.concept))
        if rec.image_id not in preds:
            logger.warning("image %s has no predictions; counted as zero recall", rec.image_id)
            plist = []
        else:
            plist = list(preds[rec.image_id])[: max(ks)]
        match = _match_matrix(rows, plist, iou_threshold)
        slices = [triplet_slices(r[1], r[4], r[2], vocab) for r in rows]
        entry = {"image_id": rec.image_id, "n_gt": {}, "recall": {}}
        for s in SLICES:
            entry["n_gt"][s] = sum(s in sl for sl in slices)
            pooled[s]["total"] += entry["n_gt"][s]
        for k in ks:
            hits = _greedy(match, k)
            for s in SLICES:
                n = entry["n_gt"][s]
                h = sum(1 for sl, hit in zip(slices, hits) if s in sl and hit >= 0)
                pooled[s][str(k)] += h
                entry["recall"].setdefault(s, {})[str(k)] = (h / n) if n else None
            if k == ks[-1]:
                for gi, hit in enumerate(hits):
                    if hit >= 0:
                        matched.append({"image_id": rec.image_id, "gt": gi, "rank": hit})
        per_image.append(entry)
    recall = {}
    for s in SLICES:
        recall[s] = {}
        for k in ks:
            vals = [e["recall"][s][str(k)] for e in per_image if e["recall"][s][str(k)] is not None]
            recall[s][str(k)] = float(np.mean(vals)) if vals else None
    return EvalReport(recall, per_image, matched, pooled, ks, iou_threshold, graph_constraint, setting)


# synthetic data --------------------------------------------------------------

OBJECT_POOL = (
    "man", "woman", "dog", "cat", "horse", "skateboard", "helmet", "umbrella", "table", "cup",
    "box", "tree", "car", "bike", "bag", "chair", "plate", "bottle", "lamp", "book",
    "phone", "hat", "shirt", "window", "door", "bench", "kite", "ball", "bowl", "clock",
    "vase", "train", "boat", "bird", "sign", "pole", "fence", "wheel", "girl", "boy",
)

RELATION_RULES = ("inside", "overlapping", "above", "below", "left of", "near", "right of", "contains")
ADJECTIVES = ("small", "red", "large", "white", "old", "wooden")


class InfeasibleGeometry(RuntimeError):
    pass


@dataclass
class SyntheticSpec:
    n_scenes: int = 32
    n_objects: int = 12
    n_relations: int = 6
    noise: float = 0.05
    seed: int = 0
    min_objects: int = 3
    max_objects: int = 8
    n_background: int = 2
    text_dim: int = DEFAULT_TEXT_DIM
    box_scale: float = 3.0
    inside_prob: float = 0.3
    allow_overlap: bool = True
    gap: float = 0.1
    near_dist: float = 0.3
    backbone_seed: int = 1234
    captions: bool = True
    caption_adjective_prob: float = 0.3
    id_prefix: str = "img"

    def __post_init__(self):
        if self.n_objects < 2 or self.n_relations < 2:
            raise ValueError("need at least 2 object and 2 relation categories")
        if self.n_objects > len(OBJECT_POOL):
            raise ValueError(f"at most {len(OBJECT_POOL)} object categories available")
        if self.n_relations > len(RELATION_RULES):
            raise ValueError(f"at most {len(RELATION_RULES)} geometric relations available")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")
        if self.max_objects > self.n_objects:
            raise ValueError("max_objects exceeds the object vocabulary (concepts are unique per scene)")

    @property
    def feat_dim(self) -> int:
        return self.text_dim + 8

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticData:
    dataset: Dataset
    features: dict
    projection: np.ndarray
    spec: SyntheticSpec


def relation_for(s: np.ndarray, o: np.ndarray, relations: Sequence[str], gap: float = 0.1,
                 near_dist: float = 0.3) -> Optional[str]:
    """First geometric rule (in priority order) that holds for corner boxes s -> o."""
    active = set(relations)
    iw = min(s[2], o[2]) - max(s[0], o[0])
    ih = min(s[3], o[3]) - max(s[1], o[1])
    inter = iw > 0 and ih > 0
    s_in_o = s[0] >= o[0] and s[1] >= o[1] and s[2] <= o[2] and s[3] <= o[3]
    o_in_s = o[0] >= s[0] and o[1] >= s[1] and o[2] <= s[2] and o[3] <= s[3]
    checks = {
        "inside": s_in_o,
        "contains": o_in_s,
        "overlapping": inter and not s_in_o and not o_in_s,
        "above": not inter and iw > 0 and s[3] <= o[1] and o[1] - s[3] < gap,
        "below": not inter and iw > 0 and o[3] <= s[1] and s[1] - o[3] < gap,
        "left of": not inter and ih > 0 and s[2] <= o[0] and o[0] - s[2] < gap,
        "right of": not inter and ih > 0 and o[2] <= s[0] and s[0] - o[2] < gap,
        "near": not inter and math.dist(((s[0] + s[2]) / 2, (s[1] + s[3]) / 2), ((o[0] + o[2]) / 2, (o[1] + o[3]) / 2)) < near_dist,
    }
    for name in RELATION_RULES:
        if name in active and checks[name]:
            return name
    return None


def _place_boxes(rng: np.random.Generator, n: int, spec: SyntheticSpec) -> list[np.ndarray]:
    boxes: list[np.ndarray] = []
    for _ in range(n):
        for _attempt in range(500):
            parents = [b for b in boxes if (b[2] - b[0]) >= 0.18 and (b[3] - b[1]) >= 0.18]
            if spec.allow_overlap and parents and rng.random() < spec.inside_prob:
                p = parents[rng.integers(len(parents))]
                pw, ph = p[2] - p[0], p[3] - p[1]
                w, h = pw * rng.uniform(0.3, 0.6), ph * rng.uniform(0.3, 0.6)
                x1 = rng.uniform(p[0] + 0.02 * pw, p[2] - w - 0.02 * pw)
                y1 = rng.uniform(p[1] + 0.02 * ph, p[3] - h - 0.02 * ph)
            else:
                w, h = rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25)
                x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
            box = np.array([x1, y1, x1 + w, y1 + h])
            if not spec.allow_overlap and any(
                    min(box[2], b[2]) > max(box[0], b[0]) and min(box[3], b[3]) > max(box[1], b[1]) for b in boxes):
                continue
            boxes.append(box)
            break
        else:
            raise InfeasibleGeometry(f"could not place {n} boxes without overlap")
    return boxes


def _box_encoding(corners: np.ndarray, scale: float) -> np.ndarray:
    center = np.array([(corners[0] + corners[2]) / 2, (corners[1] + corners[3]) / 2,
                       corners[2] - corners[0], corners[3] - corners[1]])
    return scale * np.concatenate([center, corners])


def backbone_projection(spec: SyntheticSpec) -> np.ndarray:
    """Fixed orthogonal map standing in for the frozen visual backbone."""
    rng = np.random.default_rng(spec.backbone_seed)
    q, r = np.linalg.qr(rng.standard_normal((spec.feat_dim, spec.feat_dim)))
    return q * np.sign(np.diag(r))


def caption_for(graph: SceneGraph, rng: np.random.Generator, adjective_prob: float = 0.3) -> str:
    """Render every edge as 'a <subject> <predicate> a <object>' joined with 'and'."""
    def np_(name):
        definite = rng.random() < 0.5
        words = [name]
        if rng.random() < adjective_prob:
            words.insert(0, ADJECTIVES[rng.integers(len(ADJECTIVES))])
        det = "the" if definite else ("an" if words[0][0] in "aeiou" else "a")
        return " ".join([det] + words)

    clauses = [f"{np_(graph.nodes[e.subject].concept)} {e.predicate} {np_(graph.nodes[e.object].concept)}"
               for e in graph.edges]
    sentences = []
    for k in range(0, len(clauses), 2):
        sentences.append(" and ".join(clauses[k:k + 2]))
    return ". ".join(s[0].upper() + s[1:] for s in sentences) + ("." if sentences else "")


def generate_synthetic_dataset(spec: SyntheticSpec) -> SyntheticData:
    """Scenes of boxed objects with rule-derived predicates and feature fixtures.

    Each object token is ``P @ [concept embedding, box encoding] + noise``
    with a fixed orthogonal ``P``; background tokens carry a box but no
    concept. Tokens are shuffled per image.
    """
    rng = np.random.default_rng(spec.seed)
    objects = OBJECT_POOL[: spec.n_objects]
    relations = RELATION_RULES[: spec.n_relations]
    vocab = Vocabulary(objects, relations)
    P = backbone_projection(spec)
    emb = {n: fixture_vector(n, spec.text_dim) for n in objects}
    records, features = [], {}
    width = len(str(spec.n_scenes))
    for k in range(spec.n_scenes):
        image_id = f"{spec.id_prefix}{k:0{width}d}"
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        names = [objects[i] for i in rng.choice(len(objects), size=n, replace=False)]
        corners = _place_boxes(rng, n, spec)
        nodes = tuple(Node(BBox.from_corners(*c), name, objects.index(name)) for c, name in zip(corners, names))
        edges = []
        for i in range(n):
            for j in range(n):
                if i != j:
                    rel = relation_for(corners[i], corners[j], relations, spec.gap, spec.near_dist)
                    if rel is not None:
                        edges.append(Edge(i, j, rel))
        graph = SceneGraph(nodes, tuple(edges), image_id)
        tokens, pos_centers = [], []
        for c, name in zip(corners, names):
            raw = np.concatenate([emb[name], _box_encoding(c, spec.box_scale)])
            tokens.append(P @ raw)
            pos_centers.append(((c[0] + c[2]) / 2, (c[1] + c[3]) / 2))
        for _ in range(spec.n_background + spec.max_objects - n):
            w, h = rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)
            x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            c = np.array([x1, y1, x1 + w, y1 + h])
            tokens.append(P @ np.concatenate([np.zeros(spec.text_dim), _box_encoding(c, spec.box_scale)]))
            pos_centers.append(((c[0] + c[2]) / 2, (c[1] + c[3]) / 2))
        tokens = np.array(tokens) + spec.noise * rng.standard_normal((len(tokens), spec.feat_dim))
        pos = positional_encoding(np.array(pos_centers))
        order = rng.permutation(len(tokens))
        ref = f"features.bin#{image_id}"
        features[ref] = FeatureMap(tokens[order], pos[order])
        caption = caption_for(graph, rng, spec.caption_adjective_prob) if spec.captions else None
        records.append(Record(image_id, ref, graph, caption))
    return SyntheticData(Dataset(vocab, records), features, P, spec)
