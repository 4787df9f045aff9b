"""Scene-graph data model, box geometry and dataset containers."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BBox:
    """Normalized center-format box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside [0,1]: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"degenerate or oversized box: {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def corners(self) -> np.ndarray:
        return center_to_corner(self.as_array())

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BBox":
        return cls(*(float(v) for v in corner_to_center(np.array([x1, y1, x2, y2], dtype=np.float64))))


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_convert(box, direction: str = "center_to_corner") -> np.ndarray:
    """Convert a single box between center (cx,cy,w,h) and corner (x1,y1,x2,y2) form.

    Degenerate boxes (zero width or height) are rejected in both directions.
    """
    if isinstance(box, BBox):
        box = box.as_array()
    b = np.asarray(box, dtype=np.float64)
    if b.shape != (4,):
        raise ValueError(f"expected a 4-vector, got shape {b.shape}")
    if direction == "center_to_corner":
        if b[2] <= 0 or b[3] <= 0:
            raise ValueError(f"degenerate box {b.tolist()}")
        return center_to_corner(b)
    if direction == "corner_to_center":
        if b[2] <= b[0] or b[3] <= b[1]:
            raise ValueError(f"degenerate box {b.tolist()}")
        return corner_to_center(b)
    raise ValueError(f"unknown direction {direction!r}")


def _as_corners(box) -> np.ndarray:
    if isinstance(box, BBox):
        return box.corners()
    return center_to_corner(np.asarray(box, dtype=np.float64))


def pairwise_iou_giou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU matrices between two sets of corner boxes, shapes (n,4) and (m,4)."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / union
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclosure = ew * eh
    return iou, iou - (enclosure - union) / enclosure


def iou(a, b) -> float:
    return float(pairwise_iou_giou(_as_corners(a)[None], _as_corners(b)[None])[0][0, 0])


def giou(a, b) -> float:
    """Generalized IoU of two center-format boxes; lies in [-1, 1]."""
    return float(pairwise_iou_giou(_as_corners(a)[None], _as_corners(b)[None])[1][0, 0])


@dataclass(frozen=True)
class Node:
    box: BBox
    concept: str
    concept_id: Optional[int] = None


@dataclass(frozen=True)
class Edge:
    subject: int
    object: int
    predicate: str


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    def triplets(self) -> list[tuple[int, str, int]]:
        return [(e.subject, e.predicate, e.object) for e in self.edges]

    def deduplicated(self) -> tuple["SceneGraph", int]:
        seen = set()
        kept = []
        for e in self.edges:
            key = (e.subject, e.object, e.predicate)
            if key in seen:
                continue
            seen.add(key)
            kept.append(e)
        return replace(self, edges=tuple(kept)), len(self.edges) - len(kept)

    def drop_nodes(self, drop: Iterable[int]) -> "SceneGraph":
        """Remove nodes and every incident edge, reindexing the survivors."""
        drop = set(drop)
        remap = {}
        nodes = []
        for i, n in enumerate(self.nodes):
            if i not in drop:
                remap[i] = len(nodes)
                nodes.append(n)
        edges = [
            Edge(remap[e.subject], remap[e.object], e.predicate)
            for e in self.edges
            if e.subject in remap and e.object in remap
        ]
        return SceneGraph(tuple(nodes), tuple(edges), self.image_id)


@dataclass(frozen=True)
class Vocabulary:
    object_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    base_object_mask: tuple[bool, ...] = ()
    base_relation_mask: tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "object_names", tuple(self.object_names))
        object.__setattr__(self, "relation_names", tuple(self.relation_names))
        if not self.base_object_mask:
            object.__setattr__(self, "base_object_mask", (True,) * len(self.object_names))
        if not self.base_relation_mask:
            object.__setattr__(self, "base_relation_mask", (True,) * len(self.relation_names))
        object.__setattr__(self, "base_object_mask", tuple(bool(x) for x in self.base_object_mask))
        object.__setattr__(self, "base_relation_mask", tuple(bool(x) for x in self.base_relation_mask))
        for label, names in (("object", self.object_names), ("relation", self.relation_names)):
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {label} names in vocabulary")
            if any(not n for n in names):
                raise ValueError(f"empty {label} name in vocabulary")
        if len(self.base_object_mask) != len(self.object_names):
            raise ValueError("base_object_mask length differs from object_names")
        if len(self.base_relation_mask) != len(self.relation_names):
            raise ValueError("base_relation_mask length differs from relation_names")

    @property
    def base_objects(self) -> tuple[str, ...]:
        return tuple(n for n, b in zip(self.object_names, self.base_object_mask) if b)

    @property
    def novel_objects(self) -> tuple[str, ...]:
        return tuple(n for n, b in zip(self.object_names, self.base_object_mask) if not b)

    @property
    def base_relations(self) -> tuple[str, ...]:
        return tuple(n for n, b in zip(self.relation_names, self.base_relation_mask) if b)

    @property
    def novel_relations(self) -> tuple[str, ...]:
        return tuple(n for n, b in zip(self.relation_names, self.base_relation_mask) if not b)

    def base_only(self) -> "Vocabulary":
        """The vocabulary visible during training: base names only."""
        return Vocabulary(self.base_objects, self.base_relations)

    def to_json(self) -> dict:
        return {
            "object_names": list(self.object_names),
            "relation_names": list(self.relation_names),
            "base_object_mask": list(self.base_object_mask),
            "base_relation_mask": list(self.base_relation_mask),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls(
            tuple(d["object_names"]),
            tuple(d["relation_names"]),
            tuple(d.get("base_object_mask", ())),
            tuple(d.get("base_relation_mask", ())),
        )


@dataclass(frozen=True)
class Violation:
    kind: str
    location: str
    message: str
    severity: str = "error"


def validate_scene_graph(g: SceneGraph, v: Optional[Vocabulary] = None) -> list[Violation]:
    """Report every violated scene-graph invariant. Never raises.

    Names missing from the vocabulary are reported as out-of-vocabulary
    warnings; structural problems are errors.
    """
    report: list[Violation] = []
    objects = set(v.object_names) if v is not None else None
    relations = set(v.relation_names) if v is not None else None
    n = len(g.nodes)
    for i, node in enumerate(g.nodes):
        loc = f"{g.image_id}/nodes[{i}]"
        if not node.concept:
            report.append(Violation("empty_concept", loc, "concept name is empty"))
        elif objects is not None and node.concept not in objects:
            report.append(Violation("oov_concept", loc, f"concept {node.concept!r} not in vocabulary", "warning"))
        if node.concept_id is not None and v is not None:
            if not 0 <= node.concept_id < len(v.object_names):
                report.append(Violation("bad_concept_id", loc, f"concept_id {node.concept_id} out of range"))
    seen = set()
    for k, e in enumerate(g.edges):
        loc = f"{g.image_id}/edges[{k}]"
        if not (0 <= e.subject < n) or not (0 <= e.object < n):
            report.append(Violation("bad_index", loc, f"edge ({e.subject},{e.object}) outside {n} nodes"))
        if e.subject == e.object:
            report.append(Violation("self_loop", loc, f"subject equals object ({e.subject})"))
        if not e.predicate:
            report.append(Violation("empty_predicate", loc, "predicate is empty"))
        elif relations is not None and e.predicate not in relations:
            report.append(Violation("oov_predicate", loc, f"predicate {e.predicate!r} not in vocabulary", "warning"))
        key = (e.subject, e.object, e.predicate)
        if key in seen:
            report.append(Violation("duplicate_triple", loc, f"duplicate triple {key}"))
        seen.add(key)
    return report


@dataclass(frozen=True)
class Record:
    image_id: str
    features: str
    graph: SceneGraph
    caption: Optional[str] = None
    provenance: Optional[str] = None


@dataclass
class Dataset:
    """A split: vocabulary plus image records. ``root`` resolves feature refs."""

    vocabulary: Vocabulary
    records: list[Record] = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image_id in dataset")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, Record]:
        return {r.image_id: r for r in self.records}

    def validate(self) -> list[Violation]:
        out = []
        for r in self.records:
            out.extend(validate_scene_graph(r.graph, self.vocabulary))
        return out


def graph_to_json(g: SceneGraph) -> dict:
    return {
        "nodes": [{"box": [n.box.cx, n.box.cy, n.box.w, n.box.h], "concept": n.concept} for n in g.nodes],
        "edges": [{"s": e.subject, "o": e.object, "p": e.predicate} for e in g.edges],
    }


def graph_from_json(d: dict, image_id: str) -> SceneGraph:
    nodes = tuple(Node(BBox(*(float(x) for x in n["box"])), n["concept"]) for n in d.get("nodes", []))
    edges = tuple(Edge(int(e["s"]), int(e["o"]), e["p"]) for e in d.get("edges", []))
    return SceneGraph(nodes, edges, image_id)


def dataset_to_json(ds: Dataset) -> dict:
    records = []
    for r in ds.records:
        rec = {"image_id": r.image_id, "features": r.features, "graph": graph_to_json(r.graph)}
        if r.caption is not None:
            rec["caption"] = r.caption
        if r.provenance is not None:
            rec["provenance"] = r.provenance
        records.append(rec)
    return {"vocabulary": ds.vocabulary.to_json(), "records": records}


def dataset_from_json(d: dict, root: Optional[Path] = None) -> Dataset:
    vocab = Vocabulary.from_json(d["vocabulary"])
    records = []
    dropped = 0
    for rec in d["records"]:
        g, n_dup = graph_from_json(rec["graph"], rec["image_id"]).deduplicated()
        dropped += n_dup
        records.append(Record(rec["image_id"], rec["features"], g, rec.get("caption"), rec.get("provenance")))
    if dropped:
        logger.info("removed %d duplicate triples at load", dropped)
    return Dataset(vocab, records, root)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataset_to_json(ds), indent=1, ensure_ascii=False), encoding="utf-8")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    return dataset_from_json(json.loads(path.read_text(encoding="utf-8")), root=path.parent)


def triplet_keys(g: SceneGraph) -> set[tuple[str, str, str]]:
    return {(g.nodes[e.subject].concept, e.predicate, g.nodes[e.object].concept) for e in g.edges}


def names_in(graphs: Sequence[SceneGraph]) -> tuple[set[str], set[str]]:
    objs, rels = set(), set()
    for g in graphs:
        objs.update(n.concept for n in g.nodes)
        rels.update(e.predicate for e in g.edges)
    return objs, rels
