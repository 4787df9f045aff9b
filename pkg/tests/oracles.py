"""Independent reference implementations shared by unit and acceptance tests."""

import numpy as np

from ovsg.types import BBox, Dataset, Edge, Node, Record, SceneGraph, Vocabulary


def box_iou(a, b) -> float:
    """IoU of two center-format boxes, written out coordinate by coordinate."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def greedy_recall(preds: dict, ds: Dataset, k: int, thr: float = 0.5) -> tuple[float, list]:
    """Per-image greedy SGDET recall: ground truths in annotation order take the
    best-ranked unused matching prediction among the top k."""
    per_image = []
    for rec in ds.records:
        g = rec.graph
        if not g.edges:
            per_image.append(None)
            continue
        top = list(preds.get(rec.image_id, []))[:k]
        used = set()
        hits = 0
        for e in g.edges:
            s, o = g.nodes[e.subject], g.nodes[e.object]
            for rank, p in enumerate(top):
                if rank in used:
                    continue
                if (p["s_name"], p["predicate"], p["o_name"]) != (s.concept, e.predicate, o.concept):
                    continue
                if box_iou(p["s_box"], s.box.as_array()) >= thr and box_iou(p["o_box"], o.box.as_array()) >= thr:
                    used.add(rank)
                    hits += 1
                    break
        per_image.append(hits / len(g.edges))
    vals = [r for r in per_image if r is not None]
    return (float(np.mean(vals)) if vals else None), per_image


def _jitter(rng, box: BBox, scale: float) -> list:
    b = box.as_array() + rng.normal(scale=scale, size=4) * np.array([1, 1, 0.5, 0.5])
    b[:2] = np.clip(b[:2], 0.0, 1.0)
    b[2:] = np.clip(b[2:], 0.01, 1.0)
    return b.tolist()


def random_eval_config(seed: int, n_images: int = 4):
    """Random ground truth plus a ranked prediction dump mixing near-copies,
    wrong labels, duplicates and clutter."""
    rng = np.random.default_rng(seed)
    objects = ("man", "horse", "hat", "dog", "cup")
    relations = ("on", "riding", "near", "under")
    vocab = Vocabulary(objects, relations, tuple(rng.random(5) < 0.7), tuple(rng.random(4) < 0.7))
    records, preds = [], {}
    for i in range(n_images):
        n = int(rng.integers(2, 6))
        nodes = []
        for _ in range(n):
            w, h = rng.uniform(0.1, 0.5, size=2)
            nodes.append(Node(BBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h),
                              str(rng.choice(objects))))
        edges = set()
        for _ in range(int(rng.integers(0, 7))):
            s, o = rng.choice(n, 2, replace=False)
            edges.add((int(s), int(o), str(rng.choice(relations))))
        g = SceneGraph(tuple(nodes), tuple(Edge(*e) for e in sorted(edges)), f"im{i}")
        records.append(Record(g.image_id, "", g))
        cands = []
        for e in g.edges:
            for _ in range(int(rng.integers(0, 3))):
                s, o = g.nodes[e.subject], g.nodes[e.object]
                cand = {"s_box": _jitter(rng, s.box, rng.choice([0.0, 0.02, 0.1])),
                        "o_box": _jitter(rng, o.box, rng.choice([0.0, 0.02, 0.1])),
                        "s_name": s.concept, "o_name": o.concept, "predicate": e.predicate}
                if rng.random() < 0.2:
                    cand["predicate"] = str(rng.choice(relations))
                cands.append(cand)
        for _ in range(int(rng.integers(0, 120))):
            a, b = rng.choice(n, 2, replace=False) if n > 1 else (0, 0)
            cands.append({"s_box": _jitter(rng, g.nodes[a].box, 0.05), "o_box": _jitter(rng, g.nodes[b].box, 0.05),
                          "s_name": str(rng.choice(objects)), "o_name": str(rng.choice(objects)),
                          "predicate": str(rng.choice(relations))})
        order = rng.permutation(len(cands))
        scores = np.sort(rng.random(len(cands)))[::-1]
        preds[g.image_id] = [{**cands[j], "score": float(sc)} for j, sc in zip(order, scores)]
    return preds, Dataset(vocab, records)
