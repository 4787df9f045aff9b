"""Caption triplet parsing and pseudo-label grounding.

The parser is a deterministic rule cascade driven by a versioned JSON rule
table: noun phrases are found by longest lexicon match (determiners and
adjectives stripped, with a determiner-led fallback for unknown nouns),
then ``NP verb NP``, ``NP verb prep NP`` and ``NP prep NP`` patterns are
read left to right.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np

from .autograd import _sigmoid
from .concepts import ConceptTable, fixture_vector
from .matching import MatchCost, linear_assignment
from .types import BBox, Edge, Node, SceneGraph, Vocabulary

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[A-Za-z0-9]+(?:['-][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")


@lru_cache(maxsize=None)
def load_rules(path: Optional[str] = None) -> dict:
    if path is None:
        text = resources.files("ovsg.data").joinpath("parser_rules.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


@dataclass(frozen=True)
class CaptionTriplet:
    subject: str
    relation: str
    object: str
    subject_span: tuple[int, int] = (0, 0)
    relation_span: tuple[int, int] = (0, 0)
    object_span: tuple[int, int] = (0, 0)

    def key(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)


@dataclass
class _Lexicon:
    nouns: dict
    relations: dict
    max_noun: int
    max_rel: int


def _lexicon(nouns: Iterable[str], relations: Iterable[str], rules: dict) -> _Lexicon:
    noun_map = {tuple(n.lower().split()): n for n in nouns}
    rel_words = list(rules["multiword_prepositions"]) + [r for r in relations if len(r.split()) > 1]
    rel_map = {tuple(r.lower().split()): r for r in rel_words}
    return _Lexicon(noun_map, rel_map, max((len(k) for k in noun_map), default=1),
                    max((len(k) for k in rel_map), default=1))


def _singular(word: str, rules: dict) -> list[str]:
    out = []
    for suf in rules["plural_suffixes"]:
        if word.endswith(suf) and len(word) > len(suf) + 1:
            out.append(word[: -len(suf)])
    return out


@dataclass
class _Item:
    kind: str  # "np", "rel", "tok"
    start_tok: int
    end_tok: int
    text: str = ""
    span: tuple[int, int] = (0, 0)


def parse_caption(text: str, nouns: Sequence[str] = (), relations: Sequence[str] = (),
                  rules: Optional[dict] = None) -> list[CaptionTriplet]:
    """Extract (subject, relation, object) triplets from one caption."""
    if not text or not text.strip():
        return []
    rules = rules or load_rules()
    lex = _lexicon(nouns, relations, rules)
    dets = set(rules["determiners"])
    adjs = set(rules["adjectives"])
    auxs = set(rules["auxiliaries"])
    conjs = set(rules["conjunctions"])
    preps = set(rules["prepositions"])
    verbs = set(rules["verbs"])
    rel_lexicon_words = {w for r in relations for w in r.lower().split()}

    def is_verb(w: str) -> bool:
        return w in verbs or (rules.get("ing_suffix_is_verb") and w.endswith("ing") and len(w) > 4)

    def is_word(w: str) -> bool:
        return w[0].isalnum()

    toks = [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN.finditer(text)]
    words = [t[0] for t in toks]
    n = len(toks)
    boundary = dets | auxs | conjs | preps | verbs

    def match_at(j: int, table: dict, longest: int) -> tuple[int, str]:
        for L in range(min(longest, n - j), 0, -1):
            key = tuple(words[j:j + L])
            if key in table:
                return L, table[key]
            last = words[j + L - 1]
            for s in _singular(last, rules):
                k2 = key[:-1] + (s,)
                if k2 in table:
                    return L, table[k2]
        return 0, ""

    items: list[_Item] = []
    i = 0
    while i < n:
        L, rel = match_at(i, lex.relations, lex.max_rel)
        if L:
            items.append(_Item("rel", i, i + L, " ".join(words[i:i + L]), (toks[i][1], toks[i + L - 1][2])))
            i += L
            continue
        j = i
        had_det = False
        while j < n and words[j] in dets:
            had_det = True
            j += 1
        while j < n and words[j] in adjs:
            j += 1
        L, noun = match_at(j, lex.nouns, lex.max_noun) if j < n else (0, "")
        if L:
            items.append(_Item("np", i, j + L, noun, (toks[j][1], toks[j + L - 1][2])))
            i = j + L
            continue
        if had_det:
            k = j
            while k < n and is_word(words[k]) and words[k] not in boundary and not is_verb(words[k]):
                k += 1
            if k > j:
                items.append(_Item("np", i, k, " ".join(words[j:k]), (toks[j][1], toks[k - 1][2])))
                i = k
                continue
        items.append(_Item("tok", i, i + 1, words[i], (toks[i][1], toks[i][2])))
        i += 1

    nps = [k for k, it in enumerate(items) if it.kind == "np"]
    max_rel = int(rules.get("max_relation_tokens", 5))
    out: list[CaptionTriplet] = []
    # prev: (object item, triplet, verb-led, auxiliary present) of the last triplet
    prev: Optional[tuple[int, CaptionTriplet, bool, bool]] = None
    for a, b in zip(nps, nps[1:]):
        between = items[a + 1:b]
        rel_parts = []
        has_aux = False
        ok = bool(between)
        for it in between:
            if it.kind == "rel":
                rel_parts.append(it)
                continue
            w = it.text
            if w in conjs or not is_word(w):
                ok = False
                break
            if w in auxs:
                has_aux = True
                continue
            if w in preps or is_verb(w) or w in rel_lexicon_words:
                rel_parts.append(it)
                continue
            ok = False
            break
        if not ok or not rel_parts:
            prev = None
            continue
        n_tokens = sum(p.end_tok - p.start_tok for p in rel_parts)
        if n_tokens > max_rel:
            prev = None
            continue
        first = rel_parts[0]
        verb_led = first.kind == "tok" and is_verb(first.text)
        relation = " ".join(p.text for p in rel_parts)
        subj = items[a]
        subj_text, subj_span = subj.text, subj.span
        if verb_led and prev is not None and prev[0] == a:
            # "man with a hat riding ...": the verb belongs to the head of the prepositional phrase
            after_prep = rules.get("attach_verb_to_prep_head") and not prev[2]
            # "man wearing a helmet is riding ...": a finite verb after a participle clause
            after_participle = (rules.get("attach_finite_verb_to_participle_head")
                                and prev[2] and not prev[3] and has_aux)
            if after_prep or after_participle:
                subj_text, subj_span = prev[1].subject, prev[1].subject_span
        obj = items[b]
        t = CaptionTriplet(subj_text, relation, obj.text, subj_span, (rel_parts[0].span[0], rel_parts[-1].span[1]), obj.span)
        out.append(t)
        prev = (b, t, verb_led, has_aux)
    seen = set()
    unique = []
    for t in out:
        if t.key() not in seen:
            seen.add(t.key())
            unique.append(t)
    return unique


def lexicon_from_vocabulary(v: Vocabulary) -> tuple[list[str], list[str]]:
    return list(v.object_names), list(v.relation_names)


# grounding -----------------------------------------------------------------


@dataclass
class PseudoLabel:
    """Grounded caption graph with node confidences and edge provenance."""

    graph: SceneGraph
    confidence: list[float] = field(default_factory=list)
    query_index: list[int] = field(default_factory=list)
    provenance: list[CaptionTriplet] = field(default_factory=list)


def _phrase_vector(name: str, concepts: ConceptTable, dim: int) -> np.ndarray:
    if name in concepts:
        return concepts[name]
    return fixture_vector(name, dim)


def _valid_box(b: np.ndarray) -> BBox:
    cx, cy = np.clip(b[:2], 0.0, 1.0)
    w, h = np.clip(b[2:], 1e-6, 1.0)
    return BBox(float(cx), float(cy), float(w), float(h))


def ground_triplets(triplets: Sequence[CaptionTriplet], pred_features: np.ndarray, pred_boxes: np.ndarray,
                    concepts: ConceptTable, threshold: float = 0.25, cost: Optional[MatchCost] = None,
                    score_mode: str = "matched", image_id: str = "",
                    vocab_matrix: Optional[np.ndarray] = None) -> PseudoLabel:
    """Attach caption phrases to predicted nodes and keep confident triplets.

    Each distinct phrase is assigned to its own prediction by category-only
    bipartite matching. A triplet survives when both endpoint scores are
    strictly greater than ``threshold``. ``score_mode="max"`` scores a node by
    its best concept over ``vocab_matrix`` instead of the matched phrase.
    """
    if not 0.0 <= threshold < 1.0 + 1e-12:
        raise ValueError("threshold must lie in [0, 1]")
    V = np.asarray(pred_features, dtype=np.float64)
    if V.ndim != 2 or len(V) == 0:
        raise ValueError("no predictions available for grounding")
    cost = cost or MatchCost(mode="category")
    if cost.mode != "category":
        cost = MatchCost(cost.cat, cost.l1, cost.giou, "category")
    phrases: list[str] = []
    for t in triplets:
        for p in (t.subject, t.object):
            if p not in phrases:
                phrases.append(p)
    if len(phrases) > len(V):
        logger.warning("%s: %d phrases but %d predictions; extra phrases dropped", image_id, len(phrases), len(V))
        phrases = phrases[: len(V)]
    if not phrases:
        return PseudoLabel(SceneGraph((), (), image_id))
    W = np.stack([_phrase_vector(p, concepts, V.shape[1]) for p in phrases])
    sim = _sigmoid(W @ V.T)
    cols = linear_assignment(cost.cat * (1.0 - sim))
    if score_mode == "matched":
        conf = {p: float(sim[i, cols[i]]) for i, p in enumerate(phrases)}
    elif score_mode == "max":
        if vocab_matrix is None:
            raise ValueError("score_mode='max' needs vocab_matrix")
        best = _sigmoid(V @ np.asarray(vocab_matrix).T).max(axis=1)
        conf = {p: float(best[cols[i]]) for i, p in enumerate(phrases)}
    else:
        raise ValueError(f"unknown score_mode {score_mode!r}")
    query = {p: cols[i] for i, p in enumerate(phrases)}

    kept = [t for t in triplets
            if t.subject in conf and t.object in conf and t.subject != t.object
            and conf[t.subject] > threshold and conf[t.object] > threshold]
    node_names: list[str] = []
    for t in kept:
        for p in (t.subject, t.object):
            if p not in node_names:
                node_names.append(p)
    index = {p: k for k, p in enumerate(node_names)}
    nodes = tuple(Node(_valid_box(np.asarray(pred_boxes)[query[p]]), p) for p in node_names)
    edges = []
    seen = set()
    prov = []
    for t in kept:
        key = (index[t.subject], index[t.object], t.relation)
        if key in seen:
            continue
        seen.add(key)
        edges.append(Edge(*key))
        prov.append(t)
    return PseudoLabel(SceneGraph(nodes, tuple(edges), image_id),
                       [conf[p] for p in node_names], [query[p] for p in node_names], prov)


def merge_pseudo_labels(labels: Sequence[PseudoLabel]) -> PseudoLabel:
    """Union of several captions' pseudo graphs for one image, deduplicated by phrase."""
    names: list[str] = []
    nodes, conf, query = [], [], []
    edges, prov, seen = [], [], set()
    image_id = labels[0].graph.image_id if labels else ""
    for lab in labels:
        local = {}
        for k, node in enumerate(lab.graph.nodes):
            if node.concept not in names:
                names.append(node.concept)
                nodes.append(node)
                conf.append(lab.confidence[k])
                query.append(lab.query_index[k])
            local[k] = names.index(node.concept)
        for e, t in zip(lab.graph.edges, lab.provenance):
            key = (local[e.subject], local[e.object], e.predicate)
            if key not in seen:
                seen.add(key)
                edges.append(Edge(*key))
                prov.append(t)
    return PseudoLabel(SceneGraph(tuple(nodes), tuple(edges), image_id), conf, query, prov)
