import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovsg.autograd import _sigmoid
from ovsg.concepts import ConceptTable, embed_concepts, fixture_vector
from ovsg.weak import CaptionTriplet, ground_triplets, load_rules, merge_pseudo_labels, parse_caption

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "captions.json").read_text())


def logit(p):
    return np.log(p / (1 - p))


def basis_table(names, dim=4):
    return ConceptTable({n: np.eye(dim)[i] for i, n in enumerate(names)})


def exact_logit(p):
    """A float x with sigmoid(x) == p exactly in float64."""
    x = logit(p)
    for _ in range(64):
        s = _sigmoid(np.array([x]))[0]
        if s == p:
            return x
        x = np.nextafter(x, np.inf if s < p else -np.inf)
    raise AssertionError("no exact preimage found")


class TestParser:
    @pytest.mark.parametrize("case", FIXTURE["captions"], ids=lambda c: c["text"][:30] or "empty")
    def test_fixture(self, case):
        got = [list(t.key()) for t in parse_caption(case["text"], FIXTURE["nouns"])]
        assert got == case["triplets"]

    def test_riding_skateboard(self):
        assert [t.key() for t in parse_caption("a man riding a skateboard", ["man", "skateboard"])] == \
            [("man", "riding", "skateboard")]

    def test_empty(self):
        assert parse_caption("") == [] and parse_caption("   ") == []

    def test_helmet_wheel(self):
        got = {t.key() for t in parse_caption("the helmet on the man and a wheel on the skateboard",
                                              ["helmet", "man", "wheel", "skateboard"])}
        assert got == {("helmet", "on", "man"), ("wheel", "on", "skateboard")}

    def test_spans(self):
        text = "A woman is holding an umbrella."
        (t,) = parse_caption(text, ["woman", "umbrella"])
        assert text[slice(*t.subject_span)] == "woman"
        assert text[slice(*t.relation_span)] == "holding"
        assert text[slice(*t.object_span)] == "umbrella"
        assert t.subject_span[1] <= t.object_span[0]

    def test_duplicates_removed(self):
        got = parse_caption("a dog on a bench. a dog on a bench.", ["dog", "bench"])
        assert [t.key() for t in got] == [("dog", "on", "bench")]

    def test_relation_lexicon_words(self):
        got = parse_caption("a cup beside a plate", ["cup", "plate"], ["beside"])
        assert [t.key() for t in got] == [("cup", "beside", "plate")]

    def test_rules_versioned(self):
        assert load_rules()["version"]

    @settings(max_examples=100)
    @given(st.text(max_size=80))
    def test_total_and_deterministic(self, text):
        a = parse_caption(text, FIXTURE["nouns"])
        assert a == parse_caption(text, FIXTURE["nouns"])
        for t in a:
            assert t.subject and t.relation and t.object


class TestGrounding:
    def test_confident_triplet_kept(self):
        table = basis_table(["man", "horse"])
        feats = np.array([[logit(0.9), 0, 0, 0], [0, logit(0.9), 0, 0]])
        lab = ground_triplets([CaptionTriplet("man", "riding", "horse")], feats, np.full((2, 4), 0.3), table)
        assert [(e.subject, e.object, e.predicate) for e in lab.graph.edges] == [(0, 1, "riding")]
        np.testing.assert_allclose(lab.confidence, [0.9, 0.9])
        assert lab.query_index == [0, 1]

    def test_exact_threshold_dropped(self):
        table = basis_table(["man", "horse"])
        x = exact_logit(0.25)
        feats = np.array([[x, 0, 0, 0], [0, logit(0.9), 0, 0]])
        lab = ground_triplets([CaptionTriplet("man", "riding", "horse")], feats, np.full((2, 4), 0.3), table, 0.25)
        assert lab.graph.edges == ()
        above = x
        while _sigmoid(np.array([above]))[0] == 0.25:
            above = np.nextafter(above, np.inf)
        feats[0, 0] = above
        lab = ground_triplets([CaptionTriplet("man", "riding", "horse")], feats, np.full((2, 4), 0.3), table, 0.25)
        assert len(lab.graph.edges) == 1

    def test_crossed_similarities(self):
        table = basis_table(["a", "b"])
        sim = np.array([[0.9, 0.8], [0.85, 0.1]])
        feats = logit(sim).T.copy()
        feats = np.hstack([feats, np.zeros((2, 2))])
        lab = ground_triplets([CaptionTriplet("a", "r", "b")], feats, np.full((2, 4), 0.3), table, 0.0)
        best = min(itertools.permutations(range(2)), key=lambda c: sum(1 - sim[i, c[i]] for i in range(2)))
        assert lab.query_index == list(best) == [1, 0]

    def test_unknown_phrase_uses_fixture_embedding(self):
        table = embed_concepts(["man"], dim=8)
        feats = np.stack([6 * table["man"], 6 * fixture_vector("unicycle", 8)])
        lab = ground_triplets([CaptionTriplet("man", "riding", "unicycle")], feats, np.full((2, 4), 0.3), table)
        assert [n.concept for n in lab.graph.nodes] == ["man", "unicycle"]
        assert lab.query_index == [0, 1]

    def test_boxes_from_matched_predictions(self):
        table = basis_table(["man", "horse"])
        feats = np.array([[0, logit(0.9), 0, 0], [logit(0.9), 0, 0, 0]])
        boxes = np.array([[0.2, 0.2, 0.1, 0.1], [0.7, 0.6, 0.3, 0.2]])
        lab = ground_triplets([CaptionTriplet("man", "riding", "horse")], feats, boxes, table)
        np.testing.assert_allclose(lab.graph.nodes[0].box.as_array(), boxes[1])

    def test_no_predictions(self):
        with pytest.raises(ValueError):
            ground_triplets([CaptionTriplet("a", "r", "b")], np.zeros((0, 4)), np.zeros((0, 4)), basis_table(["a"]))

    @pytest.mark.parametrize("bad", [-0.1, 1.5])
    def test_threshold_domain(self, bad):
        with pytest.raises(ValueError):
            ground_triplets([], np.zeros((1, 4)), np.zeros((1, 4)), basis_table(["a"]), bad)

    def test_max_score_mode(self):
        table = basis_table(["man", "horse", "cat"])
        feats = np.array([[logit(0.2), 0, logit(0.95), 0], [0, logit(0.9), 0, 0]])
        t = [CaptionTriplet("man", "riding", "horse")]
        matched = ground_triplets(t, feats, np.full((2, 4), 0.3), table)
        best = ground_triplets(t, feats, np.full((2, 4), 0.3), table, score_mode="max",
                               vocab_matrix=table.matrix(["man", "horse", "cat"]))
        assert matched.graph.edges == () and len(best.graph.edges) == 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_gate_and_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        names = ["man", "horse", "hat", "dog", "cup"]
        table = embed_concepts(names, dim=8)
        trips = []
        for i in range(4):
            s, o = rng.choice(names, 2, replace=False)
            trips.append(CaptionTriplet(str(s), f"r{i}", str(o)))
        feats = rng.normal(size=(6, 8)) * 2
        boxes = np.full((6, 4), 0.3)
        kept = {}
        for th in (0.0, 0.1, 0.25, 0.5):
            lab = ground_triplets(trips, feats, boxes, table, th)
            assert all(c > th for c in lab.confidence)
            assert len(set(lab.query_index)) == len(lab.query_index)
            kept[th] = {(lab.graph.nodes[e.subject].concept, e.predicate, lab.graph.nodes[e.object].concept)
                        for e in lab.graph.edges}
        assert kept[0.5] <= kept[0.25] <= kept[0.1] <= kept[0.0]


class TestMerge:
    def test_union_dedup(self):
        table = basis_table(["man", "horse", "hat"])
        feats = np.diag([logit(0.9)] * 4)[:3]
        boxes = np.full((3, 4), 0.3)
        a = ground_triplets([CaptionTriplet("man", "riding", "horse")], feats, boxes, table)
        b = ground_triplets([CaptionTriplet("man", "riding", "horse"), CaptionTriplet("hat", "on", "man")],
                            feats, boxes, table)
        m = merge_pseudo_labels([a, b])
        assert [n.concept for n in m.graph.nodes] == ["man", "horse", "hat"]
        assert [(e.subject, e.object, e.predicate) for e in m.graph.edges] == [(0, 1, "riding"), (2, 0, "on")]
        assert len(m.provenance) == 2
