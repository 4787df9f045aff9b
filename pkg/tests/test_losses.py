import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovsg import autograd as ag
from ovsg.autograd import Tensor, finite_diff_check
from ovsg.concepts import embed_concepts
from ovsg.features import FeatureMap
from ovsg.losses import (LossComponents, SampleSets, TrainConfig, bce_from_logits, box_losses,
                         build_sample_sets, distill_loss, focal_loss, relation_bce, total_loss)
from ovsg.model import ModelConfig, init_params
from ovsg.train import Teacher, Vocab, image_losses
from ovsg.types import BBox, Edge, Node, SceneGraph


def bce_oracle(x, t):
    p = 1 / (1 + np.exp(-x))
    return -(t * np.log(p) + (1 - t) * np.log(1 - p))


class TestFocal:
    def test_closed_form(self):
        assert focal_loss(Tensor(0.0), 1.0).item() == pytest.approx(0.25 * 0.5**2 * np.log(2), abs=1e-15)
        assert focal_loss(Tensor(0.0), 1.0).item() == pytest.approx(0.04332, abs=1e-5)

    def test_confident_positive_vanishes(self):
        assert focal_loss(Tensor(40.0), 1.0).item() < 1e-30

    def test_reduces_to_bce_on_positives(self):
        x = np.random.default_rng(0).normal(size=20) * 3
        got = focal_loss(Tensor(x), np.ones(20), alpha=1.0, gamma=0.0, reduction="none").data
        assert np.max(np.abs(got - bce_oracle(x, 1.0))) <= 1e-12

    def test_balanced_alpha_is_half_bce(self):
        rng = np.random.default_rng(1)
        x, t = rng.normal(size=30) * 3, (rng.random(30) < 0.5).astype(float)
        got = focal_loss(Tensor(x), t, alpha=0.5, gamma=0.0, reduction="none").data
        assert np.max(np.abs(got - 0.5 * bce_oracle(x, t))) <= 1e-12

    def test_reductions(self):
        x, t = np.array([0.3, -1.0]), np.array([1.0, 0.0])
        per = focal_loss(Tensor(x), t, reduction="none").data
        assert focal_loss(Tensor(x), t).item() == pytest.approx(per.sum())
        assert focal_loss(Tensor(x), t, reduction="mean").item() == pytest.approx(per.mean())


class TestBoxLosses:
    def test_identical(self):
        b = np.array([0.4, 0.5, 0.2, 0.3])
        l1, gi = box_losses(Tensor(b), b)
        assert l1.item() == 0.0 and gi.item() == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_giou_term(self):
        a = BBox.from_corners(0, 0, 1 / 3, 1 / 3).as_array()
        b = BBox.from_corners(2 / 3, 2 / 3, 1, 1).as_array()
        _, gi = box_losses(Tensor(a), b)
        assert gi.item() == pytest.approx(1 + 7 / 9, abs=1e-12)

    def test_hand_l1(self):
        l1, _ = box_losses(Tensor([0.5, 0.5, 0.2, 0.2]), np.array([0.4, 0.7, 0.3, 0.1]))
        assert l1.item() == pytest.approx(0.1 + 0.2 + 0.1 + 0.1, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ag.ShapeError):
            box_losses(Tensor(np.full((2, 4), 0.5)), np.full((3, 4), 0.5))


def _sets(pos, neg, n_pairs=1):
    return SampleSets(np.zeros((n_pairs, 2)), pos, neg, [])


class TestRelationBce:
    def test_one_positive(self):
        assert relation_bce(Tensor([[0.0]]), _sets([(0, 0)], [])).item() == pytest.approx(np.log(2), abs=1e-15)

    def test_positive_and_negative(self):
        s = _sets([(0, 0)], [(0, 1)])
        assert relation_bce(Tensor([[0.0, 0.0]]), s).item() == pytest.approx(np.log(2), abs=1e-15)

    def test_limits(self):
        s = _sets([(0, 0)], [(0, 1)])
        assert relation_bce(Tensor([[50.0, -50.0]]), s).item() < 1e-20

    def test_empty(self):
        with pytest.raises(ValueError):
            relation_bce(Tensor([[0.0]]), _sets([], []))

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            _sets([(0, 0)], [(0, 0)])

    def test_matches_mean_bce(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        s = _sets([(0, 1), (2, 3)], [(0, 0), (1, 2), (2, 0)], 3)
        ref = np.mean([bce_oracle(x[0, 1], 1), bce_oracle(x[2, 3], 1), bce_oracle(x[0, 0], 0),
                       bce_oracle(x[1, 2], 0), bce_oracle(x[2, 0], 0)])
        assert relation_bce(Tensor(x), s).item() == pytest.approx(ref, abs=1e-14)
        assert bce_from_logits(Tensor([0.0]), [1.0]).item() == pytest.approx(np.log(2))

    @settings(max_examples=100)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 5.0))
    def test_monotonicity(self, seed, delta):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3))
        s = _sets([(0, 0), (1, 2)], [(0, 1), (1, 0)], 2)
        base = relation_bce(Tensor(x), s).item()
        up_pos, up_neg = x.copy(), x.copy()
        up_pos[1, 2] += delta
        up_neg[0, 1] += delta
        assert relation_bce(Tensor(up_pos), s).item() < base < relation_bce(Tensor(up_neg), s).item()


class TestDistill:
    def test_equal(self):
        e = np.random.default_rng(0).normal(size=(3, 5))
        assert distill_loss(Tensor(e), e).item() == 0.0

    def test_hand_l1(self):
        assert distill_loss(Tensor([[0.5, -0.5]]), np.zeros((1, 2))).item() == pytest.approx(1.0)

    def test_duplicate_edges_keep_mean(self):
        rng = np.random.default_rng(1)
        s, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        a = distill_loss(Tensor(s), t).item()
        b = distill_loss(Tensor(np.vstack([s, s])), np.vstack([t, t])).item()
        assert a == pytest.approx(b, abs=1e-15)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            distill_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 3)))

    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(3, 4))
        t = s.copy()
        t[rng.integers(3), rng.integers(4)] += rng.choice([-1, 1]) * rng.uniform(1e-6, 1)
        assert distill_loss(Tensor(s), t).item() > 0
        assert distill_loss(Tensor(s), s).item() == 0


class TestSampleSets:
    def _graph(self):
        box = BBox(0.5, 0.5, 0.2, 0.2)
        nodes = tuple(Node(box, n) for n in ("man", "horse", "hat"))
        return SceneGraph(nodes, (Edge(0, 1, "riding"), Edge(2, 0, "on"), Edge(0, 1, "near")), "g")

    def test_structure(self):
        rels = ["on", "riding", "near", "under"]
        s = build_sample_sets(self._graph(), [4, 1, 7], rels, np.random.default_rng(0), neg_ratio=8)
        pairs = [tuple(p) for p in s.pairs.tolist()]
        assert pairs[:2] == [(4, 1), (7, 4)]
        assert {(pairs[k], rels[r]) for k, r in s.pos.tolist()} == {((4, 1), "riding"), ((4, 1), "near"),
                                                                    ((7, 4), "on")}
        assert set(pairs[k] for k in s.background) == {(1, 4), (4, 7), (1, 7), (7, 1)}
        pos, neg = set(map(tuple, s.pos.tolist())), set(map(tuple, s.neg.tolist()))
        assert not pos & neg
        for k in s.background:
            assert {(k, r) for r in range(4)} <= neg
        assert s.targets(4).sum() == 3

    def test_negative_cap(self):
        rels = [f"r{i}" for i in range(30)]
        g = SceneGraph(self._graph().nodes, (Edge(0, 1, "r0"),), "g")
        s = build_sample_sets(g, [0, 1], rels, np.random.default_rng(0), neg_ratio=8)
        on_labelled = [(k, r) for k, r in s.neg.tolist() if k == 0]
        assert len(on_labelled) == 8
        assert len(s.background) == 1 and len(s.neg) == 8 + 30

    def test_seeded(self):
        rels = [f"r{i}" for i in range(30)]
        g = SceneGraph(self._graph().nodes, (Edge(0, 1, "r0"),), "g")
        a = build_sample_sets(g, [0, 1], rels, np.random.default_rng(5), 2)
        b = build_sample_sets(g, [0, 1], rels, np.random.default_rng(5), 2)
        assert np.array_equal(a.neg, b.neg)


class TestTotal:
    def test_zero(self):
        total, parts = total_loss(LossComponents(), TrainConfig())
        assert total.item() == 0.0 and parts["total"] == 0.0

    def test_lambda_affine(self):
        c = LossComponents(Tensor(0.3), Tensor(0.2), Tensor(0.1), Tensor(0.7), Tensor(1.3))
        base = total_loss(c, TrainConfig(lam=0.0))[0].item()
        for lam in (0.0, 0.1, 0.3, 0.5):
            total, parts = total_loss(c, TrainConfig(lam=lam))
            assert total.item() == pytest.approx(base + lam * 1.3, abs=1e-14)
            assert parts["distill"] == pytest.approx(1.3)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=-0.1)

    def test_non_finite_component(self):
        with pytest.raises(ag.NonFiniteError):
            total_loss(LossComponents(rel_bce=Tensor(np.inf)), TrainConfig())


def toy_setup(seed: int):
    """Tiny model and a 3-node scene so the full gradient check stays cheap."""
    cfg = ModelConfig(K=4, d=8, d_e=6, d_h=5, d_ff=6, text_dim=8, feat_dim=6, pos_dim=4)
    rng = np.random.default_rng(seed)
    fm = FeatureMap(rng.normal(size=(6, 6)), rng.normal(size=(6, 4)))
    objs, rels = embed_concepts(["man", "horse", "hat"], dim=8), embed_concepts(["on", "riding", "near"], dim=8)
    vocab = Vocab.build(objs, rels, ["man", "horse", "hat"], ["on", "riding", "near"])
    nodes = tuple(Node(BBox(*rng.uniform([0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.4, 0.4])), n)
                  for n in ("man", "horse", "hat"))
    graph = SceneGraph(nodes, (Edge(0, 1, "riding"), Edge(2, 0, "on")), "toy")
    return cfg, fm, vocab, graph


class TestTotalGradient:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_graph_fd(self, seed):
        cfg, fm, vocab, graph = toy_setup(seed)
        params = init_params(cfg, seed)
        teacher_params = init_params(cfg, seed + 100)
        teacher = Teacher(teacher_params, cfg, vocab.obj_matrix)
        tcfg = TrainConfig(lam=0.5)

        def expr(P):
            comps = image_losses(fm, graph, P, cfg, tcfg, vocab, np.random.default_rng(0), teacher, "toy")
            return total_loss(comps, tcfg)[0]

        err, n = finite_diff_check(expr, params)
        assert n == params.num_trainable()
        assert err < 1e-4

    def test_lambda_zero_ignores_teacher(self):
        cfg, fm, vocab, graph = toy_setup(0)
        P = init_params(cfg, 0).tensors()
        tcfg = TrainConfig(lam=0.0)
        values = []
        for tseed in (1, 2):
            teacher = Teacher(init_params(cfg, tseed), cfg, vocab.obj_matrix)
            comps = image_losses(fm, graph, P, cfg, tcfg, vocab, np.random.default_rng(0), teacher, "toy")
            values.append(total_loss(comps, tcfg)[0].item())
        assert values[0] == values[1]

    def test_unknown_concept(self):
        cfg, fm, vocab, graph = toy_setup(0)
        bad = SceneGraph((Node(BBox(0.5, 0.5, 0.1, 0.1), "zebra"),), (), "x")
        with pytest.raises(KeyError):
            image_losses(fm, bad, init_params(cfg).tensors(), cfg, TrainConfig(), vocab, np.random.default_rng(0))
