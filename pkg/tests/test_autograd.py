import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovsg import autograd as ag
from ovsg.autograd import (Adam, CheckpointError, NonFiniteError, ParamStore, SGD, ShapeError, Tensor,
                           backward, finite_diff_check, forward, load_checkpoint, save_checkpoint)
from ovsg.losses import focal_loss


def mlp_store(seed: int, d_in=5, d_h=7, d_out=3) -> ParamStore:
    rng = np.random.default_rng(seed)
    p = ParamStore()
    p.add("W1", rng.normal(size=(d_in, d_h)))
    p.add("b1", rng.normal(size=d_h))
    p.add("W2", rng.normal(size=(d_h, d_out)))
    p.add("b2", rng.normal(size=d_out))
    return p


def mlp(x):
    return lambda P: ag.relu(Tensor(x) @ P["W1"] + P["b1"]) @ P["W2"] + P["b2"]


class TestForward:
    def test_scalar_matmul(self):
        assert (Tensor([[2.0]]) @ Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_sigmoid_zero(self):
        assert ag.sigmoid(Tensor(0.0)).item() == 0.5

    def test_mlp_matches_straight_line(self):
        p = mlp_store(0)
        x = np.random.default_rng(1).normal(size=(4, 5))
        out = forward(mlp(x), p).data
        h = x @ p["W1"] + p["b1"]
        h = np.where(h > 0, h, 0.0)
        ref = h @ p["W2"] + p["b2"]
        assert np.max(np.abs(out - ref)) <= 1e-12

    def test_supported_ops(self):
        a = Tensor(np.array([[1.0, -2.0, 3.0]]))
        b = Tensor(np.array([[0.5, 0.5, 0.5]]))
        np.testing.assert_allclose(ag.concat([a, b], axis=1).data, [[1, -2, 3, 0.5, 0.5, 0.5]])
        left, right = ag.split(a, [1, 2], axis=1)
        assert left.data.tolist() == [[1.0]] and right.data.tolist() == [[-2.0, 3.0]]
        assert ag.mean(a).item() == pytest.approx(2 / 3)
        assert ag.tsum(a * b).item() == pytest.approx(1.0)
        assert ag.l1_distance(a, b).data.tolist() == [0.5 + 2.5 + 2.5]
        assert ag.log(Tensor(np.e)).item() == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_non_finite_reports_op(self):
        with pytest.raises(NonFiniteError, match="log"):
            ag.log(Tensor(0.0))

    def test_bit_reproducible(self):
        x = np.random.default_rng(2).normal(size=(6, 5))
        a = forward(mlp(x), mlp_store(3)).data
        b = forward(mlp(x), mlp_store(3)).data
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_sigmoid_derivative(self):
        x = Tensor(0.0, requires_grad=True)
        ag.sigmoid(x).backward()
        assert x.grad == pytest.approx(0.25, abs=1e-15)

    def test_linearity_of_sum(self):
        c = np.arange(6.0).reshape(2, 3)
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        ag.tsum(x * c).backward()
        np.testing.assert_array_equal(x.grad, c)

    def test_broadcast_scalar_grad(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        s = Tensor(2.0, requires_grad=True)
        ag.tsum(x * s).backward()
        assert s.grad == pytest.approx(6.0)

    def test_gradient_shapes_and_frozen(self):
        p = mlp_store(0)
        p.set_trainable("b2", False)
        x = np.random.default_rng(1).normal(size=(4, 5))
        _, grads = backward(lambda P: ag.tsum(mlp(x)(P)), p)
        assert set(grads) == {"W1", "b1", "W2"}
        for n, g in grads.items():
            assert g.shape == p[n].shape

    def test_mlp_focal_composite_fd(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 5))
        t = (rng.random((4, 3)) < 0.3).astype(float)
        err, n = finite_diff_check(lambda P: focal_loss(mlp(x)(P), t), mlp_store(5))
        assert n == 5 * 7 + 7 + 7 * 3 + 3
        assert err < 1e-4

    def test_subgraph_linearity(self):
        # gradient of f(a) + g(b) equals the separate gradients concatenated
        rng = np.random.default_rng(6)
        p = ParamStore()
        p.add("a", rng.normal(size=3))
        p.add("b", rng.normal(size=(2, 2)))

        def f(P):
            return ag.tsum(ag.sigmoid(P["a"]) * 3.0)

        def g(P):
            return ag.tsum(ag.power(P["b"], 2))

        _, both = backward(lambda P: f(P) + g(P), p)
        _, ga = backward(f, p)
        _, gb = backward(g, p)
        np.testing.assert_allclose(np.concatenate([both["a"], both["b"].ravel()]),
                                   np.concatenate([ga["a"], gb["b"].ravel()]), rtol=0, atol=1e-15)


class TestFiniteDiff:
    def test_quadratic(self):
        p = ParamStore()
        p.add("x", 3.0)
        err, n = finite_diff_check(lambda P: P["x"] * P["x"], p, 1e-5)
        assert n == 1 and err < 1e-8

    def test_frozen_skipped(self):
        p = ParamStore()
        p.add("x", [1.0, 2.0])
        p.add("c", [3.0, 4.0], trainable=False)
        err, n = finite_diff_check(lambda P: ag.tsum(P["x"] * P["c"]), p)
        assert n == 2 and err < 1e-8

    @pytest.mark.parametrize("eps", [0.0, -1e-5])
    def test_bad_epsilon(self, eps):
        p = ParamStore()
        p.add("x", 1.0)
        with pytest.raises(ValueError):
            finite_diff_check(lambda P: P["x"], p, eps)

    def test_unknown_scale(self):
        p = ParamStore()
        p.add("x", 1.0)
        with pytest.raises(ValueError):
            finite_diff_check(lambda P: P["x"], p, scale="global")

    def test_tensor_scale_ignores_roundoff_on_tiny_entries(self):
        # the second entry's derivative is ~1e-12, far below the difference quotient's noise
        p = ParamStore()
        p.add("x", np.array([1.0, -30.0]))
        expr = lambda P: ag.tsum(ag.sigmoid(P["x"]))
        entry, _ = finite_diff_check(expr, p)
        tensor, n = finite_diff_check(expr, p, scale="tensor")
        assert n == 2
        assert tensor < 1e-8
        assert entry > tensor

    def test_params_restored(self):
        p = mlp_store(0)
        before = {n: v.copy() for n, v in p.items()}
        x = np.ones((2, 5))
        finite_diff_check(lambda P: ag.tsum(mlp(x)(P)), p)
        for n, v in p.items():
            assert np.array_equal(v, before[n])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_elementwise_chain(self, seed):
        rng = np.random.default_rng(seed)
        p = ParamStore()
        p.add("u", rng.uniform(0.5, 2.0, size=4))
        p.add("v", rng.normal(size=4))

        def expr(P):
            z = ag.exp(P["v"] * 0.3) / P["u"] + ag.softplus(P["v"]) - ag.log(P["u"] + 1.0)
            return ag.mean(ag.maximum(z, ag.minimum(P["u"], 1.0)) * ag.sigmoid(P["v"]))

        err, _ = finite_diff_check(expr, p, 1e-6)
        assert err < 1e-4


class TestParamStoreAndOptimizers:
    def test_unique_names(self):
        p = ParamStore()
        p.add("a", 1.0)
        with pytest.raises(KeyError):
            p.add("a", 2.0)

    def test_deterministic_order(self):
        assert mlp_store(0).names() == ["W1", "b1", "W2", "b2"]

    @pytest.mark.parametrize("opt_cls", [SGD, Adam])
    def test_frozen_never_updated(self, opt_cls):
        p = mlp_store(0)
        p.set_trainable("W2", False)
        frozen = p["W2"].copy()
        x = np.ones((3, 5))
        opt = opt_cls(p, 0.1) if opt_cls is Adam else opt_cls(p, 0.1, 0.9)
        for _ in range(3):
            _, grads = backward(lambda P: ag.tsum(mlp(x)(P)), p)
            grads["W2"] = np.ones_like(frozen)
            opt.step(grads)
        assert np.array_equal(p["W2"], frozen)

    @pytest.mark.parametrize("opt_cls,lr", [(SGD, 0.1), (Adam, 0.1)])
    def test_quadratic_descent(self, opt_cls, lr):
        p = ParamStore()
        p.add("x", [3.0, -2.0])
        opt = opt_cls(p, lr)
        for _ in range(300):
            _, g = backward(lambda P: ag.tsum(P["x"] * P["x"]), p)
            opt.step(g)
        assert np.max(np.abs(p["x"])) < 1e-2

    def test_clipping(self):
        p = ParamStore()
        p.add("x", [0.0, 0.0])
        norm = SGD(p, 1.0, clip_norm=1.0).step({"x": np.array([3.0, 4.0])})
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(p["x"], [-0.6, -0.8])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = mlp_store(0)
        p.set_trainable("b1", False)
        save_checkpoint(p, tmp_path / "ck", {"stage": "x"})
        q, meta = load_checkpoint(tmp_path / "ck")
        assert meta == {"stage": "x"}
        assert q.names() == p.names()
        for n, v in p.items():
            assert np.array_equal(q[n], v) and q.trainable(n) == p.trainable(n)

    def test_truncated_blob(self, tmp_path):
        save_checkpoint(mlp_store(0), tmp_path / "ck")
        blob = tmp_path / "ck" / "params.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_corrupt_manifest(self, tmp_path):
        save_checkpoint(mlp_store(0), tmp_path / "ck")
        (tmp_path / "ck" / "manifest.json").write_text("{not json")
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "ck")

    def test_little_endian_layout(self, tmp_path):
        p = ParamStore()
        p.add("a", [1.5, -2.0])
        save_checkpoint(p, tmp_path / "ck")
        assert (tmp_path / "ck" / "params.bin").read_bytes() == np.array([1.5, -2.0], dtype="<f8").tobytes()
        entry = json.loads((tmp_path / "ck" / "manifest.json").read_text())["tensors"][0]
        assert entry == {"name": "a", "shape": [2], "offset": 0, "trainable": True}
