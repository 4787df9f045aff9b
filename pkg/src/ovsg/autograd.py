"""Dense float64 tensors with reverse-mode differentiation.

Only what the heads and losses need: matmul, elementwise arithmetic with
numpy broadcasting, concatenation/indexing, a handful of nonlinearities and
reductions. Every op checks its output is finite so a blow-up is reported
at the op that produced it.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf", name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __pow__(self, p: float):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)


def _binary(a, b, op: str, fn):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from exc
    return a, b, _result(data, (a, b), op)


def add(a, b) -> Tensor:
    a, b, out = _binary(a, b, "add", np.add)
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))
        out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b, out = _binary(a, b, "sub", np.subtract)
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))
        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b, out = _binary(a, b, "mul", np.multiply)
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))
        out._backward = bw
    return out


def div(a, b) -> Tensor:
    a, b, out = _binary(a, b, "div", np.divide)
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = bw
    return out


def maximum(a, b) -> Tensor:
    a, b, out = _binary(a, b, "maximum", np.maximum)
    if out.requires_grad:
        def bw(g):
            pick_a = a.data >= b.data
            if a.requires_grad:
                a._accum(_unbroadcast(g * pick_a, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * ~pick_a, b.shape))
        out._backward = bw
    return out


def minimum(a, b) -> Tensor:
    a, b, out = _binary(a, b, "minimum", np.minimum)
    if out.requires_grad:
        def bw(g):
            pick_a = a.data <= b.data
            if a.requires_grad:
                a._accum(_unbroadcast(g * pick_a, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * ~pick_a, b.shape))
        out._backward = bw
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = _result(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        out._backward = bw
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.T, (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g.T)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g.reshape(a.shape))
    return out


def take(a, idx) -> Tensor:
    """Index/gather; repeated indices accumulate gradient."""
    a = as_tensor(a)
    out = _result(a.data[idx], (a,), "take")
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)
        out._backward = bw
    return out


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform") from exc
    out = _result(data, ts, "concat")
    if out.requires_grad:
        sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

        def bw(g):
            for t, part in zip(ts, np.split(g, sizes, axis=axis)):
                if t.requires_grad:
                    t._accum(part)
        out._backward = bw
    return out


def split(a, sizes: list[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to {a.shape[axis]}")
    bounds = np.cumsum([0] + list(sizes))
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * a.data.ndim
        index[axis] = slice(int(lo), int(hi))
        parts.append(take(a, tuple(index)))
    return parts


def _unary(a, op: str, fwd, deriv) -> Tensor:
    """deriv(x, y) gives dy/dx elementwise."""
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        y = fwd(a.data)
    out = _result(y, (a,), op)
    if out.requires_grad:
        out._backward = lambda g: a._accum(g * deriv(a.data, y))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Tensor:
    return _unary(a, "sigmoid", _sigmoid, lambda x, y: y * (1 - y))


def relu(a) -> Tensor:
    return _unary(a, "relu", lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(np.float64))


def exp(a) -> Tensor:
    return _unary(a, "exp", np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary(a, "log", np.log, lambda x, y: 1.0 / x)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    return _unary(a, "softplus", _softplus, lambda x, y: _sigmoid(x))


def absolute(a) -> Tensor:
    return _unary(a, "abs", np.abs, lambda x, y: np.sign(x))


def power(a, p: float) -> Tensor:
    return _unary(a, "pow", lambda x: np.power(x, p), lambda x, y: p * np.power(x, p - 1))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))
        out._backward = bw
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (a,), "softmax")
    if out.requires_grad:
        def bw(g):
            a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
        out._backward = bw
    return out


def l1_distance(a, b, axis: int = -1) -> Tensor:
    """Sum of absolute differences along ``axis``."""
    return tsum(absolute(sub(a, b)), axis=axis)


# parameters -----------------------------------------------------------------


class ParamStore:
    """Named float64 parameters with a fixed iteration order and trainable flags."""

    def __init__(self):
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already exists")
        self._values[name] = np.array(value, dtype=np.float64)
        self._trainable[name] = trainable

    def __contains__(self, name):
        return name in self._values

    def __getitem__(self, name) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name, value):
        if name not in self._values:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value.copy()

    def names(self) -> list[str]:
        return list(self._values)

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag

    def items(self):
        return self._values.items()

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass; frozen entries carry no gradient."""
        return {n: Tensor(v, requires_grad=self._trainable[n], name=n) for n, v in self._values.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self._values.items():
            out.add(n, v.copy(), self._trainable[n])
        return out

    def frozen_copy(self) -> "ParamStore":
        out = self.copy()
        for n in out.names():
            out.set_trainable(n, False)
        return out

    def num_trainable(self) -> int:
        return sum(v.size for n, v in self._values.items() if self._trainable[n])


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# evaluation helpers -----------------------------------------------------------


def forward(expr: Callable[[dict[str, Tensor]], Tensor], params: ParamStore) -> Tensor:
    """Evaluate ``expr`` on fresh tensors of ``params``."""
    return expr(params.tensors())


def backward(expr: Callable[[dict[str, Tensor]], Tensor], params: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradients of a scalar expression w.r.t. every trainable parameter."""
    ts = params.tensors()
    out = expr(ts)
    if out.data.size != 1:
        raise ShapeError("backward needs a scalar-valued expression")
    out.backward()
    grads = {}
    for name, t in ts.items():
        if params.trainable(name):
            grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(out.data), grads


def finite_diff_check(expr, params: ParamStore, epsilon: float = 1e-5,
                      scale: str = "entry") -> tuple[float, int]:
    """Compare analytic gradients against central differences.

    Returns ``(max_rel_error, n_checked)``. With ``scale="entry"`` the error
    per entry is ``|analytic - fd| / max(1e-8, |fd|)``. With
    ``scale="tensor"`` each parameter's worst absolute error is divided by
    ``max(1e-8, max |fd|)`` over that parameter, which keeps entries whose
    gradient sits below the difference quotient's roundoff from dominating.
    Frozen parameters are skipped.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if scale not in ("entry", "tensor"):
        raise ValueError(f"unknown error scale {scale!r}")
    _, grads = backward(expr, params)
    worst = 0.0
    count = 0
    for name, g in grads.items():
        base = params[name].copy()
        flat = base.reshape(-1)
        fds = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            params[name] = flat.reshape(base.shape)
            f_plus = float(forward(expr, params).data)
            flat[k] = orig - epsilon
            params[name] = flat.reshape(base.shape)
            f_minus = float(forward(expr, params).data)
            flat[k] = orig
            fds[k] = (f_plus - f_minus) / (2 * epsilon)
            count += 1
        params[name] = base
        diff = np.abs(g.reshape(-1) - fds)
        if scale == "entry":
            errs = diff / np.maximum(1e-8, np.abs(fds))
        else:
            errs = diff / max(1e-8, float(np.max(np.abs(fds), initial=0.0)))
        worst = max(worst, float(np.max(errs, initial=0.0)))
    return worst, count


class SGD:
    """Mini-batch gradient descent with optional momentum; frozen entries untouched."""

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.0, clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            scale = self.clip_norm / total
        for name, g in grads.items():
            if not self.params.trainable(name):
                continue
            g = g * scale
            if self.momentum:
                v = self._velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self._velocity[name] = v
                g = v
            self.params[name] = self.params[name] - self.lr * g
        return total


class Adam(SGD):
    """Adaptive-moment gradient descent, with the same clipping and freezing rules as ``SGD``."""

    def __init__(self, params: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, clip_norm: Optional[float] = None):
        super().__init__(params, lr, 0.0, clip_norm)
        self.betas = betas
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, grads: dict[str, np.ndarray]) -> float:
        total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            scale = self.clip_norm / total
        self._t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            if not self.params.trainable(name):
                continue
            g = g * scale
            m = b1 * self._m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self._v.get(name, 0.0) + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1 ** self._t)
            v_hat = v / (1 - b2 ** self._t)
            self.params[name] = self.params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return total


# checkpoint ------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParamStore, directory, metadata: Optional[dict] = None) -> Path:
    """Write manifest.json plus a little-endian float64 blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, value in params.items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "trainable": params.trainable(name)})
        offset += len(raw)
        chunks.append(raw)
    (directory / "params.bin").write_bytes(b"".join(chunks))
    manifest = {"format": "ovsg-checkpoint/1", "blob": "params.bin", "tensors": entries, "metadata": metadata or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory) -> tuple[ParamStore, dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing manifest.json in {directory}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest.json in {directory}: {exc}") from exc
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise CheckpointError("manifest has no 'tensors' list")
    blob_path = directory / manifest.get("blob", "params.bin")
    if not blob_path.exists():
        raise CheckpointError(f"missing blob {blob_path.name}")
    blob = blob_path.read_bytes()
    expected = 0
    store = ParamStore()
    for e in manifest["tensors"]:
        try:
            shape = tuple(int(s) for s in e["shape"])
            offset = int(e["offset"])
            name = e["name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"bad manifest entry {e!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"tensor {name} overruns blob ({end} > {len(blob)} bytes)")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        store.add(name, arr, bool(e.get("trainable", True)))
        expected += 8 * count
    if expected != len(blob):
        raise CheckpointError(f"shape products cover {expected} bytes but blob has {len(blob)}")
    return store, manifest.get("metadata", {})
