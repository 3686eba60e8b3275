"""Dense float64 tensors with reverse-mode differentiation.

The tape is built implicitly: every op on a :class:`Tensor` that requires
grad records its parents and a backward rule. Backward rules are written in
terms of Tensor ops themselves, so running :func:`grad` with
``create_graph=True`` produces gradients that are differentiable again.
That is what the exact (second-order) bi-level mode relies on.

Model code passes parameters around as a :class:`ParamTree` of plain
ndarrays; :func:`evaluate`, :func:`gradient` and :func:`value_and_grad`
lift a tree into Tensors, call a pure function and hand back arrays.
"""
from __future__ import annotations

import contextlib
import io
import threading
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


class NonScalarError(ValueError):
    """Raised when gradient() is asked to differentiate a non-scalar output."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def grad_mode(enabled: bool) -> Iterator[None]:
    prev = grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operators ------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _reduce_axes(src: tuple, dst: tuple) -> tuple[tuple, bool]:
    lead = len(src) - len(dst)
    axes = list(range(lead))
    for i, d in enumerate(dst):
        if d == 1 and src[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes), lead > 0


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    axes, _ = _reduce_axes(a.shape, shape)
    data = a.data.sum(axis=axes).reshape(shape)
    src = a.shape
    return _node(data, (a,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    return _node(data, (a,), lambda g: (sum_to(g, src),), "broadcast_to")


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)

    def backward(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), backward, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.exp(a.data), (a,), lambda g: (mul(g, exp(a)),), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = a.data > 0
    _kink_hook(a.data)
    m = Tensor(mask.astype(np.float64))
    return _node(a.data * mask, (a,), lambda g: (mul(g, m),), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _node(_sigmoid_np(a.data), (a,), backward, "sigmoid")


# ---------------------------------------------------------------------------
# reductions, shape ops, indexing
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % len(src) for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(src))
            g = reshape(g, kshape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src))
        return (broadcast_to(g, src),)

    return _node(data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from exc
    return _node(data, (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(a.data[idx], (a,), lambda g: (scatter(g, idx, src),), "getitem")


def scatter(g, idx, shape: tuple) -> Tensor:
    """Adjoint of ``getitem``: zeros of ``shape`` with ``g`` added at ``idx``."""
    g = as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, idx, g.data)
    return _node(data, (g,), lambda h: (getitem(h, idx),), "scatter")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]} along axis {axis}")
    data = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _node(data, tuple(ts), backward, "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (sum_to(matmul(g, swap_last(b)), a.shape),
                sum_to(matmul(swap_last(a), g), b.shape))

    return _node(data, (a, b), backward, "matmul")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        p = exp(log_softmax(a, axis))
        return (sub(g, mul(p, tsum(g, axis=axis, keepdims=True))),)

    return _node(data, (a,), backward, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_cross_entropy(logits, target, axis: int = -1) -> Tensor:
    """Per-row cross-entropy ``-sum(target * log_softmax(logits))``."""
    logits, target = as_tensor(logits), as_tensor(target)
    if logits.shape != target.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs target {target.shape}")
    return neg(tsum(mul(target, log_softmax(logits, axis)), axis=axis))


def global_avg_pool(a) -> Tensor:
    """Mean over the two trailing spatial axes of ``[..., h, w]``."""
    return mean(a, axis=(-2, -1))


# ---------------------------------------------------------------------------
# convolution and pooling (first-order only)
# ---------------------------------------------------------------------------

def _first_order_only(op):
    if grad_enabled():
        raise NotImplementedError(f"{op}: second-order differentiation is not supported")


def conv2d(x, w, b=None, pad: int = 1) -> Tensor:
    """Stride-1 convolution; ``x`` is [B, C, H, W], ``w`` is [O, C, k, k]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    cols = kernels.im2col(x.data, k, pad)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def backward(g):
        _first_order_only("conv2d")
        gm = g.data.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = Tensor((gm.T @ cols).reshape(w.shape))
        gx = Tensor(kernels.col2im(gm @ wm, x.shape, k, pad)) if x.requires_grad else None
        grads = (gx, gw)
        if b is not None:
            grads = grads + (Tensor(gm.sum(axis=0)),)
        return grads

    return _node(np.ascontiguousarray(out), parents, backward, "conv2d")


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2: expected 4-D input, got {x.shape}")
    out, arg = kernels.maxpool2x2(x.data)
    src = x.shape

    def backward(g):
        _first_order_only("maxpool2x2")
        return (Tensor(kernels.maxpool2x2_backward(g.data, arg, src)),)

    return _node(out, (x,), backward, "maxpool2x2")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: list[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.size != 1:
        raise NonScalarError(f"grad: output must be scalar, got shape {output.shape}")
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = Tensor(np.ones(output.shape))
        with grad_mode(create_graph):
            for node in reversed(_toposort(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for p, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    return [grads.get(id(t), Tensor(np.zeros(t.shape))) for t in wrt]


# ---------------------------------------------------------------------------
# parameter trees
# ---------------------------------------------------------------------------

class ParamTree(Mapping):
    """Ordered, immutable mapping from leaf name to float64 array."""

    def __init__(self, leaves: Mapping | Iterable = ()):
        items = leaves.items() if isinstance(leaves, Mapping) else leaves
        self._leaves: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            arr = np.array(value, dtype=np.float64, copy=True)
            arr.flags.writeable = False
            self._leaves[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._leaves[name]

    def __iter__(self):
        return iter(self._leaves)

    def __len__(self) -> int:
        return len(self._leaves)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._leaves.items())
        return f"ParamTree({inner})"

    def _check(self, other: "ParamTree") -> None:
        if list(self) != list(other) or any(self[k].shape != other[k].shape for k in self):
            raise ShapeError("ParamTree: structures differ")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamTree":
        return ParamTree((k, fn(v)) for k, v in self._leaves.items())

    def zip_map(self, other: "ParamTree", fn) -> "ParamTree":
        self._check(other)
        return ParamTree((k, fn(v, other[k])) for k, v in self._leaves.items())

    def __add__(self, other):
        if isinstance(other, ParamTree):
            return self.zip_map(other, np.add)
        return self.map(lambda v: v + other)

    def __sub__(self, other):
        if isinstance(other, ParamTree):
            return self.zip_map(other, np.subtract)
        return self.map(lambda v: v - other)

    def __mul__(self, scalar):
        return self.map(lambda v: v * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self.map(lambda v: v / scalar)

    def __neg__(self):
        return self.map(np.negative)

    def dot(self, other: "ParamTree") -> float:
        self._check(other)
        return float(sum(np.vdot(v, other[k]) for k, v in self._leaves.items()))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def max_abs_diff(self, other: "ParamTree") -> float:
        self._check(other)
        return max((float(np.max(np.abs(v - other[k]))) if v.size else 0.0)
                   for k, v in self._leaves.items())

    def bit_equal(self, other: "ParamTree") -> bool:
        return (list(self) == list(other)
                and all(v.shape == other[k].shape and v.tobytes() == other[k].tobytes()
                        for k, v in self._leaves.items()))

    def subtree(self, prefix: str) -> "ParamTree":
        return ParamTree((k, v) for k, v in self._leaves.items() if k.startswith(prefix))

    def merge(self, other: "ParamTree") -> "ParamTree":
        return ParamTree(list(self._leaves.items()) + list(other.items()))

    def zeros_like(self) -> "ParamTree":
        return self.map(np.zeros_like)

    def to_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self._leaves.items()}

    # -- checkpoint format ----------------------------------------------
    # Text header, then raw little-endian float64 payloads in leaf order:
    #   CZSLPARAMS 1
    #   <n_leaves>
    #   <name> <ndim> <dim_0> ... <dim_k>     (one line per leaf)
    #   <binary payload>
    def to_bytes(self) -> bytes:
        head = [f"CZSLPARAMS 1\n{len(self)}\n"]
        for k, v in self._leaves.items():
            if any(c.isspace() for c in k):
                raise ValueError(f"leaf name {k!r} contains whitespace")
            head.append(" ".join([k, str(v.ndim)] + [str(s) for s in v.shape]) + "\n")
        body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self._leaves.values())
        return "".join(head).encode("ascii") + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamTree":
        buf = io.BytesIO(raw)
        magic = buf.readline().decode("ascii").split()
        if magic != ["CZSLPARAMS", "1"]:
            raise ValueError("not a parameter checkpoint")
        n = int(buf.readline())
        specs = []
        for _ in range(n):
            parts = buf.readline().decode("ascii").split()
            ndim = int(parts[1])
            specs.append((parts[0], tuple(int(s) for s in parts[2:2 + ndim])))
        leaves = []
        for name, shape in specs:
            count = int(np.prod(shape)) if shape else 1
            data = buf.read(8 * count)
            if len(data) != 8 * count:
                raise ValueError(f"truncated payload for leaf {name!r}")
            leaves.append((name, np.frombuffer(data, dtype="<f8").reshape(shape)))
        if buf.read(1):
            raise ValueError("trailing bytes after last leaf")
        return cls(leaves)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamTree":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# function-level API
# ---------------------------------------------------------------------------

TapeFunction = Callable[..., Tensor]


def evaluate(f: TapeFunction, params: ParamTree, *inputs) -> np.ndarray:
    with no_grad():
        out = f(params.to_tensors(), *inputs)
    return np.array(as_tensor(out).data, copy=True)


def value_and_grad(f: TapeFunction, params: ParamTree, *inputs) -> tuple[float, ParamTree]:
    leaves = params.to_tensors(requires_grad=True)
    with grad_mode(True):
        out = as_tensor(f(leaves, *inputs))
    if out.size != 1:
        raise NonScalarError(f"gradient: function output must be scalar, got shape {out.shape}")
    names = list(leaves)
    gs = grad(out, [leaves[k] for k in names])
    return out.item(), ParamTree((k, g.data) for k, g in zip(names, gs))


def gradient(f: TapeFunction, params: ParamTree, *inputs) -> ParamTree:
    return value_and_grad(f, params, *inputs)[1]


# kink tracking for finite_diff_check: records every ReLU pre-activation
_kink_log: list | None = None


def _kink_hook(x: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.array(x, copy=True))


def _eval_logged(f, params, inputs):
    global _kink_log
    _kink_log = []
    try:
        val = float(evaluate(f, params, *inputs).reshape(-1)[0])
        return val, _kink_log
    finally:
        _kink_log = None


def finite_diff_check(f: TapeFunction, params: ParamTree, *inputs, step: float = 1e-5,
                      floor: float = 1e-6, return_details: bool = False):
    """Worst relative error between :func:`gradient` and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    A coordinate is skipped when some ReLU pre-activation within
    ``10 * step`` of zero moves under its perturbation, or any ReLU mask
    flips: the function is not differentiable there.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = gradient(f, params, *inputs)
    _, base = _eval_logged(f, params, inputs)
    near = [np.abs(b) < 10 * step for b in base]
    worst = 0.0
    skipped = 0
    numeric = {}
    for name in params:
        leaf = params[name]
        num = np.zeros_like(leaf)
        for i in range(leaf.size):
            vals, kink = [], False
            for sgn in (1.0, -1.0):
                bumped = leaf.copy().reshape(-1)
                bumped[i] += sgn * step
                tree = ParamTree((k, bumped.reshape(leaf.shape) if k == name else v) for k, v in params.items())
                val, log_ = _eval_logged(f, tree, inputs)
                vals.append(val)
                for b, nb, pb in zip(base, near, log_):
                    if b.shape != pb.shape:
                        kink = True
                        break
                    if np.any((pb > 0) != (b > 0)) or np.any(nb & (pb != b)):
                        kink = True
                        break
            g = (vals[0] - vals[1]) / (2 * step)
            num.reshape(-1)[i] = g
            if kink:
                skipped += 1
                continue
            a = analytic[name].reshape(-1)[i]
            err = abs(a - g) / max(abs(a), abs(g), floor)
            worst = max(worst, err)
        numeric[name] = num
    if return_details:
        return worst, {"numeric": ParamTree(numeric), "analytic": analytic, "skipped": skipped}
    return worst
