"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the toy segmenter and its losses need: elementwise math with
scalar broadcasting, same-padded 2-D convolution (channel-last), log-softmax,
inverted dropout, reductions, label gathering and a momentum SGD optimizer.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "relu",
    "clamp_min",
    "tsum",
    "mean",
    "conv2d",
    "log_softmax",
    "softmax",
    "dropout",
    "gather_last",
    "detach",
    "no_grad",
    "SGD",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Backward was called on something that cannot be differentiated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf with requires_grad.

        The recording is released afterwards; calling backward again on the
        same loss raises GraphError.
        """
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward()")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self._consumed = True


def _topological_order(root: Tensor) -> list:
    # iterative DFS; deep nets would overflow the recursion limit
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        if any(p._consumed for p in parents):
            raise GraphError(f"{op}: input belongs to a consumed graph")
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _binary_operands(a, b, op: str):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a nonpositive value; clamp first")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); the gradient is zero where the floor is active."""
    keep = a.data > lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": lambda a, b=None: exp(a),
    "log": lambda a, b=None: log(a),
    "relu": lambda a, b=None: relu(a),
    "scale": lambda a, b: scale(a, b),
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(_as_tensor(a), b)


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        shape = a.shape
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def detach(a: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(a.data)


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # xp: padded [N, H+kh-1, W+kw-1, C] -> [N*H*W, kh*kw*C], rows ordered (i, j, c)
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [N, H, W, C, kh, kw]
    h, w = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * c)


def conv2d(x: Tensor, k: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded stride-1 convolution.

    x is [H, W, Cin] or [N, H, W, Cin]; k is [kh, kw, Cin, Cout]; bias is [Cout].
    Zero padding keeps the spatial size.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: expected [N,]H,W,C input and 4-D kernel, got {x.shape} and {k.shape}")
    kh, kw, cin, cout = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {xd.shape[-1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    n, h, w, _ = xd.shape
    ph, pw = kh // 2, kw // 2
    if kh == 1 and kw == 1:
        cols = xd.reshape(n * h * w, cin)
    else:
        cols = _im2col(np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))), kh, kw)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout)
    if squeeze:
        out = out[0]

    def backward(g):
        gm = g.reshape(n * h * w, cout)
        # (gm.T @ cols).T is markedly faster than cols.T @ gm for tall matrices
        gk = (gm.T @ cols).T.reshape(k.shape) if k.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == 1 and kw == 1:
                gx = (gm @ kmat.T).reshape(n, h, w, cin)
            else:
                # input gradient of a same-padded conv is a same-padded conv of the
                # output gradient with the spatially flipped, channel-swapped kernel
                kflip = k.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                gpad = np.pad(g.reshape(n, h, w, cout), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
                gx = (_im2col(gpad, kh, kw) @ kflip).reshape(n, h, w, cin)
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    parents = (x, k) if bias is None else (x, k, bias)
    return _make(out, parents, backward, "conv2d")


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis with max-subtraction."""
    if x.shape[-1] < 2:
        raise ShapeError("log_softmax needs at least two classes")
    out = _log_softmax_np(x.data)
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def softmax(x: Tensor) -> Tensor:
    return exp(log_softmax(x))


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """out[...] = x[..., index[...]]."""
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {index.shape} != {x.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise ShapeError("gather_last: index out of range")
    idx = index[..., None].astype(np.intp)
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), backward, "gather_last")


class SGD:
    """SGD with heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [None] * len(self.params)

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise GraphError("sgd step: parameter has no gradient; call backward() first")
        for i, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity[i]
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[i] = v
                g = v
            p.data = p.data - lr * g
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
