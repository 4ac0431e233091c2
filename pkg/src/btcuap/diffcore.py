"""Small reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an immutable ``float32`` (or ``float64``) array. Every
op that touches a tensor with ``requires_grad`` records a node pointing at its
inputs and a vector-Jacobian closure; :func:`backward` walks those nodes in
reverse topological order. Only the primitives needed by the feature
extractor, the BTC losses and the classifier head are provided.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

NORM_FLOOR = 1e-12
MAX_RANK = 4


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _vjp=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, op=op)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar."""
    if np.isscalar(a):
        a, b = b, a
    a = as_tensor(a)
    if np.isscalar(b):
        c = b
        return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),), "scale")
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # subgradient at exactly 0 is 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _make(total, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors, reduced in list order."""
    terms = [as_tensor(t) for t in terms]
    if not terms:
        return Tensor(np.zeros((), dtype=np.float32))
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise ValueError(f"add_n: shape mismatch {shape} vs {t.shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for t in terms:
        acc += t.data
    out = acc.astype(terms[0].dtype)
    return _make(out, terms, lambda g: tuple(g for _ in terms), "add_n")


# ---------------------------------------------------------------- structural


def stack(items: Sequence[Tensor]) -> Tensor:
    items = [as_tensor(t) for t in items]
    data = np.stack([t.data for t in items])
    if data.ndim > MAX_RANK:
        raise ValueError(f"stack: result rank {data.ndim} exceeds {MAX_RANK}")
    return _make(data, items, lambda g: tuple(g[i] for i in range(len(items))), "stack")


def select(x, index: int) -> Tensor:
    """Slice ``x[index]`` along the leading axis."""
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), vjp, "select")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def pad2d(x, pad: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes by ``pad`` on every side."""
    x = as_tensor(x)
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (pad, pad)]

    def vjp(g):
        return (np.ascontiguousarray(g[..., pad:-pad, pad:-pad]),)

    return _make(np.pad(x.data, widths), (x,), vjp, "pad2d")


# ---------------------------------------------------------------- conv / pool


def conv2d(x, kernels_: Tensor, stride: int = 1) -> Tensor:
    """Unpadded cross-correlation of ``C x H x W`` (or ``B x C x H x W``) input."""
    x, w = as_tensor(x), as_tensor(kernels_)
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: kernels must be C_out x C_in x k x k, got {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ValueError(f"conv2d: input must be C x H x W or B x C x H x W, got {x.shape}")
    xb = x.data if batched else x.data[None]
    _, C, H, W = xb.shape
    k = w.shape[2]
    if w.shape[1] != C or w.shape[3] != k:
        raise ValueError(f"conv2d: kernel {w.shape} does not match input channels {C}")
    if k > H or k > W:
        raise ValueError(f"conv2d: kernel {k}x{k} larger than input {H}x{W}")
    wd = w.data.astype(x.dtype, copy=False)
    out = kernels.conv2d_forward(xb, wd, stride)

    def vjp(g):
        gb = g if batched else g[None]
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(gb, wd, stride, H, W)
            if not batched:
                gx = gx[0]
        if w.requires_grad:
            gw = kernels.conv2d_backward_weight(gb, xb, k, stride).astype(w.dtype, copy=False)
        return gx, gw

    return _make(out if batched else out[0], (x, w), vjp, "conv2d")


def avgpool2d(x, window: int) -> Tensor:
    """Mean over non-overlapping ``window x window`` tiles of the trailing axes."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if window < 1 or H % window or W % window:
        raise ValueError(f"avgpool2d: window {window} does not divide {H}x{W}")
    lead = x.shape[:-2]
    tiles = x.data.reshape(*lead, H // window, window, W // window, window)
    out = tiles.mean(axis=(-3, -1), dtype=np.float64).astype(x.dtype)
    scale = x.dtype.type(1.0 / (window * window))

    def vjp(g):
        up = np.repeat(np.repeat(g, window, axis=-2), window, axis=-1)
        return (up * scale,)

    return _make(out, (x,), vjp, "avgpool2d")


# ---------------------------------------------------------------- losses


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between flattened ``a`` and ``b``; 0 when either norm < 1e-12."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shape mismatch {a.shape} vs {b.shape}")
    u = a.data.ravel().astype(np.float64)
    v = b.data.ravel().astype(np.float64)
    nu = float(np.sqrt(np.dot(u, u)))
    nv = float(np.sqrt(np.dot(v, v)))
    dtype = a.dtype
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        zero = lambda g: (np.zeros(a.shape, dtype=a.dtype), np.zeros(b.shape, dtype=b.dtype))
        return _make(np.zeros((), dtype=dtype), (a, b), zero, "cosine")
    dot = float(np.dot(u, v))
    s = dot / (nu * nv)

    def vjp(g):
        g = float(g)
        ga = g * (v / (nu * nv) - s * u / (nu * nu))
        gb = g * (u / (nu * nv) - s * v / (nv * nv))
        return ga.reshape(a.shape).astype(a.dtype), gb.reshape(b.shape).astype(b.dtype)

    return _make(np.asarray(s, dtype=dtype), (a, b), vjp, "cosine")


def matmul(x, w) -> Tensor:
    """``(n, d) @ (d, m)`` in float64, returned in the input dtype."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} and {w.shape}")
    x64, w64 = x.data.astype(np.float64), w.data.astype(np.float64)
    out = (x64 @ w64).astype(x.dtype)

    def vjp(g):
        g64 = g.astype(np.float64)
        return (g64 @ w64.T).astype(x.dtype), (x64.T @ g64).astype(w.dtype)

    return _make(out, (x, w), vjp, "matmul")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(n, classes)`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    p = softmax(logits.data)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))

    def vjp(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return ((float(g) / n) * d).astype(logits.dtype),

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------- backward


@dataclass
class ComputationRecord:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor]
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        return self.gradients.get(id(t))


def trace(output: Tensor) -> ComputationRecord:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return ComputationRecord(order)


def backward(output: Tensor) -> ComputationRecord:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if output.data.size != 1 or output.data.ndim != 0:
        raise ValueError(f"backward: output must be a scalar, got shape {output.shape}")
    record = trace(output)
    grads = record.gradients
    grads[id(output)] = np.ones((), dtype=output.dtype)
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None or not node._parents:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.array(pg, dtype=parent.dtype, copy=True)
    for node in record.nodes:
        if not node._parents:
            g = grads.get(id(node))
            node.grad = g if g is not None else np.zeros(node.shape, dtype=node.dtype)
    return record


def grad(fn: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``fn`` at ``x``."""
    leaf = Tensor(np.array(x, copy=True), requires_grad=True)
    out = fn(leaf)
    if out.requires_grad:
        backward(out)
    else:
        leaf.grad = np.zeros(leaf.shape, dtype=leaf.dtype)
    return out.item(), leaf.grad


def finite_difference_check(loss_fn: Callable[[Tensor], Tensor], point, h: float = 1e-3,
                            analytic: np.ndarray | None = None) -> float:
    """Max relative error between the backward gradient and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point, copy=True)
    if analytic is None:
        _, analytic = grad(loss_fn, x0)
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.zeros(x0.shape, dtype=np.float64)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(Tensor(x0.copy())).item()
        flat[i] = orig - h
        down = loss_fn(Tensor(x0.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
