"""Dense tensors with dynamic reverse-mode differentiation, AdamW and checkpoints.

Everything the model needs is expressed with the handful of differentiable
ops defined here. Graphs are recorded per forward pass; a tensor never has
its ``data`` mutated while it takes part in a recorded graph.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
CHECKPOINT_MAGIC = b"PSTG1"


class Tensor:
    """Immutable n-d array node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr)


def _needs_graph(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _make(data, parents, backward) -> Tensor:
    if _needs_graph(*parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


class FlopCounter:
    """Accumulates multiply-add FLOPs (2 per MAC) issued by ``matmul``, per tag."""

    def __init__(self):
        self.by_tag: dict[str, int] = {}

    def add(self, tag: str, flops: int) -> None:
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def get(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)


_counters: list[FlopCounter] = []
_tags: list[str] = ["other"]


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def flop_tag(tag: str):
    _tags.append(tag)
    try:
        yield
    finally:
        _tags.pop()


def _record_matmul(a_shape, b_shape, out_shape) -> None:
    if not _counters:
        return
    flops = 2 * int(np.prod(out_shape, dtype=np.int64)) * int(a_shape[-1])
    for c in _counters:
        c.add(_tags[-1], flops)


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * factor

    def backward(g):
        return (g * factor,)

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from exc
    _record_matmul(a.shape, b.shape, out.shape)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), backward)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(tuple(shape))

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), backward)


def getitem(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; ``indices`` may be any integer array shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        moved = np.moveaxis(np.zeros_like(a.data), axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, g_moved)
        return (np.moveaxis(moved, 0, axis),)

    return _make(out, (a,), backward)


def softmax_last(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centred = a.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centred * inv

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - out * gx_mean),)

    return _make(out, (a,), backward)


def total(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum())

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return scale(total(a), 1.0 / a.data.size)


def l1_mean(a: Tensor, b) -> Tensor:
    """Mean absolute difference; the subgradient at an exact tie is 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l1 operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).sum() / n)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``."""
    wrt = list(wrt)
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(_topo_order(output)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _needs_graph(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


class ParamStore:
    """Named learnable tensors plus AdamW moment buffers and a shared step count."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        arr = np.array(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        t = Tensor(arr, requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def set_value(self, name: str, value: np.ndarray) -> None:
        old = self.params[name]
        self.params[name] = Tensor(np.array(value, dtype=old.dtype), requires_grad=True, name=name)

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self.params.items():
            other.params[name] = Tensor(t.data.copy(), requires_grad=True, name=name)
            other.m[name] = self.m[name].copy()
            other.v[name] = self.v[name].copy()
        other.step = self.step
        return other


def backward(output: Tensor, params: ParamStore) -> dict[str, np.ndarray]:
    names = params.names()
    grads = grad(output, [params[n] for n in names])
    return dict(zip(names, grads))


def adamw_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    for name in params.names():
        if name not in grads:
            raise KeyError(f"no gradient supplied for parameter {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in params.names():
        g = grads[name]
        m = beta1 * params.m[name] + (1.0 - beta1) * g
        v = beta2 * params.v[name] + (1.0 - beta2) * (g * g)
        params.m[name], params.v[name] = m, v
        p = params[name].data * (1.0 - lr * weight_decay)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        params.set_value(name, p)
    return params


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(params: ParamStore, extra: dict | None = None) -> bytes:
    """Serialise parameters, optimizer moments, step count and JSON metadata.

    Layout (little-endian): magic ``PSTG1``, u64 step, u32 parameter count, then
    per parameter: u16 name length, utf-8 name, u32 rank, u64 extents, value,
    first-moment and second-moment payloads as f64. A trailing u64 length plus
    utf-8 JSON carries ``extra``.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<QI", params.step, len(params)))
    for name, t in params.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        _write_array(buf, t.data)
        _write_array(buf, params.m[name])
        _write_array(buf, params.v[name])
    meta = json.dumps(extra or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def checkpoint_from_bytes(blob: bytes) -> tuple[ParamStore, dict]:
    view = memoryview(blob)
    if bytes(view[:5]) != CHECKPOINT_MAGIC:
        raise ValueError("not a PSTG1 checkpoint (bad magic header)")
    pos = 5
    step, count = struct.unpack_from("<QI", view, pos)
    pos += struct.calcsize("<QI")
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arrays = []
        for _ in range(3):
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape)
            arrays.append(arr.astype(np.float64))
            pos += 8 * size
        store.add(name, arrays[0])
        store.m[name], store.v[name] = arrays[1], arrays[2]
    store.step = step
    (mlen,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    extra = json.loads(bytes(view[pos : pos + mlen]).decode("utf-8"))
    if pos + mlen != len(blob):
        raise ValueError("trailing bytes after checkpoint metadata")
    return store, extra


def save_checkpoint(path, params: ParamStore, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, extra))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan: int) -> np.ndarray:
    bound = math.sqrt(1.0 / max(1, fan))
    return rng.uniform(-bound, bound, size=tuple(shape))
