"""Small dense tensor engine with define-by-run reverse-mode autodiff.

Every tensor wraps a float64 numpy array.  Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) and that touch a tensor with
``requires_grad=True`` are recorded together with a closure that maps the
output gradient to the input gradients.  :func:`backward` replays the tape in
reverse and deposits gradients into the leaf tensors (the parameters).

Outside a tape nothing is recorded, which is the inference fast path.

Shapes are explicit: elementwise binary ops require identical shapes, and the
only implicit expansion is a Python scalar operand.  The few places where the
model needs a shared operand (a weight applied to a batch of matrices, a bias
added to every row) have dedicated ops.
"""
from __future__ import annotations

import json
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "recording", "tensor", "parameter",
    "matmul", "transpose", "reshape", "add", "sub", "mul", "scale", "add_scalar",
    "add_bias", "scale_cols", "concat", "select_rows", "pick", "relu", "tanh", "exp", "log",
    "softmax", "log_softmax", "masked_fill", "sum", "mean", "standardize",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]

NEG_INF = -np.inf


class ShapeError(ValueError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        desc = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, name: str | None = None) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# --------------------------------------------------------------------------- tape

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def recording() -> bool:
    """True while a Tape is active in this thread."""
    return _active_tape() is not None


class Tape:
    """Ordered record of differentiable ops.  Parents always precede children."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _record(out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    if tape.consumed:
        raise RuntimeError("tape has already been consumed by backward()")
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append((out, parents, fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    The tape that produced ``loss`` is consumed afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("backward: loss was not computed under an active Tape")
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = fn(g)
        for p, pg in zip(parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                # leaf
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True)
                else:
                    p.grad += pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    tape.consumed = True
    for out, _, _ in tape.nodes:
        out._tape = None
    tape.nodes.clear()


# --------------------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), (B,m,k)@(k,n) with a shared right operand, or (B,m,k)@(B,k,n)."""
    A, Bm = a.data, b.data
    ok = (A.ndim in (2, 3) and Bm.ndim in (2, 3) and A.shape[-1] == Bm.shape[-2]
          and not (A.ndim == 2 and Bm.ndim == 3)
          and not (A.ndim == 3 and Bm.ndim == 3 and A.shape[0] != Bm.shape[0]))
    if not ok:
        raise ShapeError("matmul", A.shape, Bm.shape)
    out = Tensor(A @ Bm)

    def fn(g):
        ga = g @ np.swapaxes(Bm, -1, -2)
        if A.ndim == 3 and Bm.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    src = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(src),))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, Bm = a.data, b.data
    out = Tensor(A * Bm)
    return _record(out, (a, b), lambda g: (g * Bm, g * A))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + float(s))
    return _record(out, (a,), lambda g: (g,))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a vector of length ``a.shape[-1]`` to every row of ``a``."""
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", a.shape, b.shape)
    out = Tensor(a.data + b.data)
    lead = tuple(range(a.ndim - 1))
    return _record(out, (a, b), lambda g: (g, g.sum(axis=lead)))


def scale_cols(a: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of ``a`` elementwise by the vector ``v``."""
    if v.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise ShapeError("scale_cols", a.shape, v.shape)
    A, V = a.data, v.data
    out = Tensor(A * V)
    lead = tuple(range(a.ndim - 1))
    return _record(out, (a, v), lambda g: (g * V, (g * A).sum(axis=lead)))


def concat(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (rows by default)."""
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat: nothing to concatenate")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *[q.shape for q in parts])
    sizes = [p.shape[ax] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, parts, fn)


def select_rows(a: Tensor, index) -> Tensor:
    """Gather rows (axis -2).

    ``index`` may be a slice, a 1-D integer array shared by the whole batch, or
    (for a 3-D input) a 2-D ``(B, k)`` array of per-batch row indices.
    """
    A = a.data
    if a.ndim < 2:
        raise ShapeError("select_rows", a.shape)
    if isinstance(index, slice):
        out = Tensor(A[..., index, :])

        def fn(g):
            full = np.zeros_like(A)
            full[..., index, :] = g
            return (full,)

        return _record(out, (a,), fn)

    idx = np.asarray(index, dtype=np.intp)
    m = A.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"select_rows: index out of range for {m} rows")
    if idx.ndim == 1:
        out = Tensor(A[..., idx, :])

        def fn(g):
            full = np.zeros_like(A)
            if a.ndim == 2:
                np.add.at(full, idx, g)
            else:
                np.add.at(full, (slice(None), idx), g)
            return (full,)

        return _record(out, (a,), fn)
    if idx.ndim == 2 and a.ndim == 3 and idx.shape[0] == A.shape[0]:
        bidx = np.arange(A.shape[0])[:, None]
        out = Tensor(A[bidx, idx])

        def fn(g):
            full = np.zeros_like(A)
            np.add.at(full, (bidx, idx), g)
            return (full,)

        return _record(out, (a,), fn)
    raise ShapeError("select_rows", a.shape, idx.shape)


def pick(a: Tensor, index) -> Tensor:
    """Select one entry per row along the last axis: ``out[..., ] = a[..., index]``."""
    A = a.data
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != A.shape[:-1]:
        raise ShapeError("pick", A.shape, idx.shape)
    out = Tensor(np.take_along_axis(A, idx[..., None], axis=-1)[..., 0])

    def fn(g):
        full = np.zeros_like(A)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _record(out, (a,), fn)


def relu(a: Tensor) -> Tensor:
    A = a.data
    out = Tensor(np.maximum(A, 0.0))
    return _record(out, (a,), lambda g: (g * (A > 0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    A = a.data
    with np.errstate(divide="ignore"):
        out = Tensor(np.log(A))
    return _record(out, (a,), lambda g: (g / A,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis.  ``-inf`` entries get probability exactly 0."""
    A = a.data
    mx = A.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise ValueError("softmax: a row has every entry masked")
    e = np.exp(A - mx)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    A = a.data
    mx = A.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise ValueError("log_softmax: a row has every entry masked")
    z = A - mx
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y)
    p = np.exp(y)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), fn)


def masked_fill(a: Tensor, mask, value: float = NEG_INF) -> Tensor:
    """Set positions where ``mask`` is true to ``value`` (``-inf`` by default).

    ``mask`` is either a boolean array of ``a``'s shape or a collection of flat
    indices into the last axis applied to every row.
    """
    A = a.data
    m = np.asarray(mask)
    if m.dtype != bool:
        flat = np.zeros(A.shape[-1], dtype=bool)
        flat[m.astype(np.intp)] = True
        m = np.broadcast_to(flat, A.shape)
    elif m.shape != A.shape:
        raise ShapeError("masked_fill", A.shape, m.shape)
    out = Tensor(np.where(m, value, A))
    keep = ~m
    return _record(out, (a,), lambda g: (g * keep,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    A = a.data
    if axis is None:
        out = Tensor(np.asarray(A.sum()))
        return _record(out, (a,), lambda g: (np.broadcast_to(g, A.shape).copy(),))
    ax = axis % a.ndim
    out = Tensor(A.sum(axis=ax))
    return _record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), A.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def standardize(a: Tensor, axes: Sequence[int], eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) with statistics taken over ``axes`` (biased var)."""
    axes = tuple(ax % a.ndim for ax in axes)
    A = a.data
    mu = A.mean(axis=axes, keepdims=True)
    xc = A - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)

    def fn(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)
    return _record(out, (a,), fn)


# --------------------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   bytes 0..7    magic  b"LEHDCKPT"
#   bytes 8..11   uint32 format version
#   bytes 12..19  uint64 header length H
#   next H bytes  UTF-8 JSON header:
#                 {"format_version": 1, "meta": {...},
#                  "tensors": [{"name", "shape", "offset", "count"}, ...]}
#                 offset/count are in float64 elements relative to payload start
#   payload       concatenated row-major float64 ('<f8') tensors

CHECKPOINT_MAGIC = b"LEHDCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
                    meta: dict | None = None) -> None:
    items = list(params.items()) if isinstance(params, dict) else list(params)
    entries, offset = [], 0
    for name, t in items:
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(t.size)})
        offset += int(t.size)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "meta": meta or {},
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for _, t in items:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    """Return ``(params, meta)``; params are fresh leaf tensors with ``requires_grad``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=20 + hlen)
    params = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        params[e["name"]] = parameter(chunk.reshape(e["shape"]).astype(np.float64), name=e["name"])
    return params, header.get("meta", {})
