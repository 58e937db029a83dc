"""Dense tensors with a define-by-run tape and reverse-mode gradients.

Every op computes its value eagerly with numpy. When at least one input is
attached to a :class:`Tape`, the op appends a record holding a closure that
maps the output cotangent to input cotangents. :func:`backward` replays the
records in reverse.

    >>> tape = Tape()
    >>> x = tape.watch(Tensor([1.0, 1.0]))
    >>> W = Tensor([[1.0, 2.0], [3.0, 4.0]])
    >>> grads = backward(total(matmul(W, x)))
    >>> grads[x.node_id].values.tolist()
    [4.0, 6.0]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when op inputs have non-conforming shapes."""


class GradCheckError(RuntimeError):
    pass


@dataclass
class _Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass(eq=False)
class Tape:
    """Ordered op log for one forward pass. Consumed by :func:`backward`."""

    records: list[_Record] = field(default_factory=list)
    leaves: list[int] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list)
    live: bool = True

    def _new_node(self, shape: tuple[int, ...]) -> int:
        if not self.live:
            raise RuntimeError("tape already consumed by backward()")
        self.shapes.append(shape)
        return len(self.shapes) - 1

    def watch(self, t: "Tensor | np.ndarray | Sequence[float]") -> "Tensor":
        """Attach a leaf. Returns a new Tensor sharing the value buffer."""
        t = as_tensor(t)
        node = self._new_node(t.shape)
        self.leaves.append(node)
        return Tensor(t.values, tape=self, node_id=node)

    def clear(self) -> None:
        self.records.clear()
        self.leaves.clear()
        self.shapes.clear()
        self.live = True

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    """Float64 array, optionally attached to a tape."""

    __slots__ = ("values", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, values, tape: Tape | None = None, node_id: int | None = None):
        arr = np.asarray(values, dtype=DTYPE)
        self.values = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def attached(self) -> bool:
        return self.tape is not None and self.tape.live

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.attached else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tapes = {id(t.tape): t.tape for t in inputs if t.attached}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise RuntimeError(f"{kind}: inputs belong to different tapes")
    tape = next(iter(tapes.values()))
    node = tape._new_node(out.shape)
    ids = tuple(t.node_id if t.attached else -1 for t in inputs)
    tape.records.append(_Record(kind, ids, node, vjp))
    return Tensor(out, tape=tape, node_id=node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.values + b.values,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.values - b.values,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _record("mul", (a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.values * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _record("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.values > 0, 1.0, slope)
    return _record("leaky_relu", (a,), a.values * factor, lambda g: (g * factor,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.values)
    return _record("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.values)
    return _record("exp", (a,), e, lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.values
    inside = (x >= lo) & (x <= hi)
    return _record("clip", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


def dropout(a, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    a = as_tensor(a)
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout at train time needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (a,), a.values * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions


def total(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.asarray(out), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return scale(total(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    k_a = av.shape[-1]
    k_b = bv.shape[0] if bv.ndim == 1 else bv.shape[-2]
    if k_a != k_b:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape}: {exc}") from None

    def vjp(g):
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = np.tensordot(g, av, axes=(tuple(range(g.ndim)), tuple(range(av.ndim - 1))))
            return _unbroadcast(ga, av.shape), gb
        if av.ndim == 1:
            ga = np.matmul(bv, g[..., None])[..., 0]
            gb = av[:, None] * g[..., None, :]
            return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("matmul", (a, b), out, vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _record("transpose", (a,), np.swapaxes(a.values, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.values.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat(axis={axis}): shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record("concat", ts, out, lambda g: tuple(np.split(g, cuts, axis=ax)))


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=0)


def concat_cols(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=-1)


def take_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("take_cols", (a,), a.values[..., start:stop].copy(), vjp)


def split_cols(a, sizes: Sequence[int]) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(take_cols(a, start, start + n))
        start += n
    return out


# ---------------------------------------------------------------- softmax family


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    x = a.values
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax_rows", (a,), s,
                   lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def masked_softmax_rows(a, mask) -> Tensor:
    """Softmax over the last axis where ``mask == 0`` entries get weight 0.

    Masked logits are set to -inf before exponentiation. A fully masked row
    yields all zeros.
    """
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"masked_softmax_rows: mask shape {m.shape} != input shape {a.shape}")
    x = np.where(m, a.values, -np.inf)
    row_max = x.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(m, np.exp(x - row_max), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    s = np.divide(e, z, out=np.zeros_like(e), where=z > 0)
    return _record("masked_softmax_rows", (a,), s,
                   lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------- sparse message passing


def gather_rows(a, index: np.ndarray) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def vjp(g):
        return (_segment_sum_np(g, idx, n),)

    return _record("gather_rows", (a,), a.values[idx], vjp)


def _segment_sum_np(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    if x.ndim == 1:
        return np.bincount(seg, weights=x, minlength=n)
    flat = x.reshape(x.shape[0], -1)
    out = np.zeros((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(seg, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + x.shape[1:])


def segment_sum(a, segments: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets given by ``segments``."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {seg.shape[0]} segment ids for {a.shape[0]} rows")
    return _record("segment_sum", (a,), _segment_sum_np(a.values, seg, n),
                   lambda g: (g[seg],))


def segment_softmax(a, segments: np.ndarray, n: int) -> Tensor:
    """Softmax of edge logits ``a`` (shape (E,) or (E, H)) within each segment."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    x = a.values
    if seg.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_softmax: {seg.shape[0]} segment ids for {x.shape[0]} logits")
    mx = np.full((n,) + x.shape[1:], -np.inf)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    z = _segment_sum_np(e, seg, n)
    s = e / z[seg]

    def vjp(g):
        gs = g * s
        return (gs - s * _segment_sum_np(gs, seg, n)[seg],)

    return _record("segment_softmax", (a,), s, vjp)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "concat_rows": lambda *ts: concat_rows(ts),
    "concat_cols": lambda *ts: concat_cols(ts),
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax_rows": softmax_rows,
    "masked_softmax_rows": masked_softmax_rows,
    "log": log,
    "exp": exp,
    "scale": scale,
    "sum": total,
    "dropout": dropout,
    "clip": clip,
    "gather_rows": gather_rows,
    "segment_sum": segment_sum,
    "segment_softmax": segment_softmax,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``apply("leaky_relu", x, slope=0.2)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- reverse pass


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for every leaf on its tape.

    Leaves that ``loss`` does not depend on get zero gradients. The tape is
    consumed.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.attached:
        raise RuntimeError("backward: loss is not attached to a live tape")
    tape = loss.tape
    grads: list[np.ndarray | None] = [None] * len(tape.shapes)
    grads[loss.node_id] = np.ones(loss.shape)
    for rec in reversed(tape.records):
        g = grads[rec.output]
        if g is None:
            continue
        for node, gi in zip(rec.inputs, rec.vjp(g)):
            if node < 0 or gi is None:
                continue
            grads[node] = gi if grads[node] is None else grads[node] + gi
    out = {}
    for leaf in tape.leaves:
        g = grads[leaf]
        out[leaf] = Tensor(np.zeros(tape.shapes[leaf]) if g is None else g)
    tape.live = False
    return out


def grad_check(function: Callable[[list[Tensor]], Tensor], params: Sequence, epsilon: float = 1e-4,
               floor: float = 1e-6) -> float:
    """Worst coordinate-wise relative error between backward() and central differences.

    ``relative = |analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the floor keeps vanishing gradients from dividing by zero.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = [np.array(as_tensor(p).values, dtype=DTYPE) for p in params]
    tape = Tape()
    watched = [tape.watch(Tensor(b)) for b in base]
    grads = backward(function(watched))
    worst = 0.0
    for k, b in enumerate(base):
        analytic = grads[watched[k].node_id].values
        for idx in np.ndindex(b.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = [x.copy() for x in base]
                pert[k][idx] += sign * epsilon
                v = float(function([Tensor(x) for x in pert]).values.reshape(-1)[0])
                if not np.isfinite(v):
                    raise GradCheckError(f"non-finite function value at param {k}, coordinate {idx}")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2.0 * epsilon)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- serialization

_MAGIC = b"SMEP"
_VERSION = 1


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Little-endian: magic, version, count, then (name, rank, dims, float64 payload)."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * size
        out[name] = arr
    return out


def watch_all(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: tape.watch(v) for k, v in params.items()}


def detached(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def leaf_grads(grads: dict[int, Tensor], watched: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: grads[t.node_id].values for k, t in watched.items()}


def flatten(ts: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([t.values.reshape(-1) for t in ts])
