"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the encoder/decoder models need are provided.  Every op
records a closure that maps the output gradient to input gradients; calling
:func:`backward` on a scalar walks the graph once in reverse topological
order and accumulates into ``Tensor.grad``.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
_GRAD_ENABLED = True
DEBUG = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_precision(bits: int) -> None:
    """Switch the default dtype for newly created tensors (64 or 32)."""
    global DTYPE
    DTYPE = {64: np.float64, 32: np.float32}[bits]


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def const(data) -> Tensor:
    return Tensor(data)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by forward op")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    return _make(data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))
    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))
    return _make(data, (a, b), bw)


def tanh(x):
    y = np.tanh(x.data)

    def bw(g):
        _acc(x, g * (1.0 - y * y))
    return _make(y, (x,), bw)


def _sigmoid(v):
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x):
    y = _sigmoid(x.data)

    def bw(g):
        _acc(x, g * y * (1.0 - y))
    return _make(y, (x,), bw)


def exp(x):
    y = np.exp(x.data)

    def bw(g):
        _acc(x, g * y)
    return _make(y, (x,), bw)


def log(x):
    y = np.log(x.data)

    def bw(g):
        _acc(x, g / x.data)
    return _make(y, (x,), bw)


def total(x):
    """Sum of all entries, as a 0-d tensor."""
    y = np.asarray(x.data.sum())

    def bw(g):
        _acc(x, np.broadcast_to(g, x.shape))
    return _make(y, (x,), bw)


# ---------------------------------------------------------------- structural

def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch dims."""
    if b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.data.shape[-1])
            _acc(b, a2.T @ g.reshape(-1, g.shape[-1]))
    return _make(data, (a, b), bw)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(str(t.shape) for t in tensors))
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _acc(t, part)
    return _make(data, tuple(tensors), bw)


def slice_cols(x, start, stop):
    data = x.data[..., start:stop]

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _acc(x, full)
    return _make(data, (x,), bw)


def stack(tensors, axis=1):
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            _acc(t, np.take(g, i, axis=axis))
    return _make(data, tuple(tensors), bw)


def embedding_lookup(table, index):
    """Rows of ``table`` selected by an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    n = table.data.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"embedding_lookup: index out of range for table of {n} rows")
    data = table.data[index]

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, index.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _acc(table, full)
    return _make(data, (table,), bw)


take_rows = embedding_lookup


def pick_rows(tensors, index):
    """Row ``b`` of the result is row ``b`` of ``tensors[index[b]]``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(len(index))
    data = np.stack([t.data for t in tensors])[index, rows]

    def bw(g):
        for k in np.unique(index):
            sel = index == k
            part = np.zeros_like(tensors[k].data)
            part[sel] = g[sel]
            _acc(tensors[k], part)
    used = tuple(tensors[k] for k in np.unique(index))
    return _make(data, used, bw)


def gather_cols(x, index):
    """``x[b, index[b]]`` for a 2-D ``x``; returns a vector."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        _acc(x, full)
    return _make(data, (x,), bw)


def blend(mask, new, old):
    """``mask * new + (1 - mask) * old`` with a constant 0/1 row mask."""
    m = np.asarray(mask, dtype=new.data.dtype).reshape(-1, 1)
    data = m * new.data + (1.0 - m) * old.data

    def bw(g):
        _acc(new, g * m)
        _acc(old, g * (1.0 - m))
    return _make(data, (new, old), bw)


def dropout(x, p, train, rng):
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.data.dtype)

    def bw(g):
        _acc(x, g * keep)
    return _make(x.data * keep, (x,), bw)


# ---------------------------------------------------------------- softmax family

def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; masked entries get probability 0.

    A slice with every entry masked yields all zeros rather than NaN.
    """
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        v = np.where(mask, v, -np.inf)
    mx = np.max(v, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(v - mx)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bw(g):
        _acc(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _make(y, (x,), bw)


def log_softmax(x, mask=None):
    """Log-softmax along the last axis; masked entries come out as -inf."""
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        v = np.where(mask, v, -np.inf)
    mx = np.max(v, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    shifted = v - mx
    s = np.exp(shifted).sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        lse = np.log(s)
    # fully masked rows stay at -inf instead of NaN
    y = np.where(s > 0, shifted - np.where(s > 0, lse, 0.0), -np.inf)
    p = np.exp(y)

    def bw(g):
        g = np.where(np.isfinite(y), g, 0.0)
        _acc(x, g - p * g.sum(axis=-1, keepdims=True))
    return _make(y, (x,), bw)


# ---------------------------------------------------------------- attention helpers

def bdot(keys, query):
    """Batched dot: ``keys`` (B, Z, H) with ``query`` (B, H) -> (B, Z)."""
    if keys.data.shape[0] != query.data.shape[0] or keys.data.shape[2] != query.data.shape[1]:
        raise ShapeError(f"bdot: incompatible shapes {keys.shape} and {query.shape}")
    data = np.einsum("bzh,bh->bz", keys.data, query.data)

    def bw(g):
        if keys.requires_grad:
            _acc(keys, g[:, :, None] * query.data[:, None, :])
        if query.requires_grad:
            _acc(query, np.einsum("bz,bzh->bh", g, keys.data))
    return _make(data, (keys, query), bw)


def wsum(weights, values):
    """Weighted sum: ``weights`` (B, Z) over ``values`` (B, Z, H) -> (B, H)."""
    if weights.data.shape != values.data.shape[:2]:
        raise ShapeError(f"wsum: incompatible shapes {weights.shape} and {values.shape}")
    data = np.einsum("bz,bzh->bh", weights.data, values.data)

    def bw(g):
        if weights.requires_grad:
            _acc(weights, np.einsum("bh,bzh->bz", g, values.data))
        if values.requires_grad:
            _acc(values, weights.data[:, :, None] * g[:, None, :])
    return _make(data, (weights, values), bw)


# ---------------------------------------------------------------- LSTM

def lstm_cell(x, state, W, b):
    """One LSTM step.

    ``state`` packs ``[h, c]`` along the last axis (width 2*hid); ``W`` has
    shape (in + hid, 4*hid) with gate blocks ordered input, forget, output,
    candidate.  Returns the new packed state.
    """
    hid = W.data.shape[1] // 4
    if state.data.shape[-1] != 2 * hid or x.data.shape[-1] + hid != W.data.shape[0]:
        raise ShapeError(f"lstm_cell: x {x.shape}, state {state.shape}, W {W.shape}")
    h, c = state.data[:, :hid], state.data[:, hid:]
    xh = np.concatenate([x.data, h], axis=1)
    z = xh @ W.data + b.data
    sg = _sigmoid(z[:, :3 * hid])
    i, f, o = sg[:, :hid], sg[:, hid:2 * hid], sg[:, 2 * hid:]
    gc = np.tanh(z[:, 3 * hid:])
    c2 = f * c + i * gc
    tc = np.tanh(c2)
    h2 = o * tc
    data = np.concatenate([h2, c2], axis=1)

    def bw(g):
        dh, dc = g[:, :hid], g[:, hid:]
        dc = dc + dh * o * (1.0 - tc * tc)
        do = dh * tc
        di = dc * gc
        df = dc * c
        dg = dc * i
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            do * o * (1.0 - o),
            dg * (1.0 - gc * gc),
        ], axis=1)
        if W.requires_grad:
            _acc(W, xh.T @ dz)
        if b.requires_grad:
            _acc(b, dz.sum(axis=0))
        if x.requires_grad or state.requires_grad:
            dxh = dz @ W.data.T
            _acc(x, dxh[:, :x.data.shape[1]])
            if state.requires_grad:
                _acc(state, np.concatenate([dxh[:, x.data.shape[1]:], dc * f], axis=1))
    return _make(data, (x, state, W, b), bw)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable tracked tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    # interior nodes hold their gradient only until consumed
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad if node.grad is not None else grads.get(id(node))
        if g is None:
            continue
        node.grad = None
        node._backward(g)
    # leaves keep .grad; interior nodes were cleared above
    return None


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    """Bias-corrected Adam.  ``t`` counts completed steps."""

    params: list
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if not np.isfinite(norm):
            raise NonFiniteError("non-finite gradient; Adam step aborted")
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = [g * scale for g in grads]
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            adam_step(p.data, g, m, v, self.lr, self.beta1, self.beta2, self.eps, self.t)
        return norm


def adam_step(param, grad, m, v, lr=0.001, beta1=0.9, beta2=0.999, eps_hat=1e-8, t=1):
    """In-place Adam update of ``param`` (and its moment buffers ``m``, ``v``)."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient; Adam step aborted")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps_hat)
    return param


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f, params, eps=1e-5, tol=1e-4, n_coords=None, rng=None, floor=1e-8):
    """Compare backward gradients with central finite differences.

    ``f`` rebuilds the graph and returns a scalar Tensor each call.  The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if DTYPE is not np.float64:
        raise RuntimeError("grad_check requires 64-bit precision")
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    coords = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    if n_coords is not None and n_coords < len(coords):
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    worst, failures = 0.0, []
    with no_grad():
        for k, i in coords:
            flat = params[k].data.reshape(-1)
            old = flat[i]
            flat[i] = old + eps
            up = float(f().data)
            flat[i] = old - eps
            down = float(f().data)
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = float(analytic[k].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            if rel >= tol:
                failures.append((params[k].name or k, i, ana, num, rel))
    zero_grads(params)
    return GradCheckReport(worst, len(coords), failures)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ECGCKPT\x00"
FORMAT_VERSION = 1
_PRECISION_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: "<f4", 1: "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict) -> None:
    """Write named arrays in the binary checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], Tensor) else params[name]
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            tag = _PRECISION_TAGS[arr.dtype]
            fh.write(struct.pack("<B", tag))
            fh.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())


def load_checkpoint(path, expected_shapes: dict | None = None) -> dict:
    """Read a checkpoint; optionally validate names and shapes."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            (tag,) = struct.unpack("<B", fh.read(1))
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{path}: unknown precision tag {tag} for {name}")
            dt = np.dtype(_TAG_DTYPES[tag])
            size = int(np.prod(dims)) if dims else 1
            out[name] = np.frombuffer(fh.read(size * dt.itemsize), dtype=dt).reshape(dims).copy()
    if expected_shapes is not None:
        if set(out) != set(expected_shapes):
            missing = sorted(set(expected_shapes) - set(out))
            extra = sorted(set(out) - set(expected_shapes))
            raise CheckpointError(f"checkpoint names differ: missing={missing} extra={extra}")
        for name, shape in expected_shapes.items():
            if tuple(out[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"checkpoint shape mismatch for {name}: {out[name].shape} vs {tuple(shape)}")
    return out


def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
