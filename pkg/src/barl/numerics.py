"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every model computation in the package is composed from the functions in
this module, so any scalar objective can be differentiated and checked
against central finite differences with :func:`check_gradients`.

Usage::

    with Tape() as tape:
        y = matmul(x, w)
        loss = sum_(y * y)
    backward(tape, loss)
    w.grad
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's precondition does not hold."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


_state = threading.local()


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


class Tape:
    """Append-only record of differentiable operations.

    Nodes reference only earlier node ids, so reverse iteration is a valid
    topological order. Saved forward values are never mutated, which makes
    :func:`backward` replayable.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None]] = []
        self.leaves: dict[int, Tensor] = {}
        self._leaf_ids: dict[int, int] = {}
        self._prev = None

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def _node_of(self, t: Tensor) -> int | None:
        if not t.requires_grad:
            return None
        if t.tape is self:
            return t.node_id
        # leaf tensor (parameter) first seen on this tape
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(("leaf", (), None))
            self._leaf_ids[key] = nid
            self.leaves[nid] = t
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> int:
        ids = tuple(-1 if (i := self._node_of(t)) is None else i for t in inputs)
        nid = len(self.nodes)
        self.nodes.append((op, ids, backward_fn))
        return nid

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.tape = None
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def _check_finite(arr: np.ndarray, what: str):
    # fast path: a finite sum implies finite entries
    s = arr.sum()
    if math.isfinite(s):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.node_id = tape.record(op, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g2 = g.reshape(-1, int(np.prod(g.shape[lead:], dtype=np.int64)))
        g = (np.ones(g2.shape[0]) @ g2).reshape(g.shape[lead:])
    axes = tuple(ax for ax, n in enumerate(shape) if n == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Returns the per-node gradient map. Zero the leaves' grads first to get
    fresh values; the tape itself is left untouched and can be replayed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        op, ids, fn = tape.nodes[nid]
        if fn is None:
            continue
        in_grads = fn(g)
        for i, gi in zip(ids, in_grads):
            if i < 0 or gi is None:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    for nid, leaf in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return grads


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise ContractError("log of a non-positive value")
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay reliable)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _result("gelu", out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if np.ndim(out) == 0:
        out = np.reshape(out, (1,))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _result("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _result("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


def index(a, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[idx], dtype=DTYPE)
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        ga = np.zeros(shape, dtype=DTYPE)
        np.add.at(ga, idx, g.reshape(np.shape(a.data[idx])))
        return (ga,)

    return _result("index", out, (a,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"embedding id out of range [0, {n})")
    shape = weight.shape

    def bw(g):
        gw = np.zeros(shape, dtype=DTYPE)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gw,)

    return _result("embedding", weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisers


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # fold leading dims into one GEMM; the weight gradient is a single product
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def bw2(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _result("matmul", out, (a, b), bw2)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), bw)


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable, truthy = keep) zeroes excluded entries exactly.
    A row with no kept entry returns all zeros.
    """
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise DimensionError("softmax over an empty dimension")
    z = x.data
    if mask is None:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        zm = np.where(keep, z, -np.inf)
        m = zm.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(keep, np.exp(np.where(keep, z, m) - m), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax", out, (x,), bw)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


def normalize(x, eps: float = 1e-10) -> Tensor:
    """Zero-mean, unit-variance rows (layer norm without the affine part)."""
    x = as_tensor(x)
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result("normalize", y, (x,), bw)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-10) -> Tensor:
    return add(mul(normalize(x, eps), gain), bias)


def l2_normalize(x) -> Tensor:
    """Scale rows to unit Euclidean norm; zero-norm rows are a contract error."""
    x = as_tensor(x)
    z = x.data
    nrm = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    if (nrm == 0).any():
        raise ContractError("cannot normalise a zero-norm vector")
    y = z / nrm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / nrm,)

    return _result("l2_normalize", y, (x,), bw)


def logsumexp(x, mask: np.ndarray | None = None) -> Tensor:
    """log-sum-exp over the last axis, keepdims; masked entries are ignored."""
    x = as_tensor(x)
    z = x.data
    keep = np.ones(z.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), z.shape)
    zm = np.where(keep, z, -np.inf)
    m = zm.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(np.where(keep, z, m) - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    out = np.log(safe) + m
    w = e / safe

    return _result("logsumexp", out, (x,), lambda g: (g * w,))


def attention(q, k, v, scale: float | None = None, mask: np.ndarray | None = None):
    """Scaled dot-product attention.

    Returns ``(out, weights)`` with ``weights = softmax(q k^T * scale)``.
    Works on matrices or on batches of matrices.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] == 0:
        raise ContractError("attention needs at least one key")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    if scale <= 0:
        raise ContractError("attention scale must be positive")
    logits = _scale_op(matmul(q, transpose(k)), scale)
    w = softmax(logits, mask)
    return matmul(w, v), w


def _scale_op(a: Tensor, c: float) -> Tensor:
    return a if c == 1.0 else scale(a, c)


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Named trainable tensors with deterministic (lexicographic) order."""

    def __init__(self, entries: dict[str, Tensor] | None = None, rng_seed: int = 0,
                 meta: dict | None = None):
        self.rng_seed = int(rng_seed)
        self.meta = dict(meta or {})
        self._entries: dict[str, Tensor] = {}
        for name, t in sorted((entries or {}).items()):
            self.add(name, t)

    def add(self, name: str, t: Tensor):
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._entries[name] = t
        self._entries = dict(sorted(self._entries.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def count(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def copy(self) -> ParamSet:
        return ParamSet({k: Tensor(v.data.copy()) for k, v in self._entries.items()},
                        self.rng_seed, self.meta)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


def check_gradients(f: Callable[[ParamSet], Tensor], params: ParamSet, h: float = 1e-5) -> float:
    """Max over all parameter entries of |analytic - central diff| / max(1, |analytic|).

    ``f`` builds a scalar from ``params`` using the module's ops. An empty
    parameter set returns 0.
    """
    if not 0 < h <= 1e-3:
        raise ContractError(f"step h must lie in (0, 1e-3], got {h}")
    if len(params) == 0:
        return 0.0
    params.zero_grad()
    with Tape() as tape:
        out = f(params)
    if out.data.size != 1:
        raise ContractError(f"function must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        backward(tape, out)
    worst = 0.0
    for _, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = analytic.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(params).item()
            flat[j] = orig - h
            fm = f(params).item()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            err = abs(gflat[j] - num) / max(1.0, abs(gflat[j]))
            worst = max(worst, err)
    params.zero_grad()
    return worst


def init_uniform(rng: np.random.Generator, shape: Iterable[int], fan_in: int, fan_out: int) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=tuple(shape)), requires_grad=True)
