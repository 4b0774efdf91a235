"""Dense tensors with a reverse-mode gradient tape.

A deliberately small numpy-backed engine: just enough operations for an
attention model over token sequences and graph nodes, each with a
hand-written backward rule. Arrays are float64 by default so that
finite-difference gradient checks are meaningful; float32 can be selected
globally for speed.

Usage sketch::

    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    with Tape():
        loss = reduce_sum(tanh(matmul(x, w)))
        grads = backward(loss)
    step = grads.get(w)          # ndarray, zeros if w was never reached

Recording only happens inside an active ``Tape``; inference code simply
runs without one and pays no tracking overhead.
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def set_default_dtype(name: str) -> None:
    """Select the dtype new tensors are created with ("float64"/"float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}; choose from {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Gradient-tape misuse: nesting, reuse after backward, detached loss."""


class Tensor:
    """A dense array, optionally a trainable leaf of the gradient tape."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; all dispatch to the module-level ops below.
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

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))


def as_tensor(x) -> Tensor:
    """Wrap ndarrays / python scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    __slots__ = ("out", "parents")

    def __init__(self, out, parents):
        self.out = out          # Tensor produced by the op
        self.parents = parents  # tuple of (input Tensor, vjp callable)


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Records ops (in creation order) so `backward` can replay them reversed.

    Exactly one tape may be active at a time; a tape is single-use — after
    `backward` it refuses further work, forcing a fresh forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a gradient tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


def _record(out: Tensor, *parents) -> Tensor:
    """Attach `out` to the active tape if any input participates in gradients."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    kept = tuple((t, vjp) for t, vjp in parents if tape.tracks(t))
    if kept:
        tape.nodes.append(_Node(out, kept))
        tape._produced.add(id(out))
    return out


class GradientMap:
    """Gradients keyed by tensor identity; unreached tensors read as zero."""

    def __init__(self, grads: dict):
        self._grads = grads

    def get(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def has(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(loss: Tensor) -> GradientMap:
    """Reverse-accumulate d(loss)/d(leaf) for every leaf reached on the tape.

    `loss` must be a scalar produced under the currently active tape. The
    tape is consumed: calling backward twice without a fresh forward pass
    is an error, as the recorded graph describes only one evaluation.
    """
    tape = _ACTIVE_TAPE
    if tape is None:
        raise TapeError("backward called with no active tape")
    if tape._consumed:
        raise TapeError("backward already called on this tape; rerun the forward pass")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise TapeError("loss tensor was not produced under the active tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a, lambda g: -g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    od = out.data
    return _record(out, (a, lambda g: g * (1.0 - od * od)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                          np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))))
    od = out.data
    return _record(out, (a, lambda g: g * od * (1.0 - od)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = (a.data > 0).astype(a.data.dtype)
    return _record(out, (a, lambda g: g * mask))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a, lambda g: g * od))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a, lambda g: g / ad))


# ---------------------------------------------------------------------------
# linear algebra / structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects 2-d operands with matching inner dim, "
                         f"got {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(
        out,
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a, lambda g: g.T))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a, lambda g: g.reshape(orig)))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _record(out, *((p, make_vjp(i)) for i, p in enumerate(parts)))


def take_rows(a, indices) -> Tensor:
    """Gather rows (axis 0). Duplicate indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows expects a 1-d index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for {a.shape[0]} rows: "
                         f"[{idx.min()}, {idx.max()}]")
    out = Tensor(a.data[idx])

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return z

    return _record(out, (a, vjp))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape
    return _record(out, (a, lambda g: _expand_reduced(g, shape, axis, keepdims)))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def logsumexp(a, axis: int = 0, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along `axis`, max-shifted so large inputs stay finite."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"logsumexp over an empty axis (shape {a.shape}, axis {axis})")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    res = m + np.log(s)
    out = Tensor(res if keepdims else np.squeeze(res, axis=axis))
    soft = e / s
    shape = x.shape

    def vjp(g):
        return _expand_reduced(g, shape, axis, keepdims) * soft

    return _record(out, (a, vjp))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    return masked_softmax(a, None)


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the last axis restricted to positions where mask == 1.

    Disallowed positions come out exactly 0 (not merely tiny), so attention
    can never leak across a blocked edge. A row whose mask is entirely zero
    yields an all-zero output row and propagates zero gradient — such rows
    are dead ends by design, not NaN factories.
    """
    t = as_tensor(scores)
    x = t.data
    if mask is None:
        allowed = np.ones_like(x, dtype=bool)
    else:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != x.shape:
            raise ShapeError(f"mask shape {m.shape} does not match scores shape {x.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary (entries 0 or 1)")
        allowed = m.astype(bool)

    neg_inf = np.where(allowed, x, -np.inf)
    row_max = neg_inf.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(allowed, np.exp(x - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out_data = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = Tensor(out_data)
    s = out.data

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return s * (g - inner)

    return _record(out, (t, vjp))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def vjp_x(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    def vjp_gain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def vjp_bias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _record(out, (x, vjp_x), (gain, vjp_gain), (bias, vjp_bias))


def dropout(x, rate: float, training: bool, rng) -> Tensor:
    """Inverted dropout: scale survivors by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = Tensor(x.data * keep)
    return _record(out, (x, lambda g: g * keep))


# ---------------------------------------------------------------------------
# named-tensor checkpoint files

_MAGIC = b"NDTNS001"


def save_tensors(path, tensors, meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata block to `path`.

    Layout: 8-byte magic/version string, u32 length + UTF-8 JSON metadata,
    u32 section count, then per section: u16 name length, name bytes,
    u8 rank, i64 dims, and the payload as little-endian float64. Everything
    is little-endian, so files round-trip bit-exactly across machines.
    """
    import json

    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path):
    """Read a file written by `save_tensors`; returns (OrderedDict, meta)."""
    import json

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint "
                         f"(bad magic {blob[:8]!r}, expected {_MAGIC!r})")
    off = 8
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}q", blob, off)
        off += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        tensors[name] = arr.astype(np.float64)
    return tensors, meta
