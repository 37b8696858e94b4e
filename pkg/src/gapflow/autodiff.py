"""Reverse-mode autodiff over dense numpy arrays.

A small tape-based engine: every differentiable operation that runs while a
:class:`GradTape` is active appends itself to the tape, and the backward pass
replays the tape in exact reverse execution order. Tensors are immutable by
convention (only the optimizer writes into ``data`` between passes), so
read-only sharing across threads is safe; each thread keeps its own tape stack.

Only what the sequence model needs is implemented: broadcasting elementwise
arithmetic, batched matmul, softmax / layer norm, reductions, shape moves,
gather into a learned bias table, and two activations. No fusion, no GPU.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "as_tensor",
    "matmul",
    "softmax_lastdim",
    "layer_norm",
    "concat",
    "interleave_lastdim",
    "bias_lookup",
    "silu",
    "gelu",
    "gradient_check",
    "gradient_check_entries",
    "save_tensor",
    "load_tensor",
    "save_named_tensors",
    "load_named_tensors",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records operations in execution order; one tape per forward+backward pass.

    Used as a context manager::

        with GradTape() as tape:
            loss = ...
        tape.backward(loss, leaves=params.values())
    """

    def __init__(self):
        self._ops = []  # (out, parents, backward_fn) in execution order

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss, leaves=()):
        """Propagate adjoints from a scalar loss back to every participating leaf.

        Visits recorded ops in exact reverse execution order (which is a reverse
        topological order of the graph). Sets ``.grad`` on each requires-grad
        leaf that participated; leaves passed via ``leaves`` that did not
        participate receive an exact zero gradient.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if not self._ops:
            raise RuntimeError("backward on an empty tape")

        adjoint = {id(loss): np.ones_like(loss.data)}
        owner = {id(loss): loss}
        for out, parents, backward_fn in reversed(self._ops):
            g = adjoint.pop(id(out), None)
            owner.pop(id(out), None)
            if g is None:
                continue
            for parent, contrib in zip(parents, backward_fn(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + contrib
                else:
                    adjoint[key] = contrib
                    owner[key] = parent
        for key, grad in adjoint.items():
            leaf = owner[key]
            leaf.grad = np.asarray(grad)  # not ascontiguousarray: that would promote 0-d to 1-d
        for leaf in leaves:
            if leaf.requires_grad and id(leaf) not in adjoint:
                leaf.grad = np.zeros_like(leaf.data)


def _record(out, parents, backward_fn):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._ops.append((out, parents, backward_fn))


class Tensor:
    """Dense real-valued array with optional gradient tracking.

    ``data`` is a float32/float64 numpy array. Non-finite values are rejected
    at construction (the module boundary); internal op results skip the check.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor rejects NaN/Inf values at construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

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
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x, dtype=None):
    """Lift arrays/scalars to a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


def _coerce_pair(a, b):
    """Lift operands, matching a bare Python/numpy scalar to the Tensor's dtype
    so float32 graphs are not silently promoted to float64."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = Tensor._wrap(np.asarray(b, dtype=a.data.dtype), False)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        a = Tensor._wrap(np.asarray(a, dtype=b.data.dtype), False)
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops -------------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    out = Tensor._wrap(a.data + b.data, a.requires_grad or b.requires_grad)
    ash, bsh = a.data.shape, b.data.shape
    _record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))
    return out


def sub(a, b):
    a, b = _coerce_pair(a, b)
    out = Tensor._wrap(a.data - b.data, a.requires_grad or b.requires_grad)
    ash, bsh = a.data.shape, b.data.shape
    _record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))
    return out


def mul(a, b):
    a, b = _coerce_pair(a, b)
    out = Tensor._wrap(a.data * b.data, a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))
    return out


def div(a, b):
    a, b = _coerce_pair(a, b)
    out = Tensor._wrap(a.data / b.data, a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )
    return out


def neg(a):
    a = as_tensor(a)
    out = Tensor._wrap(-a.data, a.requires_grad)
    _record(out, (a,), lambda g: (-g,))
    return out


def pow_scalar(a, p):
    if not isinstance(p, (int, float)):
        raise TypeError("only scalar exponents are supported")
    a = as_tensor(a)
    out = Tensor._wrap(a.data ** p, a.requires_grad)
    ad = a.data
    _record(out, (a,), lambda g: (g * p * ad ** (p - 1),))
    return out


def silu(a):
    """x * sigmoid(x); the conditioning-path nonlinearity."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor._wrap(a.data * s, a.requires_grad)
    ad = a.data
    _record(out, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float: keeps float32 graphs float32


def gelu(a):
    """Gaussian error linear unit (tanh approximation)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = Tensor._wrap(0.5 * x * (1.0 + t), a.requires_grad)

    def backward(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    _record(out, (a,), backward)
    return out


# -- matmul ----------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product over the last two axes, broadcasting the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor._wrap(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def backward(g):
        # stacked activations x 2-d weight: flatten to one GEMM per gradient
        if bd.ndim == 2 and ad.ndim >= 2:
            ga = np.matmul(g, np.ascontiguousarray(bd.T)).reshape(ad.shape)
            gb = np.matmul(
                ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1])
            )
            return ga, gb
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    _record(out, (a, b), backward)
    return out


# -- normalization / softmax -------------------------------------------------


def softmax_lastdim(x):
    """Row-stochastic softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.data.size == 0 or x.data.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y, x.requires_grad)
    _record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))
    return out


def layer_norm(x, eps=1e-5):
    """Normalize the last (channel) axis to zero mean / unit variance, no affine."""
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.data.shape[-1] == 0:
        raise ShapeError("layer_norm over a zero-length channel dimension")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = Tensor._wrap(y, x.requires_grad)

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    _record(out, (x,), backward)
    return out


# -- reductions --------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor._wrap(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad)
    shape = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    _record(out, (x,), backward)
    return out


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor._wrap(x.data.mean(axis=axis, keepdims=keepdims), x.requires_grad)
    shape = x.data.shape
    n = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    _record(out, (x,), backward)
    return out


# -- shape moves --------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor._wrap(x.data.reshape(shape), x.requires_grad)
    orig = x.data.shape
    _record(out, (x,), lambda g: (g.reshape(orig),))
    return out


def transpose(x, axes):
    x = as_tensor(x)
    out = Tensor._wrap(np.transpose(x.data, axes), x.requires_grad)
    inv = tuple(np.argsort(axes))
    _record(out, (x,), lambda g: (np.transpose(g, inv),))
    return out


def getitem(x, idx):
    """Basic indexing (ints/slices); every output element maps to one input element."""
    x = as_tensor(x)
    out = Tensor._wrap(x.data[idx], x.requires_grad)
    shape = x.data.shape

    def backward(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[idx] = g
        return (buf,)

    _record(out, (x,), backward)
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor._wrap(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    _record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))
    return out


def interleave_lastdim(a, b):
    """Zip two equal-shaped tensors along a new last-axis pairing: out[..., 0::2] = a."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"interleave operands differ: {a.data.shape} vs {b.data.shape}")
    shape = a.data.shape[:-1] + (2 * a.data.shape[-1],)
    buf = np.empty(shape, dtype=np.result_type(a.data, b.data))
    buf[..., 0::2] = a.data
    buf[..., 1::2] = b.data
    out = Tensor._wrap(buf, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (g[..., 0::2], g[..., 1::2]))
    return out


def bias_lookup(table, ids):
    """Gather per-head bias values: table (heads, n_buckets), ids integer (..., Lq, Lk).

    Returns (..., heads, Lq, Lk); gradients scatter-add back into the table.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[1]:
        raise IndexError(
            f"bucket ids in [{ids.min()}, {ids.max()}] exceed table size {table.data.shape[1]}"
        )
    gathered = table.data[:, ids]  # (heads, ..., Lq, Lk)
    out_data = np.moveaxis(gathered, 0, -3)
    out = Tensor._wrap(np.ascontiguousarray(out_data), table.requires_grad)
    shape = table.data.shape

    def backward(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, (slice(None), ids), np.moveaxis(g, -3, 0))
        return (buf,)

    _record(out, (table,), backward)
    return out


# -- gradient checking ---------------------------------------------------------


def gradient_check(fn, inputs, h=1e-5):
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` rebuilds the forward pass from ``inputs`` (list of Tensors) on every
    call. Returns the worst normalized error max|a-n| / max(|n|inf, |a|inf, 1e-8)
    over all inputs. Inputs should be double precision.
    """
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss, leaves=inputs)
    analytic = [np.array(t.grad) for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        numeric = numeric.reshape(t.data.shape)
        denom = max(np.abs(numeric).max(), np.abs(a).max(), 1e-8)
        worst = max(worst, float(np.abs(numeric - a).max() / denom))
    return worst


def gradient_check_entries(fn, params, entries, h=1e-5):
    """Finite-difference check on selected scalar entries of named parameters.

    ``entries`` is a list of (name, flat_index). Returns the worst per-entry
    error |a-n| / max(|n|, |a|, 1e-6). Used for end-to-end model checks where
    exhaustive differencing is too slow.
    """
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss, leaves=list(params.values()))

    worst = 0.0
    for name, flat_index in entries:
        t = params[name]
        a = float(t.grad.reshape(-1)[flat_index])
        flat = t.data.reshape(-1)
        orig = flat[flat_index]
        flat[flat_index] = orig + h
        up = fn().item()
        flat[flat_index] = orig - h
        down = fn().item()
        flat[flat_index] = orig
        n = (up - down) / (2 * h)
        err = abs(a - n) / max(abs(n), abs(a), 1e-6)
        worst = max(worst, err)
    return worst


# -- serialization ---------------------------------------------------------------

_HEADER_ALIGN = 64


def _encode_header(meta):
    meta = dict(meta, byte_offset=0)
    for _ in range(4):
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        padded = ((len(blob) + 1 + _HEADER_ALIGN - 1) // _HEADER_ALIGN) * _HEADER_ALIGN
        if meta["byte_offset"] == padded:
            break
        meta["byte_offset"] = padded
    return blob + b" " * (padded - len(blob) - 1) + b"\n"


def save_tensor(path, array):
    """Write one array: JSON header {dtype, shape, byte_offset}, then raw little-endian values."""
    arr = np.asarray(array)  # asarray, not ascontiguousarray: 0-d shapes must survive
    le = arr.dtype.newbyteorder("<")
    header = _encode_header({"dtype": le.str, "shape": list(arr.shape)})
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype(le, copy=False).tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        f.seek(header["byte_offset"])
        raw = f.read()
    arr = np.frombuffer(raw, dtype=np.dtype(header["dtype"]))
    return arr.reshape(header["shape"]).astype(np.dtype(header["dtype"]).newbyteorder("="))


def _sanitize(name):
    return "".join(c if (c.isalnum() or c in "._-") else "_" for c in name)


def save_named_tensors(directory, named):
    """One tensor file per name plus a manifest listing all names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        fname = _sanitize(name) + ".bin"
        save_tensor(directory / fname, arr)
        files[name] = fname
    manifest = {"format": "gapflow-tensor-v1", "tensors": files}
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_named_tensors(directory):
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    return {name: load_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
