"""Minimal dense tensors with reverse-mode automatic differentiation.

Only what the MM-DiT and the training loop need. Broadcasting is restricted:
operands of an elementwise op must either have the same rank (size-1 axes
broadcast) or the right operand is a 1-D vector matching the trailing axis.
Everything else needs an explicit ``reshape``.
"""

from __future__ import annotations

import builtins
import io
import json
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

CHECKPOINT_MAGIC = b"FLOWLAB\x00"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == b.ndim and all(x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accum(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _make(x.data * sig, (x,), backward)


# shape manipulation --------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(x.shape, ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} along axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(x, g[tuple(idx)])

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    ax = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis of size {x.shape[ax]}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _make(x.data[idx], (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to axis length {x.shape[axis]} of {x.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(narrow(x, axis, start, n))
        start += n
    return out


# reductions ----------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        _accum(pred, g * 2.0 * diff / n)
        _accum(target, -g * 2.0 * diff / n)

    return _make(np.asarray((diff * diff).mean()), (pred, target), backward)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# normalisation / activation ------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer norm over the last axis without affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gx))

    return _make(xhat, (x,), backward)


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * scale`` over the last axis; ``scale`` has the trailing size."""
    scale = as_tensor(scale)
    if scale.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm: scale {scale.shape} does not match trailing axis of {x.shape}")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    d = x.shape[-1]

    def backward(g):
        if x.requires_grad:
            gs = g * scale.data
            _accum(x, inv * (gs - xhat * (gs * xhat).sum(axis=-1, keepdims=True) / d))
        if scale.requires_grad:
            _accum(scale, (g * xhat).reshape(-1, d).sum(axis=0))

    return _make(xhat * scale.data, (x, scale), backward)


def sinusoidal_embed(t, dim: int, max_period: float = 10000.0, dtype=np.float64) -> Tensor:
    """Sine/cosine features of a batch of scalars; half cosines, half sines."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return Tensor(emb.astype(dtype))


# graph traversal -----------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaf gradients are accumulated into ``.grad``. When ``params`` is given,
    returns a name -> gradient map where unused parameters get exact zeros.
    Intermediate gradients are released after use.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # interior node, no longer needed
    if params is None:
        return {}
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between ``backward`` and central differences.

    ``f`` re-evaluates the scalar objective from the current parameter
    values. Above ``max_coords`` parameters a random subset is checked.
    The relative error denominator is ``max(|fd|, |analytic|, floor)``.
    """
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("finite_diff_check: objective is not finite")
    grads = backward(loss, params)

    coords = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    if len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"finite_diff_check: objective not finite perturbing {name}[{i}]")
        fd = (fp - fm) / (2 * h)
        an = float(grads[name].reshape(-1)[i])
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        worst = max(worst, err)
    zero_grad(params)
    return worst


# parameter registries ------------------------------------------------------


class Params(OrderedDict):
    """Name -> leaf tensor registry with stable insertion order."""

    def numel(self) -> int:
        return int(np.sum([p.data.size for p in self.values()]))

    def clone(self) -> Params:
        return Params((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}


# checkpoint container ------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes  magic b"FLOWLAB\0"
#   4 bytes  uint32 format version
#   8 bytes  uint64 header length H
#   H bytes  UTF-8 JSON header:
#            {"version": 1, "meta": {...},
#             "arrays": [{"name", "dtype" ("<f8", "<f4", "<i8"), "shape", "offset", "nbytes"}]}
#   payload  raw little-endian array bytes, C order, offsets relative to payload start


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": dict(meta or {}), "arrays": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a flowlab checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", buf.read(8))
    header = json.loads(buf.read(hlen).decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return arrays, header["meta"]


def params_from_arrays(arrays: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> Params:
    names = list(arrays) if names is None else list(names)
    return Params((n, Tensor(np.array(arrays[n]), requires_grad=True)) for n in names)
