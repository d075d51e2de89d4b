"""Dense float tensors with tape-based reverse-mode differentiation.

Every model computation goes through :class:`Tensor`.  Each differentiable
operation records its parents and a backward closure; :meth:`Tensor.backward`
replays the tape in reverse topological order.

Storage defaults to float32.  ``precision("f64")`` switches newly created
tensors to float64, which is what the finite-difference checks use.
"""
from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "precision",
    "set_precision",
    "get_dtype",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "concat",
    "broadcast_to",
    "dropout",
    "save_tensors",
    "load_tensors",
    "dump_tensors",
    "parse_tensors",
    "zero_grads",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype: type = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class CodecError(ValueError):
    """A serialized tensor file is malformed or truncated."""


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the storage dtype for newly created tensors."""
    global _dtype
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = previous


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


class Tensor:
    """An n-dimensional float array that can take part in gradient computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = np.array(data, dtype=_dtype if dtype is None else dtype, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # -- reverse mode ---------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Leaf gradients accumulate across calls; call ``zero_grad`` first for a
        fresh pass.  Intermediate tensors get their gradient overwritten.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- elementwise arithmetic ----------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other, self.dtype), -self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    # -- shape ops ------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        out = self.data.transpose(axes)
        return Tensor._from_op(out, (self,), lambda g: (g.transpose(inverse),), "transpose")

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        return Tensor._from_op(out, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold batch axes into one product instead of materializing per-batch grads
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(np.array(x.data[index]), (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    _broadcast_shape("broadcast_to", src, tuple(shape))
    out = np.broadcast_to(x.data, shape).copy()
    return Tensor._from_op(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply the affine ``gamma``/``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {x.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    denom = var + eps
    # a zero-variance slice with eps=0 collapses to 0 instead of dividing by zero
    inv = np.divide(1.0, np.sqrt(denom), out=np.zeros_like(denom), where=denom > 0)
    xhat = centered * inv
    gd = gamma.data

    def backward(g):
        gx = None
        gxhat = g * gd
        if x.requires_grad:
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x), with the exact erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._from_op((xd * cdf).astype(xd.dtype, copy=False), (x,), backward, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.dtype))


# -- serialization -----------------------------------------------------
# Layout: 8-byte little-endian header length, UTF-8 JSON header, then the raw
# little-endian payloads concatenated in header order.

_CODEC_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODEC_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def dump_tensors(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    entries, payloads = [], []
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value)
        tag = _CODEC_NAMES.get(arr.dtype)
        if tag is None:
            raise CodecError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr, dtype=_CODEC_DTYPES[tag]).tobytes())
    header_doc = {"tensors": entries}
    if metadata is not None:
        header_doc["metadata"] = metadata
    header = json.dumps(header_doc, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(payloads)


def parse_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise CodecError("truncated tensor file: missing header length")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if 8 + hlen > len(blob):
        raise CodecError(f"header length {hlen} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError(f"unreadable tensor header: {exc}") from None
    offset = 8 + hlen
    out: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        dt = _CODEC_DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise CodecError(f"tensor {entry.get('name')!r}: unknown dtype {entry.get('dtype')!r}")
        shape = tuple(int(n) for n in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(blob):
            raise CodecError(f"payload for {entry['name']!r} is truncated")
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        out[entry["name"]] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        offset += nbytes
    if offset != len(blob):
        raise CodecError(f"payload size mismatch: header describes {offset} bytes, file has {len(blob)}")
    return out, header.get("metadata", {})


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(dump_tensors(tensors, metadata))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    return parse_tensors(Path(path).read_bytes())


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
