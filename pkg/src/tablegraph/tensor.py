"""Dense float64 tensors with a reverse-mode differentiation tape.

Arrays are numpy throughout; this module adds the tape, named parameters
and the binary checkpoint format. Only the operations the network needs
exist, each with an analytic backward rule. Forward results never alias
their inputs, so a tensor's value is stable for the lifetime of a tape.

Checkpoint wire format (little-endian): magic ``NCGM``, version u32, then
one record per parameter: name length u32, name bytes (utf-8), rank u32,
one u32 per dimension, and the row-major float64 payload. Records run to
end of file.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

from .errors import ContractError, ShapeError


class Tensor:
    """Array node of the tape; leaves carry data, interior nodes a backward rule."""

    __slots__ = ("data", "requires_grad", "parents", "backprop")

    def __init__(self, data, requires_grad=False, parents=(), backprop=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backprop = backprop

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data, parents, backprop):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backprop=backprop)
    return Tensor(data)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product of equal-shape tensors."""
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return _node(a.data + float(c), (a,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a length-n bias over the rows of an m-by-n tensor."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias: x {x.data.shape} with bias {b.data.shape}")
    return _node(x.data + b.data[None, :], (x, b), lambda g: (g, g.sum(axis=0)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors with agreeing inner dimensions."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: needs 2-D, got {a.data.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# row-wise normalizations


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: needs 2-D, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backprop(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) * y,)

    return _node(y, (x,), backprop)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows: needs 2-D, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    soft = np.exp(y)

    def backprop(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _node(y, (x,), backprop)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: needs 2-D, got {x.data.shape}")
    n = x.data.shape[1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} for width {n}")
    if eps <= 0.0:
        raise ContractError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data[None, :] + beta.data[None, :]

    def backprop(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data[None, :]
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * inv
        return (dx, dgamma, dbeta)

    return _node(y, (x, gamma, beta), backprop)


# ---------------------------------------------------------------------------
# structure


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat_rows: empty input")
    widths = {p.data.shape[1] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[p.data.shape for p in parts]}")
    offsets = np.cumsum([p.data.shape[0] for p in parts])[:-1]

    def backprop(g):
        return tuple(np.split(g, offsets, axis=0))

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backprop)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat_cols: empty input")
    heights = {p.data.shape[0] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(heights) != 1:
        raise ShapeError(f"concat_cols: incompatible shapes {[p.data.shape for p in parts]}")
    offsets = np.cumsum([p.data.shape[1] for p in parts])[:-1]

    def backprop(g):
        return tuple(np.split(g, offsets, axis=1))

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backprop)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows by index; index -1 yields a zero row."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: needs 2-D, got {x.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < -1 or idx.max() >= x.data.shape[0]):
        raise ContractError(f"take_rows: index out of range for {x.data.shape[0]} rows")
    valid = idx >= 0
    y = np.zeros((idx.size, x.data.shape[1]))
    y[valid] = x.data[idx[valid]]

    def backprop(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx[valid], g[valid])
        return (dx,)

    return _node(y, (x,), backprop)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] of {x.data.shape}")

    def backprop(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _node(x.data[:, start:stop].copy(), (x,), backprop)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: {x.data.shape} to {shape}")
    old = x.data.shape
    return _node(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),))


def pick(x: Tensor, cols) -> Tensor:
    """Per-row column gather: result[i, 0] = x[i, cols[i]]."""
    if x.data.ndim != 2:
        raise ShapeError(f"pick: needs 2-D, got {x.data.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    m, n = x.data.shape
    if cols.shape != (m,) or (cols.size and (cols.min() < 0 or cols.max() >= n)):
        raise ContractError(f"pick: bad column index array for shape {x.data.shape}")
    rows = np.arange(m)
    y = x.data[rows, cols][:, None]

    def backprop(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, cols), g[:, 0])
        return (dx,)

    return _node(y, (x,), backprop)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.data.shape, x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sum_cols(x: Tensor) -> Tensor:
    """Sum over the column axis: (m, n) -> (m, 1)."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_cols: needs 2-D, got {x.data.shape}")
    n = x.data.shape[1]
    return _node(x.data.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, n, axis=1),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the row axis: (m, n) -> (1, n)."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows: needs 2-D, got {x.data.shape}")
    m = x.data.shape[0]
    return _node(x.data.sum(axis=0, keepdims=True), (x,), lambda g: (np.repeat(g, m, axis=0),))


def max_rows(x: Tensor) -> Tensor:
    """Column-wise maximum over rows: (m, n) -> (1, n); ties route to the first row."""
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"max_rows: needs a non-empty 2-D tensor, got {x.data.shape}")
    arg = x.data.argmax(axis=0)
    cols = np.arange(x.data.shape[1])
    y = x.data[arg, cols][None, :]

    def backprop(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (arg, cols), g[0])
        return (dx,)

    return _node(y, (x,), backprop)


# ---------------------------------------------------------------------------
# parameters and reverse pass


class Parameter:
    """A named leaf tensor. Names are unique slash-separated paths."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, value):
        self.name = str(name)
        self.tensor = Tensor(value, requires_grad=True)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


class ParamStore:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p.tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def array(self, name: str) -> np.ndarray:
        return self._params[name].tensor.data

    def set_array(self, name: str, value: np.ndarray):
        p = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.tensor.data.shape:
            raise ShapeError(f"parameter {name!r}: cannot assign shape {value.shape} over {p.tensor.data.shape}")
        p.tensor.data = value

    def all_finite(self) -> bool:
        return all(np.isfinite(p.tensor.data).all() for p in self._params.values())


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, parameters) -> dict[str, Tensor]:
    """Gradients of a scalar loss for every parameter, zeros if unreachable."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if isinstance(parameters, ParamStore):
        parameters = parameters.parameters()
    parameters = list(parameters)

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None or node.backprop is None:
                continue
            for parent, pg in zip(node.parents, node.backprop(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    out: dict[str, Tensor] = {}
    for p in parameters:
        g = grads.get(id(p.tensor))
        out[p.name] = Tensor(g if g is not None else np.zeros_like(p.tensor.data))
    return out


# ---------------------------------------------------------------------------
# checkpoint io

CHECKPOINT_MAGIC = b"NCGM"
CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParamStore, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for p in store.parameters():
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.tensor.data, dtype="<f8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        if name in out:
            raise ContractError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr.astype(np.float64)
    return out


def restore_checkpoint(store: ParamStore, path):
    """Load a checkpoint into an existing store; names and shapes must match."""
    values = load_checkpoint(path)
    missing = [n for n in store.names() if n not in values]
    extra = [n for n in values if n not in store]
    if missing or extra:
        raise ContractError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in values.items():
        store.set_array(name, arr)
