"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a fixed vocabulary of operations, strict
shape checking (no broadcasting beyond bias-add over rows), and a recorded
computation graph. Every non-leaf tensor remembers its inputs and a backward
closure; monotonically increasing node ids make creation order the
topological order, and ``backward`` replays the reachable subgraph in
reverse recorded order exactly once.
"""

import itertools

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_NODE_IDS = itertools.count()


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``data`` is immutable by convention once the tensor is created; only the
    ``grad`` slot is written afterwards, by the backward pass.
    """

    __slots__ = ("data", "grad", "node_id", "op", "_inputs", "_backward")

    def __init__(self, data, inputs=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.node_id = next(_NODE_IDS)
        self.op = op
        self._inputs = tuple(inputs)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.data.shape}, not scalar")
        return float(self.data.reshape(()))

    def sum(self):
        return sum_all(self)

    def backward(self):
        backward(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    def __radd__(self, other):
        return add_const(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, id={self.node_id})"


def _accumulate(t, g):
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.data.shape:
        raise ShapeError(
            f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
        )
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def graph_nodes(root):
    """All tensors reachable from ``root``, sorted in recorded order.

    Inputs are always created before the outputs that consume them, so the
    returned list is a valid topological order of the graph.
    """
    seen = set()
    stack = [root]
    out = []
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t._inputs)
    out.sort(key=lambda t: t.node_id)
    return out


def backward(loss):
    """Populate gradients of every tensor reachable from the scalar ``loss``.

    Visits each recorded operation exactly once, in reverse recorded order.
    Tensors not reachable from the loss keep ``grad=None``.
    """
    if loss.data.shape != ():
        raise ContractError(
            f"backward: loss must be a scalar, got shape {loss.data.shape}"
        )
    nodes = graph_nodes(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for t in reversed(nodes):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def find_nonfinite(root):
    """First tensor (in recorded order) under ``root`` holding NaN or Inf."""
    for t in graph_nodes(root):
        if not np.all(np.isfinite(t.data)):
            return t
    return None


def constant(data):
    """Leaf tensor intended to carry no gradient of interest."""
    return Tensor(data, op="const")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul: expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor(out_data, (a, b), bwd, "matmul")


def transpose(x, axes=None):
    out_data = np.transpose(x.data, axes)

    def bwd(g):
        if axes is None:
            _accumulate(x, np.transpose(g))
        else:
            inv = np.argsort(axes)
            _accumulate(x, np.transpose(g, inv))

    return Tensor(out_data, (x,), bwd, "transpose")


def reshape(x, shape):
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {tuple(shape)}")
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return Tensor(out_data, (x,), bwd, "reshape")


def concat_cols(parts):
    """Concatenate 2-d tensors along the column axis."""
    if not parts:
        raise ShapeError("concat_cols: empty input list")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts disagree: {[p.data.shape for p in parts]}"
            )
    out_data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def bwd(g):
        offset = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, offset : offset + w])
            offset += w

    return Tensor(out_data, tuple(parts), bwd, "concat_cols")


# ---------------------------------------------------------------------------
# elementwise arithmetic (strict shapes)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes disagree: {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _check_same_shape("add", a, b)

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(a.data + b.data, (a, b), bwd, "add")


def sub(a, b):
    _check_same_shape("sub", a, b)

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return Tensor(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    _check_same_shape("mul", a, b)

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return Tensor(a.data * b.data, (a, b), bwd, "mul")


def scale(x, c):
    c = float(c)

    def bwd(g):
        _accumulate(x, g * c)

    return Tensor(x.data * c, (x,), bwd, "scale")


def add_const(x, c):
    c = float(c)

    def bwd(g):
        _accumulate(x, g)

    return Tensor(x.data + c, (x,), bwd, "add_const")


def add_bias(x, b):
    """Row-broadcast bias add: [R, D] + [D]. The only broadcasting allowed."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"add_bias: expects [R, D] + [D], got {x.data.shape} + {b.data.shape}"
        )

    def bwd(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=0))

    return Tensor(x.data + b.data, (x, b), bwd, "add_bias")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x):
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * (x.data > 0.0))

    return Tensor(out_data, (x,), bwd, "relu")


def softplus(x):
    out_data = np.logaddexp(0.0, x.data)

    def bwd(g):
        # sigmoid(x) written as exp(x - softplus(x)) to stay overflow-free
        _accumulate(x, g * np.exp(x.data - out_data))

    return Tensor(out_data, (x,), bwd, "softplus")


def log(x):
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")

    def bwd(g):
        _accumulate(x, g / x.data)

    return Tensor(np.log(x.data), (x,), bwd, "log")


def exp(x):
    out_data = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out_data)

    return Tensor(out_data, (x,), bwd, "exp")


def sqrt(x):
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out_data = np.sqrt(x.data)

    def bwd(g):
        _accumulate(x, g * 0.5 / out_data)

    return Tensor(out_data, (x,), bwd, "sqrt")


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - inner))

    return Tensor(out_data, (x,), bwd, "softmax")


def log_softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True)) + m
    out_data = x.data - lse

    def bwd(g):
        soft = np.exp(out_data)
        _accumulate(x, g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor(out_data, (x,), bwd, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row of a 2-d tensor to zero mean / unit variance, then
    apply the per-feature affine transform ``gain * xhat + bias``."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expects 2-d input, got {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        gg = g * gain.data
        term = gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(
            axis=1, keepdims=True
        )
        _accumulate(x, term * inv)
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))

    return Tensor(out_data, (x, gain, bias), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# reductions and indexing


def sum_all(x):
    def bwd(g):
        _accumulate(x, np.full(x.data.shape, float(g)))

    return Tensor(np.asarray(x.data.sum()), (x,), bwd, "sum_all")


def embed(table, ids):
    """Gather rows of ``table`` ([V, D]) at integer positions ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embed: ids must be 1-d, got shape {ids.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"embed: table must be 2-d, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DomainError(
            f"embed: id out of range [0, {table.data.shape[0]}): {ids.tolist()}"
        )
    out_data = table.data[ids]

    def bwd(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        _accumulate(table, acc)

    return Tensor(out_data, (table,), bwd, "embed")


def take_per_row(x, ids):
    """out[i] = x[i, ids[i]] for a 2-d tensor; returns a 1-d tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.data.ndim != 2 or ids.shape != (x.data.shape[0],):
        raise ShapeError(
            f"take_per_row: got x {x.data.shape} with ids shape {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= x.data.shape[1]):
        raise DomainError(f"take_per_row: column id out of range: {ids.tolist()}")
    rows = np.arange(x.data.shape[0])
    out_data = x.data[rows, ids]

    def bwd(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, (rows, ids), g)
        _accumulate(x, acc)

    return Tensor(out_data, (x,), bwd, "take_per_row")


# ---------------------------------------------------------------------------
# convolution (frontend only)


def conv3x3(x, w, b, time_stride=2):
    """3x3 convolution over channel maps [C_in, T, F] with edge-replicate
    padding of 1 on both spatial axes.

    The time axis is subsampled by ``time_stride`` and truncated to
    floor(T / stride) output frames; the frequency axis keeps its length.
    Weights are [C_out, C_in, 3, 3] and bias [C_out].
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv3x3: input must be [C, T, F], got {x.data.shape}")
    c_in, t_len, f_len = x.data.shape
    if w.data.ndim != 4 or w.data.shape[1:] != (c_in, 3, 3):
        raise ShapeError(
            f"conv3x3: weight must be [C_out, {c_in}, 3, 3], got {w.data.shape}"
        )
    c_out = w.data.shape[0]
    if b.data.shape != (c_out,):
        raise ShapeError(f"conv3x3: bias must be ({c_out},), got {b.data.shape}")
    if t_len < time_stride:
        raise ShapeError(f"conv3x3: T={t_len} shorter than stride {time_stride}")
    t_out = t_len // time_stride

    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    # windows: [C_in, T, F, 3, 3]; subsample the time starts
    patches = windows[:, :: time_stride][:, :t_out]
    out_data = np.einsum("oiab,itfab->otf", w.data, patches, optimize=True)
    out_data = out_data + b.data[:, None, None]

    def bwd(g):
        _accumulate(b, g.sum(axis=(1, 2)))
        _accumulate(w, np.einsum("otf,itfab->oiab", g, patches, optimize=True))
        dpad = np.zeros_like(padded)
        for a in range(3):
            for c in range(3):
                contrib = np.einsum("otf,oi->itf", g, w.data[:, :, a, c])
                dpad[:, a : a + time_stride * t_out : time_stride, c : c + f_len] += (
                    contrib
                )
        dx = dpad[:, 1 : t_len + 1, 1 : f_len + 1].copy()
        # adjoint of edge-replicate padding: fold pad rows/cols/corners back
        dx[:, 0, :] += dpad[:, 0, 1 : f_len + 1]
        dx[:, t_len - 1, :] += dpad[:, t_len + 1, 1 : f_len + 1]
        dx[:, :, 0] += dpad[:, 1 : t_len + 1, 0]
        dx[:, :, f_len - 1] += dpad[:, 1 : t_len + 1, f_len + 1]
        dx[:, 0, 0] += dpad[:, 0, 0]
        dx[:, 0, f_len - 1] += dpad[:, 0, f_len + 1]
        dx[:, t_len - 1, 0] += dpad[:, t_len + 1, 0]
        dx[:, t_len - 1, f_len - 1] += dpad[:, t_len + 1, f_len + 1]
        _accumulate(x, dx)

    return Tensor(out_data, (x, w, b), bwd, "conv3x3")
