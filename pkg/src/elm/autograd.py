"""Dense tensors with reverse-mode differentiation, on numpy storage.

The compute graph is implicit: each op returns a Tensor holding its parent
tensors and a closure that maps the output gradient to parent gradients.
`backward` topologically sorts that graph (iteratively, so deep unrolled
models do not hit the recursion limit) and accumulates gradients into the
`.grad` slot of every leaf that requires them. The graph is acyclic by
construction since ops only ever consume already-built tensors.

Every op output is checked for NaN/inf and a NumericError raised at the
first non-finite value, so numeric breakdown surfaces at the op that
produced it rather than three modules later.

All ops are deterministic: same inputs, same dtype, same results.
float32 is the training dtype; float64 is used for verification passes.
"""

import math

import numpy as np

from .errors import ContractError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NumericError(
            f"{op}: {bad} non-finite value(s) in output of shape {arr.shape}"
        )


class Tensor:
    """A numpy array plus optional tape bookkeeping.

    Leaves are created with `tensor` (trainable) or `constant`. Interior
    nodes are created by ops and keep (parents, vjp) so backward can walk
    the tape. `.grad` is only ever populated on leaves with
    requires_grad=True.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are folded in directly, not wrapped
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(scale(self, -1.0), -other) if np.isscalar(other) else sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=np.float32, requires_grad=True) -> Tensor:
    """Create a leaf tensor, by default trainable."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    """Create a non-trainable leaf (inputs, masks, targets)."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, op: str, parents, vjp) -> Tensor:
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, "div", (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def vjp(g):
        return (g * c,)

    return _make(out, "scale", (x,), vjp)


def pow_scalar(x: Tensor, k: float) -> Tensor:
    k = float(k)
    out = x.data**k

    def vjp(g):
        return (g * k * x.data ** (k - 1.0),)

    return _make(out, "pow", (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _make(out, "exp", (x,), vjp)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _make(out, "log", (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _make(out, "sqrt", (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, "tanh", (x,), vjp)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """Elementwise max(x, lo); zero gradient where the floor is active."""
    lo = float(lo)
    out = np.maximum(x.data, lo)

    def vjp(g):
        return (g * (x.data > lo),)

    return _make(out, "clamp_min", (x,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        return (g * local,)

    return _make(out, "gelu", (x,), vjp)


# ---------------------------------------------------------------------------
# shape / contraction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(
            f"matmul expects >=2-D operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, "transpose", (x,), vjp)


def swap_last(x: Tensor) -> Tensor:
    """Swap the last two axes (batched matrix transpose)."""
    out = np.swapaxes(x.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(out, "swap_last", (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, "reshape", (x,), vjp)


def _restore_axes(g: np.ndarray, in_shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(in_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_restore_axes(np.asarray(g), x.shape, axis, keepdims).copy(),)

    return _make(np.asarray(out), "sum", (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.size // np.asarray(out).size

    def vjp(g):
        return (
            _restore_axes(np.asarray(g), x.shape, axis, keepdims) / count,
        )

    return _make(np.asarray(out), "mean", (x,), vjp)


# ---------------------------------------------------------------------------
# fused neural-net ops


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, "softmax", (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ContractError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match "
            f"feature dim of input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    out = xhat * gain.data + bias.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=reduce_axes)
        g_bias = g.sum(axis=reduce_axes)
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return gx, g_gain, g_bias

    return _make(out, "layer_norm", (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# indexing


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of `table` selected by an integer id array; scatter-add backward."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ContractError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, "embedding", (table,), vjp)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows along axis 0 by integer index."""
    rows = np.asarray(rows)
    out = x.data[rows]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)

    return _make(out, "take_rows", (x,), vjp)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one element along the last axis per leading position."""
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (gx,)

    return _make(out, "gather_last", (x,), vjp)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor):
    """Iterative postorder over the tape (parents before children)."""
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every trainable leaf.

    `loss` must hold exactly one element. Re-running backward adds into
    existing `.grad` slots, which is what gradient accumulation wants;
    callers that do not want that zero the grads first.
    """
    if loss.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.shape}"
        )
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


def gradients(loss: Tensor, leaves: dict) -> dict:
    """Gradients for a named dict of leaves; zeros for unreachable leaves.

    Does not disturb `.grad` slots: grads are computed into a scratch copy
    and returned as plain arrays.
    """
    saved = {name: t.grad for name, t in leaves.items()}
    for t in leaves.values():
        t.grad = None
    backward(loss)
    out = {}
    for name, t in leaves.items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = saved[name]
    return out


# ---------------------------------------------------------------------------
# spectra


def svd_spectrum(x) -> np.ndarray:
    """Singular values of a 2-D array, descending, as float64.

    Computed in double precision regardless of input dtype so downstream
    energy ratios are insensitive to the training dtype.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 2:
        raise ContractError(f"svd_spectrum expects a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("svd_spectrum: non-finite input")
    try:
        return np.linalg.svd(arr.astype(np.float64), compute_uv=False)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"svd failed to converge: {e}") from e
