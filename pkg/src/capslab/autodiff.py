"""Minimal dense-tensor engine with reverse-mode differentiation.

A ``Tensor`` wraps a float32/float64 numpy array.  Every operation
records its inputs and a VJP closure on the output tensor, so the
executed graph is the DAG of tensors itself; ``backward`` walks it in
reverse topological order.  Gradients accumulate additively on tracked
leaves (supports weight sharing); clearing them is explicit.

The operation set is fixed: matmul, conv2d, a small elementwise family,
reductions, an L2 norm over the last axis, softmax, structural
reshape/transpose, and numerically stable fused classification losses.
There is no general broadcasting and no GPU path.  Training runs in
float32; verification (gradient checking, oracle comparisons) runs the
same code in float64.

Set ``CAPSLAB_CHECK_FINITE=1`` to assert after every forward op that no
NaN/Inf appeared.
"""

import os

import numpy as np

from . import kernels
from .errors import ShapeError

_check_finite = os.environ.get("CAPSLAB_CHECK_FINITE", "") == "1"
_grad_enabled = True


def set_check_finite(enabled):
    """Toggle NaN/Inf assertions after every forward operation."""
    global _check_finite
    _check_finite = bool(enabled)


class no_grad:
    """Context manager: skip tape recording (evaluation-only forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A new leaf sharing this tensor's values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self.op!r})"


def _result(data, parents, vjp, op):
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.op = op
    out.parents = tuple(parents) if out.requires_grad else ()
    out._vjp = vjp if out.requires_grad else None
    return out


def _as_const(x, name, op):
    """Accept a Tensor or array-like as a non-differentiable operand."""
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x)
    t.grad = None
    t.requires_grad = False
    t.op = "leaf"
    t.parents = ()
    t._vjp = None
    return t


def backward(loss):
    """Populate ``.grad`` on every tracked leaf reachable from ``loss``.

    Gradients add into any existing ``.grad`` buffers; calling twice
    without clearing doubles them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()  # accumulator buffers we allocated (safe for in-place adds)
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key not in grads:
                grads[key] = pg
            elif key in owned:
                np.add(grads[key], pg, out=grads[key])
            else:
                grads[key] = grads[key] + pg
                owned.add(key)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), vjp, "matmul")


def conv2d(x, kernel, bias, stride):
    """Valid (no padding) cross-correlation with per-channel bias."""
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive integer, got {stride!r}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    b_, cin, h, w = x.data.shape
    cout, kcin, k, k2 = kernel.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {kernel.data.shape}")
    if kcin != cin:
        raise ShapeError(
            f"conv2d: kernel expects {kcin} input channels, input has {cin} "
            f"(input {x.data.shape}, kernel {kernel.data.shape})"
        )
    if k > h or k > w:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} larger than input {h}x{w} (no padding is applied)"
        )
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")

    x_shape = x.data.shape
    k_shape = kernel.data.shape
    out, ctx = kernels.conv2d_forward(x.data, kernel.data, bias.data, stride)
    ctx_cell = [ctx]  # released after the first backward; later passes recompute

    def vjp(g):
        g = np.ascontiguousarray(g)
        saved = ctx_cell[0]
        ctx_cell[0] = None
        grads = (
            kernels.conv2d_backward_input(g, kernel.data, x_shape, stride, saved),
            kernels.conv2d_backward_kernel(g, x.data, k_shape, stride, saved),
            g.sum(axis=(0, 2, 3)),
        )
        kernels.release_buffer(saved)
        return grads

    result = _result(out, (x, kernel, bias), vjp, "conv2d")
    if not result.requires_grad:
        kernels.release_buffer(ctx_cell[0])
        ctx_cell[0] = None
    return result


# ---------------------------------------------------------------------------
# elementwise


def relu(x):
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _result(out, (x,), vjp, "relu")


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), vjp, "sigmoid")


def square(x):
    def vjp(g):
        return (g * (2.0 * x.data),)

    return _result(x.data * x.data, (x,), vjp, "square")


def add_scalar(x, c):
    c = float(c)

    def vjp(g):
        return (g,)

    return _result(x.data + c, (x,), vjp, "add_scalar")


def mul_scalar(x, c):
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result(x.data * c, (x,), vjp, "mul_scalar")


def bias_add(x, bias):
    """Add a length-N bias vector along the last axis of x (gradient sums the rest)."""
    if bias.data.ndim != 1 or x.data.shape[-1] != bias.data.shape[0]:
        raise ShapeError(f"bias_add: {x.data.shape} + {bias.data.shape}")
    lead = tuple(range(x.data.ndim - 1))

    def vjp(g):
        return g, g.sum(axis=lead)

    return _result(x.data + bias.data, (x, bias), vjp, "bias_add")


def _binary(a, b, op):
    b = _as_const(b, "b", op)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes differ {a.data.shape} vs {b.data.shape}")
    return a, b


def add(a, b):
    a, b = _binary(a, b, "add")

    def vjp(g):
        return g, g

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _binary(a, b, "sub")

    def vjp(g):
        return g, -g

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _binary(a, b, "mul")

    def vjp(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), vjp, "mul")


# ---------------------------------------------------------------------------
# reductions and norms


def _norm_axes(axes, ndim):
    if axes is None:
        axes = tuple(range(ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(int(a) for a in axes)
    norm = tuple(a + ndim if a < 0 else a for a in axes)
    for a in norm:
        if not 0 <= a < ndim:
            raise ShapeError(f"reduce: axis {a} out of range for {ndim}-d tensor")
    if len(set(norm)) != len(norm):
        raise ShapeError(f"reduce: duplicate axes {axes}")
    return norm


def _expand(g, axes, shape):
    for a in sorted(axes):
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axes=None):
    axes = _norm_axes(axes, x.data.ndim)
    out = x.data.sum(axis=axes if axes else None)
    shape = x.data.shape

    def vjp(g):
        return (_expand(g, axes, shape).copy(),)

    return _result(np.asarray(out), (x,), vjp, "reduce_sum")


def reduce_mean(x, axes=None):
    axes = _norm_axes(axes, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    out = x.data.mean(axis=axes if axes else None)
    shape = x.data.shape

    def vjp(g):
        return (_expand(g / count, axes, shape).copy(),)

    return _result(np.asarray(out), (x,), vjp, "reduce_mean")


def l2_norm_lastaxis(x):
    """Euclidean norm along the last axis; zero input maps to zero gradient."""
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise ShapeError(f"l2_norm_lastaxis: needs a non-empty last axis, got {x.data.shape}")
    out = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (g[..., None] * x.data / safe[..., None] * (out > 0)[..., None],)

    return _result(out, (x,), vjp, "l2_norm")


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), vjp, "softmax")


# ---------------------------------------------------------------------------
# structural


def reshape(x, shape):
    shape = tuple(shape)
    old = x.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), vjp, "transpose")


# ---------------------------------------------------------------------------
# fused classification losses (stable log computations)


def cross_entropy_with_logits(logits, labels):
    """Mean softmax cross-entropy; ``labels`` is an int class vector."""
    labels = np.asarray(labels)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    probs = e / se
    rows = np.arange(z.shape[0])
    nll = (np.log(se)[:, 0] + m[:, 0]) - z[rows, labels]
    out = np.asarray(nll.mean(), dtype=z.dtype)

    def vjp(g):
        gz = probs.copy()
        gz[rows, labels] -= 1.0
        return (gz * (g / z.shape[0]),)

    return _result(out, (logits,), vjp, "cross_entropy")


def bce_with_logits(logits, targets):
    """Mean (over batch) summed binary cross-entropy on logits vs multi-hot targets."""
    targets = np.asarray(targets)
    z = logits.data
    if z.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {targets.shape}")
    per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.sum(axis=-1).mean(), dtype=z.dtype)
    s = 1.0 / (1.0 + np.exp(-z))

    def vjp(g):
        return ((s - targets) * (g / z.shape[0]),)

    return _result(out, (logits,), vjp, "bce_with_logits")


def bce_on_probs(p, targets, eps=1e-7):
    """Binary cross-entropy on probabilities already in [0, 1)."""
    targets = np.asarray(targets)
    q = p.data
    if q.shape != targets.shape:
        raise ShapeError(f"bce_on_probs: probs {q.shape} vs targets {targets.shape}")
    per = -(targets * np.log(q + eps) + (1.0 - targets) * np.log(1.0 - q + eps))
    out = np.asarray(per.sum(axis=-1).mean(), dtype=q.dtype)

    def vjp(g):
        gq = -targets / (q + eps) + (1.0 - targets) / (1.0 - q + eps)
        return (gq * (g / q.shape[0]),)

    return _result(out, (p,), vjp, "bce_on_probs")
