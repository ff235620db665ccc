"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built dynamically: every operation records its inputs and a
backward closure on the output tensor. `backward()` on a scalar output
walks the graph in reverse topological order, accumulates gradients (sums
over multiple uses of the same tensor), writes them to `.grad`, and then
frees the graph so parameters can be reused across training steps.

Broadcasting is deliberately restricted: elementwise operations require
identical shapes or one scalar operand (a python number or a 0-d tensor).
Shape adaptation is done with explicit `reshape` / `expand` calls. matmul
additionally supports stacked operands with equal leading dimensions, one
of which may be a plain matrix shared across the stack.
"""

from __future__ import annotations

import numpy as np

from ._kernels import col2im, im2col


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Operand values/indices outside an operation's domain."""


# Every op tag that can appear in a graph. gradcheck enforces that each of
# these has finite-difference coverage.
REGISTERED_OPS = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "sigmoid", "cos",
    "pow", "relu", "matmul", "sum", "sum_axis", "mean", "mean_axis",
    "reshape", "transpose", "expand", "slice", "concat", "softmax",
    "cross_entropy", "layernorm", "channel_affine", "conv2d",
)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._op = None
        self._freed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise DomainError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the value buffer (tensors are treated as immutable)."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        if self.ndim == 0:
            raise TypeError("len() of a 0-d tensor")
        return self.shape[0]

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def cos(self):
        return cos(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims) if axis is not None else tsum(self)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims) if axis is not None else tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def expand(self, axis, times):
        return expand(self, axis, times)

    # -- backward pass ---------------------------------------------------------

    def backward(self, into: dict | None = None) -> None:
        """Populate gradients of every reachable requires_grad tensor.

        With `into=None` gradients accumulate additively on each tensor's
        `.grad` buffer. With a dict, gradients are accumulated into the dict
        (keyed by tensor) and `.grad` is left untouched; this is the hook
        data-parallel workers use to keep private gradient maps.

        The traversed graph is freed afterwards; calling backward a second
        time through the same graph raises RuntimeError.
        """
        if self.size != 1:
            raise DomainError(f"backward root must be scalar, got shape {self.shape}")
        if self._freed:
            raise RuntimeError("backward graph already freed; rebuild the forward pass")

        topo = _toposort(self)
        gmap: dict[Tensor, np.ndarray] = {self: np.ones_like(self.data)}
        for node in reversed(topo):
            grad_out = gmap.get(node)
            if grad_out is None or node._backward is None:
                continue
            for parent, contrib in node._backward(grad_out):
                if not parent.requires_grad:
                    continue
                held = gmap.get(parent)
                gmap[parent] = contrib if held is None else held + contrib

        for t, g in gmap.items():
            if not t.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            if into is None:
                t.grad = g if t.grad is None else t.grad + g
            else:
                into[t] = g if t not in into else into[t] + g

        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._freed = True


def _toposort(root: Tensor) -> list:
    topo, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return topo


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(np.float64(x))
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _node(data: np.ndarray, parents: tuple, op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _reduce_scalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} must match exactly "
            f"(only scalar operands broadcast)")


# -- elementwise binary ops ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "add")

    def bw(g):
        return ((a, _reduce_scalar(g, a.shape)), (b, _reduce_scalar(g, b.shape)))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "sub")

    def bw(g):
        return ((a, _reduce_scalar(g, a.shape)), (b, _reduce_scalar(-g, b.shape)))

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "mul")

    def bw(g):
        return ((a, _reduce_scalar(g * b.data, a.shape)),
                (b, _reduce_scalar(g * a.data, b.shape)))

    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "div")

    def bw(g):
        return ((a, _reduce_scalar(g / b.data, a.shape)),
                (b, _reduce_scalar(-g * a.data / (b.data * b.data), b.shape)))

    return _node(a.data / b.data, (a, b), "div", bw)


# -- elementwise unary ops -------------------------------------------------


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), "neg", lambda g: ((a, -g),))


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)
    return _node(out_data, (a,), "exp", lambda g: ((a, g * out_data),))


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _node(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = _sigmoid_stable(np.atleast_1d(a.data)).reshape(a.shape)
    return _node(out_data, (a,), "sigmoid",
                 lambda g: ((a, g * out_data * (1.0 - out_data)),))


def cos(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _node(np.cos(a.data), (a,), "cos",
                 lambda g: ((a, -g * np.sin(a.data)),))


def power(a: Tensor, exponent: float) -> Tensor:
    a = _wrap(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power supports constant exponents only")
    p = float(exponent)

    def bw(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _node(a.data ** p, (a,), "pow", bw)


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def bw(g):
        return ((a, g * mask),)

    return _node(np.where(mask, a.data, 0.0), (a,), "relu", bw)


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (stack) dimensions must be identical, or one operand may be a
    plain rank-2 matrix shared across the other's stack. No other
    broadcasting is performed.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: stack dimensions of {a.shape} and {b.shape} must be equal")

    out_data = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.ndim > a.ndim:  # a was a shared matrix
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return ((a, ga), (b, gb))

    return _node(out_data, (a, b), "matmul", bw)


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        def bw(g):
            return ((a, np.full_like(a.data, float(g))),)

        return _node(np.asarray(a.data.sum()), (a,), "sum", bw)

    def bw_axis(g):
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g_exp, a.shape).copy()),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum_axis", bw_axis)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size

        def bw(g):
            return ((a, np.full_like(a.data, float(g) / n)),)

        return _node(np.asarray(a.data.mean()), (a,), "mean", bw)

    n_axis = a.shape[axis]

    def bw_axis(g):
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g_exp, a.shape).copy() / n_axis),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean_axis", bw_axis)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}: {exc}") from None
    if not out_data.flags.owndata:
        out_data = out_data.copy()

    def bw(g):
        return ((a, g.reshape(a.shape)),)

    return _node(out_data, (a,), "reshape", bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of axes for shape {a.shape}")
    inverse = np.argsort(axes)

    def bw(g):
        return ((a, g.transpose(inverse)),)

    return _node(a.data.transpose(axes).copy(), (a,), "transpose", bw)


def expand(a: Tensor, axis: int, times: int) -> Tensor:
    """Repeat a size-1 axis `times` times (the explicit form of broadcast)."""
    a = _wrap(a)
    if a.ndim == 0:
        raise ShapeError("expand: cannot expand a 0-d tensor; reshape first")
    axis = int(axis)
    if a.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of shape {a.shape} must have extent 1")

    def bw(g):
        return ((a, g.sum(axis=axis, keepdims=True)),)

    return _node(np.repeat(a.data, times, axis=axis), (a,), "expand", bw)


def tslice(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); gradients scatter back additively."""
    a = _wrap(a)
    try:
        out_data = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: index {key!r} invalid for shape {a.shape}: {exc}") from None
    if isinstance(out_data, np.ndarray):
        out_data = np.ascontiguousarray(out_data)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        return ((a, buf),)

    return _node(out_data, (a,), "slice", bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise DomainError("concat requires at least one tensor")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        idx = [slice(None)] * nd
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx[axis] = slice(int(start), int(stop))
            out.append((t, g[tuple(idx)]))
        return tuple(out)

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), "concat", bw)


# -- fused neural-net ops ------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along one axis; rows sum to 1."""
    a = _wrap(a)
    if a.size == 0:
        raise DomainError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((a, out_data * (g - dot)),)

    return _node(out_data, (a,), "softmax", bw)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log-softmax at the target class, via log-sum-exp.

    1-d logits with an int label give a scalar loss; 2-d (batch, classes)
    logits with an index array give a per-sample loss vector.
    """
    logits = _wrap(logits)
    if logits.ndim == 1:
        squeeze = True
        data = logits.data[None, :]
        labels = np.asarray([label], dtype=np.int64)
    elif logits.ndim == 2:
        squeeze = False
        data = logits.data
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (data.shape[0],):
            raise ShapeError(f"cross_entropy: {labels.shape} labels for {data.shape} logits")
    else:
        raise ShapeError(f"cross_entropy: logits must be rank 1 or 2, got {logits.shape}")

    n, c = data.shape
    if c == 0:
        raise DomainError("cross_entropy with zero classes")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"cross_entropy: label out of range [0, {c})")

    m = data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(data - m).sum(axis=1))
    losses = lse - data[np.arange(n), labels]

    def bw(g):
        probs = np.exp(data - lse[:, None])
        probs[np.arange(n), labels] -= 1.0
        gv = np.atleast_1d(g)
        grad = probs * gv[:, None]
        return ((logits, grad[0] if squeeze else grad),)

    out_data = np.asarray(losses[0]) if squeeze else losses
    return _node(out_data, (logits,), "cross_entropy", bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale/shift per feature."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: scale/shift must have shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_beta = g.sum(axis=lead)
        g_gamma = (g * xhat).sum(axis=lead)
        g_hat = g * gamma.data
        g_x = inv_std * (g_hat
                         - g_hat.mean(axis=-1, keepdims=True)
                         - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True))
        return ((x, g_x), (gamma, g_gamma), (beta, g_beta))

    return _node(out_data, (x, gamma, beta), "layernorm", bw)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift for (batch, channels, h, w) maps."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim != 4:
        raise ShapeError(f"channel_affine: expected rank-4 input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel_affine: scale/shift must have shape ({c},), "
                         f"got {gamma.shape} and {beta.shape}")
    gvec = gamma.data[None, :, None, None]
    out_data = x.data * gvec + beta.data[None, :, None, None]

    def bw(g):
        return ((x, g * gvec),
                (gamma, (g * x.data).sum(axis=(0, 2, 3))),
                (beta, g.sum(axis=(0, 2, 3))))

    return _node(out_data, (x, gamma, beta), "channel_affine", bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of (batch, cin, h, w) with (cout, cin, kh, kw).

    Lowered to im2col + matmul; the im2col/col2im kernels come from
    fadct._kernels (compiled if available, numpy fallback otherwise).
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    bsz, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    if b is not None:
        b = _wrap(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} must be ({cout},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{ww} "
                         f"with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = im2col(xp, kh, kw, stride)                       # (B, cin*kh*kw, oh*ow)
    w_flat = w.data.reshape(cout, -1)
    out_flat = w_flat @ cols                                # (B, cout, oh*ow)
    if b is not None:
        out_flat = out_flat + b.data[None, :, None]
    out_data = out_flat.reshape(bsz, cout, oh, ow)

    def bw(g):
        g_flat = g.reshape(bsz, cout, oh * ow)
        cols_local = im2col(xp, kh, kw, stride)             # recomputed to save memory
        g_w = np.matmul(g_flat, cols_local.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        g_cols = w_flat.T @ g_flat                          # (B, cin*kh*kw, oh*ow)
        g_xp = col2im(g_cols, xp.shape, kh, kw, stride)
        g_x = g_xp[:, :, padding:padding + h, padding:padding + ww] if padding else g_xp
        grads = [(x, g_x), (w, g_w)]
        if b is not None:
            grads.append((b, g_flat.sum(axis=(0, 2))))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, "conv2d", bw)
