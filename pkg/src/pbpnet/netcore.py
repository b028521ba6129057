"""Small reverse-mode autodiff over NumPy arrays.

A :class:`Tensor` records the operation that produced it together with a
closure computing the vector-Jacobian product for its inputs. Calling
``loss.backward()`` linearises the reachable graph into topological order
and walks it once in reverse, summing gradients where a value fans out.
Only leaves that ask for it (parameters) keep a ``.grad``.

The array kernels for convolution, pooling and the loss are exposed as
plain functions as well so they can be checked in isolation.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.op = "leaf"
        self.parents = ()
        self.vjp = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        Graph.trace(self).backward(grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp, op):
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


@dataclass
class Graph:
    """Operation records reachable from a root, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root):
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
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, grad=None):
        if not self.nodes:
            return
        root = self.nodes[-1]
        if grad is None:
            if root.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar root")
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# -- structural ops -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a, factor):
    factor = float(factor)
    return _node(a.data * a.dtype.type(factor), (a,),
                 lambda g: (g * g.dtype.type(factor),), "scale")


def clip(a, lo, hi):
    """Clamp values; the gradient is passed only where no clamping happened."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def reshape(a, shape):
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a, index):
    """Basic (slice/integer) indexing."""
    src, dtype = a.shape, a.dtype

    def vjp(g):
        out = np.zeros(src, dtype=dtype)
        out[index] = g
        return (out,)

    return _node(a.data[index], (a,), vjp, "getitem")


def take(a, indices, axis=-1):
    indices = np.asarray(indices)
    axis = axis % a.ndim
    src = a.shape

    def vjp(g):
        out = np.zeros(src, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(a.data, indices, axis=axis), (a,), vjp, "take")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def sum_axis(a, axis):
    src = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _node(a.data.sum(axis=axis), (a,), vjp, "sum")


def bmm(a, b):
    """Batched matrix product ``(B, N, P) @ (B, P, Q)``."""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), vjp, "bmm")


# -- layers -------------------------------------------------------------------

def dense(x, w, b):
    """Affine map over the last axis: ``x @ w + b``.

    Leading axes of ``x`` are treated as batch.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data + b.data

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        dx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        return dx, x2.T @ g2, g2.sum(axis=0)

    return _node(y.reshape(x.shape[:-1] + (w.shape[1],)), (x, w, b), vjp, "dense")


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                 lambda g: (g * mask,), "relu")


def _conv_padding(kh, kw, pad):
    if pad == "valid":
        return 0, 0
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        return (kh - 1) // 2, (kw - 1) // 2
    raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")


def _im2col(x, kh, kw, stride, pad):
    ph, pw = _conv_padding(kh, kw, pad)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    # (B, Ho, Wo, Cin, kh, kw) -> rows ordered (kh, kw, Cin) to match the kernel layout
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, -1)
    return cols, (b, ho, wo), xp.shape


def conv2d_forward(x, k, stride=1, pad="same"):
    """Cross-correlate ``x`` (B, H, W, Cin) with ``k`` (Kh, Kw, Cin, Cout)."""
    kh, kw, cin, cout = k.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, k {k.shape}")
    cols, (b, ho, wo), _ = _im2col(x, kh, kw, stride, pad)
    return (cols @ k.reshape(-1, cout)).reshape(b, ho, wo, cout)


def conv2d_vjp(x, k, g, stride=1, pad="same", cols=None):
    """Return ``(dx, dk)`` for upstream gradient ``g`` of :func:`conv2d_forward`."""
    kh, kw, cin, cout = k.shape
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride, pad)
    b, ho, wo, _ = g.shape
    g2 = g.reshape(-1, cout)
    dk = (cols.T @ g2).reshape(k.shape)
    dcols = (g2 @ k.reshape(-1, cout).T).reshape(b, ho, wo, kh, kw, cin)
    ph, pw = _conv_padding(kh, kw, pad)
    dxp = np.zeros((b, x.shape[1] + 2 * ph, x.shape[2] + 2 * pw, cin), dtype=g.dtype)
    for a in range(kh):
        for c in range(kw):
            dxp[:, a:a + stride * ho:stride, c:c + stride * wo:stride] += dcols[:, :, :, a, c]
    dx = dxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2]]
    return dx, dk


def conv2d(x, k, b=None, stride=1, pad="same"):
    x, k = as_tensor(x), as_tensor(k)
    kh, kw, cin, cout = k.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, k {k.shape}")
    cols, (bs, ho, wo), _ = _im2col(x.data, kh, kw, stride, pad)
    y = (cols @ k.data.reshape(-1, cout)).reshape(bs, ho, wo, cout)
    parents = (x, k)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        parents = (x, k, b)

    def vjp(g):
        if x.requires_grad:
            dx, dk = conv2d_vjp(x.data, k.data, g, stride, pad, cols)
        else:
            dx, dk = None, (cols.T @ g.reshape(-1, cout)).reshape(k.shape)
        if b is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 1, 2))

    return _node(y, parents, vjp, "conv2d")


def maxpool2d_forward(x, window=2, stride=2):
    """2x2/2 max pooling; returns the pooled array and the flat in-window argmax."""
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 pooling is supported")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        b, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def maxpool2d_vjp(g, arg, x_shape):
    b, h, w, c = x_shape
    blocks = np.zeros((b, h // 2, w // 2, c, 4), dtype=g.dtype)
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    return blocks.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


def maxpool2d(x, window=2, stride=2):
    y, arg = maxpool2d_forward(x.data, window, stride)
    shape = x.shape
    out = _node(y, (x,), lambda g: (maxpool2d_vjp(g, arg, shape),), "maxpool2d")
    out.argmax = arg
    return out


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of (B, H, W, C)."""
    b, h, w, c = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _node(y, (x,), vjp, "upsample2x")


def global_maxpool_points(x):
    """Max over the point axis of (B, N, F); ties go to the first point."""
    if x.shape[1] < 1:
        raise ValueError("global_maxpool_points needs at least one point")
    arg = x.data.argmax(axis=1)
    y = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, arg[:, None, :], g[:, None, :], axis=1)
        return (out,)

    return _node(y, (x,), vjp, "global_maxpool")


def softmax_cross_entropy_forward(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, d_logits)`` where ``d_logits = (softmax - onehot) / M``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels).reshape(-1)
    m, k = logits.shape
    if labels.shape[0] != m:
        raise ValueError(f"{m} logits rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(m)
    loss = -log_p[rows, labels].mean()
    d = np.exp(log_p)
    d[rows, labels] -= 1
    d /= m
    return logits.dtype.type(loss), d.astype(logits.dtype, copy=False)


def softmax_cross_entropy(logits, labels):
    logits = as_tensor(logits)
    flat = logits.data.reshape(-1, logits.shape[-1])
    loss, d = softmax_cross_entropy_forward(flat, labels)
    shape = logits.shape
    return _node(np.asarray(loss), (logits,), lambda g: (d.reshape(shape) * g,), "softmax_ce")


# -- parameters and optimisation ---------------------------------------------

def init_uniform(rng, shape, fan_in, dtype=np.float32):
    """He-style uniform initialisation with bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step.

    ``params`` and ``grads`` map names to arrays. Nothing passed in is
    modified; the updated parameters and a new state are returned.
    """
    step = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        dt = p.dtype.type
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * (g * g)
        m_hat = m / dt(1 - beta1 ** step)
        v_hat = v / dt(1 - beta2 ** step)
        new_params[name] = (p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))).astype(p.dtype)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(step, m_out, v_out)
