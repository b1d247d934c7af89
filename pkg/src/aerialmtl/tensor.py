"""Minimal dense tensor with reverse-mode automatic differentiation.

Only the operations the multi-task network and its losses need are provided.
Every array is float32; image-like data uses the N x C x H x W layout.

Each differentiable operation returns a new :class:`Tensor` that records its
parents and a closure mapping the output gradient to the parents' gradients.
:func:`backward` accumulates into the ``grad`` of leaf tensors, :func:`grad`
returns gradients with respect to arbitrary (also non-leaf) tensors without
touching any ``grad`` buffer.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLossError, InvalidArgument, ShapeError, TrainingDiverged

DTYPE = np.float32


@contextmanager
def precision(dtype):
    """Temporarily run the engine in another float type (gradient checking)."""
    global DTYPE
    previous = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

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
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        name = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other)

    def __rsub__(self, other):
        return add(-self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return tensor_sum(self)


def _result(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# graph traversal


def _topological_order(root):
    """Nodes reachable from ``root`` through grad-requiring edges, inputs first."""
    order = []
    seen = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(loss, targets=None):
    if loss.data.size != 1:
        raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    wanted = set()
    if targets is None:
        relevant = None
    else:
        # restrict propagation to nodes lying on a path to one of the targets
        relevant = set()
        wanted = {id(t) for t in targets}
        for node in order:
            if id(node) in wanted or any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        if relevant is not None and id(node) not in relevant:
            continue
        needs = tuple(
            p.requires_grad and (relevant is None or id(p) in relevant) for p in node._parents
        )
        if not any(needs):
            continue
        parent_grads = node._backward(g, needs)
        for parent, need, pg in zip(node._parents, needs, parent_grads):
            if not need or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if targets is None or id(node) not in wanted:
            del grads[id(node)]
    return grads, order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    result = _backprop(loss)
    if not result:
        return
    grads, order = result
    for node in order:
        if node.is_leaf and node.requires_grad and id(node) in grads:
            g = grads[id(node)].astype(DTYPE, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad(loss, wrt):
    """Gradients of ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get an all-zero gradient.
    """
    wrt = list(wrt)
    result = _backprop(loss, wrt)
    grads = result[0] if result else {}
    return [
        np.asarray(grads[id(t)], dtype=DTYPE) if id(t) in grads else np.zeros_like(t.data)
        for t in wrt
    ]


def zero_grads(params):
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    if not isinstance(b, Tensor):
        if not isinstance(a, Tensor):
            return Tensor(np.asarray(a, DTYPE) + np.asarray(b, DTYPE))
        return _result(a.data + DTYPE(b), (a,), lambda g, needs: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _result(a.data + b.data, (a, b), lambda g, needs: (g, g))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = DTYPE(b)
        return _result(a.data * c, (a,), lambda g, needs: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    ad, bd = a.data, b.data

    def _backward(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _result(ad * bd, (a, b), _backward)


def tensor_sum(x):
    shape = x.shape

    def _backward(g, needs):
        return (np.full(shape, g.reshape(()), dtype=DTYPE),)

    return _result(np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE), (x,), _backward)


def leaky_relu(x, slope=0.2):
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * DTYPE(slope))

    def _backward(g, needs):
        return (np.where(positive, g, g * DTYPE(slope)),)

    return _result(out, (x,), _backward)


def dropout(x, p, training, rng=None):
    """Inverted dropout: survivors are scaled by 1 / (1 - p)."""
    if not 0.0 <= p < 1.0:
        raise InvalidArgument(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise InvalidArgument("dropout in training mode needs a random generator")
    keep = rng.random(x.shape, dtype=DTYPE) >= DTYPE(p)
    scale = DTYPE(1.0 / (1.0 - p))
    factor = keep.astype(DTYPE) * scale

    return _result(x.data * factor, (x,), lambda g, needs: (g * factor,))


# --------------------------------------------------------------------------
# image ops


def _check_4d(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected N x C x H x W input, got shape {x.shape}")


def _im2col(xp, kh, kw, stride, ho, wo):
    """(N, C, Hp, Wp) -> (C * kh * kw, N * ho * wo) patch matrix."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(xt[:, :, ::stride, ::stride]).reshape(c, n * ho * wo)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation via im2col and a single matrix product."""
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be Cout x Cin x kh x kw, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} outputs")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: input {h}x{w} with padding {padding}, stride {stride} "
            f"and kernel {kh}x{kw} gives a non-integral output size"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def _backward(g, needs):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if needs[0] and stride == 1 and padding <= min(kh, kw) - 1:
            # input gradient = full correlation of g with the flipped, transposed kernel
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            gcols = _im2col(gp, kh, kw, 1, h, w)
            gx = (flipped @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        elif needs[0]:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros((n, cin) + xp.shape[2:], dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if needs[1]:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=1)
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, _backward)


def upsample2(x):
    """Nearest-neighbour upsampling by exactly two along H and W."""
    _check_4d(x, "upsample2")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(
        n, c, 2 * h, 2 * w
    )

    def _backward(g, needs):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), _backward)


def upconv2d(x, weight, bias=None, stride=2):
    """Decoder upsampling: nearest x2 followed by a same-size convolution."""
    if stride != 2:
        raise InvalidArgument(f"upconv2d only supports a factor of 2, got {stride}")
    kh = weight.shape[2]
    return conv2d(upsample2(x), weight, bias, stride=1, padding=kh // 2)


def max_pool2(x):
    _check_4d(x, "max_pool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial size {h}x{w} is not even")
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _backward(g, needs):
        gb = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), _backward)


def concat_channels(a, b):
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N, H, W must match, got {a.shape} and {b.shape}")
    ca = a.shape[1]

    def _backward(g, needs):
        return (g[:, :ca], g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), _backward)


# --------------------------------------------------------------------------
# losses


def l1_loss(pred, target, mask=None):
    """Masked mean absolute error: sum(|pred - target| * mask) / sum(mask)."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if target.shape != pred.shape:
        raise ShapeError(f"l1_loss: pred {pred.shape} and target {target.shape} differ")
    if mask is None:
        mask = np.ones(pred.shape, dtype=DTYPE)
    else:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
        if mask.shape != pred.shape:
            raise ShapeError(f"l1_loss: mask {mask.shape} does not match pred {pred.shape}")
    count = float(mask.sum(dtype=np.float64))
    if count == 0:
        raise DegenerateLossError("l1_loss: mask selects no pixel")
    # masked-out targets may hold NaN; keep them out of the arithmetic
    diff = np.where(mask > 0, pred.data - np.where(mask > 0, target, 0), 0).astype(DTYPE)
    value = np.abs(diff).sum(dtype=np.float64) / count

    def _backward(g, needs):
        return (np.sign(diff) * (mask * DTYPE(g.reshape(()) / count)),)

    return _result(np.asarray(value, dtype=DTYPE), (pred,), _backward)


def softmax_cross_entropy(logits, labels, ignore_index=255):
    """Mean negative log-likelihood over non-ignored pixels."""
    _check_4d(logits, "softmax_cross_entropy")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} do not match {(n, h, w)}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidArgument(
            f"softmax_cross_entropy: label {int(labels[where])} at {where} outside [0, {c})"
        )
    count = int(valid.sum())
    if count == 0:
        raise DegenerateLossError("softmax_cross_entropy: every pixel is ignored")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    value = -(picked[valid].sum(dtype=np.float64)) / count

    def _backward(g, needs):
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        scale = DTYPE(g.reshape(()) / count)
        return ((probs - onehot) * (valid[:, None] * scale),)

    return _result(np.asarray(value, dtype=DTYPE), (logits,), _backward)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params``."""
    params = list(params)
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if len(grads) != len(params):
        raise InvalidArgument(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient passed to adam_step")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise InvalidArgument("adam_step: optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} vs parameter {p.shape}")
        m *= DTYPE(b1)
        m += DTYPE(1.0 - b1) * g
        v *= DTYPE(b2)
        v += DTYPE(1.0 - b2) * (g * g)
        mhat = m / DTYPE(corr1)
        vhat = v / DTYPE(corr2)
        p.data -= DTYPE(state.lr) * mhat / (np.sqrt(vhat) + DTYPE(state.eps))
    return params
