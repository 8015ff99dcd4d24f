"""Differentiable op kinds and the functions that add them to a graph.

Shapes must match exactly except that a 0-d value may pair with any
tensor. Everything else raises :class:`ShapeError` at evaluation time.
"""

from numbers import Number

import numpy as np

from . import kernels
from .graph import Node, Op, ShapeError


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a graph node")


def _lift(x, graph):
    if isinstance(x, Node):
        return x
    if isinstance(x, Number) or np.ndim(x) == 0:
        return graph.constant(float(x))
    raise TypeError(f"cannot combine node with {type(x).__name__}; wrap it with graph.constant")


def _check_pair(a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise binary ------------------------------------------------

class Add(Op):
    name = "add"

    def forward(self, ctx, a, b):
        _check_pair(a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, ctx, g, needs):
        sa, sb = ctx["shapes"]
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)


class Sub(Op):
    name = "sub"

    def forward(self, ctx, a, b):
        _check_pair(a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, ctx, g, needs):
        sa, sb = ctx["shapes"]
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)


class Mul(Op):
    name = "mul"

    def forward(self, ctx, a, b):
        _check_pair(a, b)
        ctx["ab"] = (a, b)
        return a * b

    def backward(self, ctx, g, needs):
        a, b = ctx["ab"]
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)


class Div(Op):
    name = "div"

    def forward(self, ctx, a, b):
        _check_pair(a, b)
        ctx["ab"] = (a, b)
        return a / b

    def backward(self, ctx, g, needs):
        a, b = ctx["ab"]
        da = _unbroadcast(g / b, a.shape) if needs[0] else None
        db = _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None
        return da, db


def _binary(op, a, b):
    g = _graph_of(a, b)
    return g.apply(op, (_lift(a, g), _lift(b, g)))


def add(a, b):
    if isinstance(b, Number) and isinstance(a, Node):
        return add_scalar(a, b)
    if isinstance(a, Number) and isinstance(b, Node):
        return add_scalar(b, a)
    return _binary(Add(), a, b)


def sub(a, b):
    if isinstance(b, Number) and isinstance(a, Node):
        return add_scalar(a, -b)
    if isinstance(a, Number) and isinstance(b, Node):
        return add_scalar(negate(b), a)
    return _binary(Sub(), a, b)


def mul(a, b):
    if isinstance(b, Number) and isinstance(a, Node):
        return scale(a, b)
    if isinstance(a, Number) and isinstance(b, Node):
        return scale(b, a)
    return _binary(Mul(), a, b)


def div(a, b):
    if isinstance(b, Number) and isinstance(a, Node):
        return scale(a, 1.0 / b)
    return _binary(Div(), a, b)


# -- elementwise unary -------------------------------------------------

class _Unary(Op):
    def forward(self, ctx, x):
        y = self.f(x)
        ctx["xy"] = (x, y)
        return y

    def backward(self, ctx, g, needs):
        x, y = ctx["xy"]
        return (g * self.df(x, y),)


class Square(_Unary):
    name = "square"

    def f(self, x):
        return x * x

    def df(self, x, y):
        return 2.0 * x


class Sqrt(_Unary):
    name = "sqrt"

    def f(self, x):
        with np.errstate(invalid="ignore"):
            return np.sqrt(x)

    def df(self, x, y):
        return 0.5 / y


class Negate(Op):
    name = "negate"

    def forward(self, ctx, x):
        return -x

    def backward(self, ctx, g, needs):
        return (-g,)


class Scale(Op):
    name = "scale"

    def forward(self, ctx, x, c):
        return x * c

    def backward(self, ctx, g, needs, c):
        return (g * c,)


class AddScalar(Op):
    name = "add_scalar"

    def forward(self, ctx, x, c):
        return x + c

    def backward(self, ctx, g, needs, c):
        return (g,)


class LeakyRelu(Op):
    name = "leaky_relu"

    def forward(self, ctx, x, slope):
        mask = x > 0
        ctx["mask"] = mask
        return np.where(mask, x, slope * x)

    def backward(self, ctx, g, needs, slope):
        return (np.where(ctx["mask"], g, slope * g),)


class Sigmoid(_Unary):
    name = "sigmoid"

    def f(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def df(self, x, y):
        return y * (1.0 - y)


class Tanh(_Unary):
    name = "tanh"

    def f(self, x):
        return np.tanh(x)

    def df(self, x, y):
        return 1.0 - y * y


class Sin(_Unary):
    name = "sin"

    def f(self, x):
        return np.sin(x)

    def df(self, x, y):
        return np.cos(x)


class Cos(_Unary):
    name = "cos"

    def f(self, x):
        return np.cos(x)

    def df(self, x, y):
        return -np.sin(x)


def square(x):
    return x.graph.apply(Square(), (x,))


def sqrt(x):
    return x.graph.apply(Sqrt(), (x,))


def negate(x):
    return x.graph.apply(Negate(), (x,))


def scale(x, c):
    return x.graph.apply(Scale(), (x,), c=float(c))


def add_scalar(x, c):
    return x.graph.apply(AddScalar(), (x,), c=float(c))


def leaky_relu(x, slope=0.01):
    return x.graph.apply(LeakyRelu(), (x,), slope=float(slope))


def sigmoid(x):
    return x.graph.apply(Sigmoid(), (x,))


def tanh(x):
    return x.graph.apply(Tanh(), (x,))


def sin(x):
    return x.graph.apply(Sin(), (x,))


def cos(x):
    return x.graph.apply(Cos(), (x,))


# -- reductions and layout ---------------------------------------------

class Sum(Op):
    name = "sum"

    def forward(self, ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.sum())

    def backward(self, ctx, g, needs):
        return (np.full(ctx["shape"], g),)


class Mean(Op):
    name = "mean"

    def forward(self, ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.mean())

    def backward(self, ctx, g, needs):
        shape = ctx["shape"]
        return (np.full(shape, g / max(1, int(np.prod(shape)))),)


class Concat(Op):
    name = "concat"

    def forward(self, ctx, *xs, axis):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
                raise ShapeError(f"concat extents differ: {ref} vs {x.shape}")
        ctx["sizes"] = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, ctx, g, needs, axis):
        cuts = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))


class Slice(Op):
    name = "slice"

    def forward(self, ctx, x, axis, start, stop):
        ctx["shape"] = x.shape
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return np.ascontiguousarray(x[tuple(idx)])

    def backward(self, ctx, g, needs, axis, start, stop):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(start, stop)
        out[tuple(idx)] = g
        return (out,)


def sum(x):
    return x.graph.apply(Sum(), (x,))


def mean(x):
    return x.graph.apply(Mean(), (x,))


def concat(xs, axis=1):
    xs = list(xs)
    return xs[0].graph.apply(Concat(), xs, axis=axis)


def slice_axis(x, axis, start, stop):
    return x.graph.apply(Slice(), (x,), axis=axis, start=start, stop=stop)


# -- layers --------------------------------------------------------------

class Conv3d(Op):
    name = "conv3d"

    def forward(self, ctx, x, w, b=None, stride=1, pad=None):
        if x.ndim != 5 or w.ndim != 5:
            raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape}, {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"input channels {x.shape[1]} != weight channels {w.shape[1]}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
        ctx["xw"] = (x, w)
        out = kernels.conv3d(x, w, stride, pad)
        if b is not None:
            out += b.reshape(1, -1, 1, 1, 1)
        return out

    def backward(self, ctx, g, needs, stride=1, pad=None):
        x, w = ctx["xw"]
        dx, dw = kernels.conv3d_backward(x, w, g, stride, pad, needs[0], needs[1])
        grads = [dx, dw]
        if len(needs) > 2:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if needs[2] else None)
        return tuple(grads)


class ConvTranspose3d(Op):
    """Kernel 2, stride 2 upsampling convolution; weight is [Ci, Co, 2, 2, 2]."""

    name = "conv_transpose3d"

    def forward(self, ctx, x, w, b=None):
        if x.ndim != 5 or w.shape[0] != x.shape[1] or w.shape[2:] != (2, 2, 2):
            raise ShapeError(f"conv_transpose3d shapes {x.shape}, {w.shape}")
        ctx["xw"] = (x, w)
        out = kernels.conv_transpose3d_k2s2(x, w)
        if b is not None:
            out += b.reshape(1, -1, 1, 1, 1)
        return out

    def backward(self, ctx, g, needs):
        x, w = ctx["xw"]
        dx, dw = kernels.conv_transpose3d_k2s2_backward(x, w, g, needs[0], needs[1])
        grads = [dx, dw]
        if len(needs) > 2:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if needs[2] else None)
        return tuple(grads)


class Linear(Op):
    """y = x @ W.T + b for x of shape [N, F] and W of shape [O, F]."""

    name = "linear"

    def forward(self, ctx, x, w, b=None):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear shapes {x.shape} @ {w.shape}")
        ctx["xw"] = (x, w)
        y = x @ w.T
        if b is not None:
            if b.shape != (w.shape[0],):
                raise ShapeError(f"bias shape {b.shape}")
            y = y + b
        return y

    def backward(self, ctx, g, needs):
        x, w = ctx["xw"]
        grads = [g @ w if needs[0] else None, g.T @ x if needs[1] else None]
        if len(needs) > 2:
            grads.append(g.sum(axis=0) if needs[2] else None)
        return tuple(grads)


class GroupNorm(Op):
    name = "group_norm"

    def forward(self, ctx, x, gamma, beta, groups, eps):
        C = x.shape[1]
        if C % groups:
            raise ShapeError(f"{C} channels not divisible into {groups} groups")
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ShapeError("group_norm affine parameters must have one entry per channel")
        y, xhat, inv = kernels.group_norm(x, gamma, beta, groups, eps)
        ctx["saved"] = (xhat, inv, gamma)
        return y

    def backward(self, ctx, g, needs, groups, eps):
        xhat, inv, gamma = ctx["saved"]
        return kernels.group_norm_backward(g, xhat, inv, gamma, groups)


class GlobalAvgPool(Op):
    name = "global_average_pool"

    def forward(self, ctx, x):
        ctx["shape"] = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)

    def backward(self, ctx, g, needs):
        shape = ctx["shape"]
        n = int(np.prod(shape[2:]))
        return (np.broadcast_to((g / n).reshape(shape[:2] + (1,) * (len(shape) - 2)), shape).copy(),)


class BoxSum(Op):
    name = "box_sum"

    def forward(self, ctx, x, n):
        if n % 2 == 0 or any(s < n for s in x.shape[-3:]):
            raise ShapeError(f"window {n} must be odd and fit extents {x.shape[-3:]}")
        return kernels.box_sum(x, n)

    def backward(self, ctx, g, needs, n):
        # a centred, zero-padded odd window is self-adjoint
        return (kernels.box_sum(g, n),)


class ForwardDiff(Op):
    name = "forward_diff"

    def forward(self, ctx, x, axis):
        return kernels.forward_diff(x, axis)

    def backward(self, ctx, g, needs, axis):
        return (kernels.forward_diff_adjoint(g, axis),)


class SoftmaxCrossEntropy(Op):
    """Mean voxelwise cross-entropy of channel-axis softmax against one-hot targets."""

    name = "softmax_cross_entropy"

    def forward(self, ctx, logits, onehot):
        if logits.shape != onehot.shape:
            raise ShapeError(f"logits {logits.shape} vs targets {onehot.shape}")
        ls = kernels.log_softmax(logits, axis=1)
        count = logits.size // logits.shape[1]
        ctx["saved"] = (ls, onehot, count)
        return np.asarray(-(onehot * ls).sum() / count)

    def backward(self, ctx, g, needs):
        ls, onehot, count = ctx["saved"]
        p = np.exp(ls)
        return (g * (p * onehot.sum(axis=1, keepdims=True) - onehot) / count, None)


def conv3d(x, w, b=None, stride=1, pad=None):
    parents = (x, w) if b is None else (x, w, b)
    return x.graph.apply(Conv3d(), parents, stride=stride, pad=pad)


def conv_transpose3d(x, w, b=None):
    parents = (x, w) if b is None else (x, w, b)
    return x.graph.apply(ConvTranspose3d(), parents)


def linear(x, w, b=None):
    parents = (x, w) if b is None else (x, w, b)
    return x.graph.apply(Linear(), parents)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    return x.graph.apply(GroupNorm(), (x, gamma, beta), groups=groups, eps=eps)


def global_average_pool(x):
    return x.graph.apply(GlobalAvgPool(), (x,))


def box_sum(x, n):
    return x.graph.apply(BoxSum(), (x,), n=int(n))


def forward_diff(x, axis):
    return x.graph.apply(ForwardDiff(), (x,), axis=axis)


def softmax_cross_entropy(logits, onehot):
    return logits.graph.apply(SoftmaxCrossEntropy(), (logits, onehot))
