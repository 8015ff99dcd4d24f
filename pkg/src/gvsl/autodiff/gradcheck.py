"""Central-difference gradient checks.

``check_gradients`` works on any graph-building function. ``finite_difference_check``
runs the canned case registered for an op kind, which is what the test suite
sweeps over.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .graph import Graph


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    passed: bool
    checked: int
    per_input: dict = field(default_factory=dict)


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def check_gradients(build, inputs, seed=0, h=1e-3, tol=1e-4, max_points=40, masks=None, name="custom"):
    """Compare backprop gradients of ``build`` with central differences.

    ``build(graph, nodes)`` receives a dict of input nodes (all requiring
    grad) and returns an output node. The scalar checked is
    ``sum(output * R)`` for a fixed random ``R``. ``masks`` optionally maps
    input names to boolean arrays of elements that may be probed.
    """
    rng = np.random.default_rng(seed)
    g = Graph()
    nodes = {k: g.input(k, requires_grad=True) for k in inputs}
    out = build(g, nodes)
    g.output("out", out)
    shape = g.evaluate(inputs)["out"].shape
    proj = g.constant(rng.standard_normal(shape))
    loss = ops.sum(ops.mul(out, proj))
    g.output("loss", loss)

    def f(vals):
        return float(g.evaluate(vals)["loss"])

    g.evaluate(inputs)
    analytic = g.backpropagate(loss)
    worst = 0.0
    checked = 0
    per_input = {}
    for k, arr in inputs.items():
        arr = np.asarray(arr, dtype=float)
        allowed = np.ones(arr.shape, bool) if masks is None or k not in masks else masks[k]
        cand = np.flatnonzero(allowed.ravel())
        if cand.size == 0:
            continue
        pick = cand if cand.size <= max_points else rng.choice(cand, max_points, replace=False)
        errs = []
        for flat in pick:
            plus = dict(inputs)
            minus = dict(inputs)
            a_p = arr.copy().ravel()
            a_m = arr.copy().ravel()
            a_p[flat] += h
            a_m[flat] -= h
            plus[k] = a_p.reshape(arr.shape)
            minus[k] = a_m.reshape(arr.shape)
            num = (f(plus) - f(minus)) / (2 * h)
            errs.append(float(_rel_err(analytic[k].ravel()[flat], num)))
        per_input[k] = max(errs)
        worst = max(worst, per_input[k])
        checked += len(pick)
    return GradCheckReport(name, worst, worst <= tol, checked, per_input)


# -- canned cases ----------------------------------------------------------------

def _away_from_zero(rng, shape, gap):
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    x[np.abs(x) < gap] = gap * 2
    return x


def _smooth_field(rng, shape, amp):
    from scipy.ndimage import gaussian_filter
    u = rng.standard_normal(shape)
    for c in range(shape[1]):
        u[0, c] = gaussian_filter(u[0, c], 1.0)
    return amp * u / np.abs(u).max()


def _warp_mask(dvf, h):
    N, _, Z, Y, X = dvf.shape
    gz, gy, gx = np.meshgrid(np.arange(Z), np.arange(Y), np.arange(X), indexing="ij")
    mask = np.zeros(dvf.shape, bool)
    for c, grid in enumerate((gx, gy, gz)):
        frac = np.mod(grid + dvf[:, c], 1.0)
        mask[:, c] = (frac > 2 * h) & (frac < 1 - 2 * h)
    return mask


def _case(kind, shape, rng, h):
    """Return (build, inputs, masks) for a standard op kind."""
    from .. import geometry, losses

    s = tuple(shape) if shape is not None else None
    if kind in ("add", "sub", "mul", "div"):
        s = s or (2, 3, 4)
        a = rng.standard_normal(s)
        b = rng.uniform(0.5, 2.0, s) if kind == "div" else rng.standard_normal(s)
        fn = getattr(ops, kind)
        return (lambda g, n: fn(n["a"], n["b"])), {"a": a, "b": b}, None
    if kind == "scalar_broadcast":
        s = s or (2, 3, 4)
        return (lambda g, n: ops.mul(n["a"], n["s"])), {"a": rng.standard_normal(s), "s": np.asarray(1.7)}, None
    if kind in ("square", "negate", "tanh", "sigmoid", "sin", "cos"):
        s = s or (2, 3, 4)
        fn = getattr(ops, kind)
        return (lambda g, n: fn(n["x"])), {"x": rng.standard_normal(s)}, None
    if kind == "sqrt":
        s = s or (2, 3, 4)
        return (lambda g, n: ops.sqrt(n["x"])), {"x": rng.uniform(0.5, 2.0, s)}, None
    if kind == "scale":
        return (lambda g, n: ops.scale(n["x"], -2.5)), {"x": rng.standard_normal(s or (3, 4))}, None
    if kind == "add_scalar":
        return (lambda g, n: ops.add_scalar(n["x"], 0.7)), {"x": rng.standard_normal(s or (3, 4))}, None
    if kind in ("sum", "mean"):
        fn = getattr(ops, kind)
        return (lambda g, n: fn(n["x"])), {"x": rng.standard_normal(s or (2, 3, 4))}, None
    if kind == "concat":
        s = s or (1, 2, 3, 3, 3)
        b = rng.standard_normal((s[0], 3) + s[2:])
        return (lambda g, n: ops.concat([n["a"], n["b"]], axis=1)), {"a": rng.standard_normal(s), "b": b}, None
    if kind == "leaky_relu":
        return (lambda g, n: ops.leaky_relu(n["x"])), {"x": _away_from_zero(rng, s or (2, 3, 4), 2 * h)}, None
    if kind in ("conv3d", "conv3d_stride2"):
        s = s or (1, 2, 4, 4, 4)
        stride = 2 if kind == "conv3d_stride2" else 1
        co = 3
        inputs = {"x": rng.standard_normal(s), "w": rng.standard_normal((co, s[1], 3, 3, 3)) * 0.3,
                  "b": rng.standard_normal(co)}
        return (lambda g, n: ops.conv3d(n["x"], n["w"], n["b"], stride=stride)), inputs, None
    if kind == "conv_transpose3d":
        s = s or (1, 3, 2, 2, 2)
        inputs = {"x": rng.standard_normal(s), "w": rng.standard_normal((s[1], 2, 2, 2, 2)),
                  "b": rng.standard_normal(2)}
        return (lambda g, n: ops.conv_transpose3d(n["x"], n["w"], n["b"])), inputs, None
    if kind == "linear":
        s = s or (2, 5)
        inputs = {"x": rng.standard_normal(s), "w": rng.standard_normal((4, s[1])), "b": rng.standard_normal(4)}
        return (lambda g, n: ops.linear(n["x"], n["w"], n["b"])), inputs, None
    if kind == "group_norm":
        s = s or (1, 8, 4, 4, 4)
        inputs = {"x": rng.standard_normal(s), "gamma": rng.uniform(0.5, 1.5, s[1]),
                  "beta": rng.standard_normal(s[1])}
        return (lambda g, n: ops.group_norm(n["x"], n["gamma"], n["beta"], 4)), inputs, None
    if kind == "global_average_pool":
        return (lambda g, n: ops.global_average_pool(n["x"])), {"x": rng.standard_normal(s or (2, 3, 3, 3, 3))}, None
    if kind == "box_sum":
        return (lambda g, n: ops.box_sum(n["x"], 3)), {"x": rng.standard_normal(s or (1, 1, 5, 5, 5))}, None
    if kind == "forward_diff":
        return (lambda g, n: ops.forward_diff(n["x"], -2)), {"x": rng.standard_normal(s or (1, 3, 4, 4, 4))}, None
    if kind == "softmax_cross_entropy":
        s = s or (1, 3, 3, 3, 3)
        lab = rng.integers(0, s[1], (s[0],) + s[2:])
        onehot = np.moveaxis(np.eye(s[1])[lab], -1, 1)

        def build(g, n):
            return ops.softmax_cross_entropy(n["z"], g.constant(onehot))
        return build, {"z": rng.standard_normal(s)}, None
    if kind == "trilinear_warp":
        s = s or (1, 2, 5, 5, 5)
        dvf = _smooth_field(rng, (s[0], 3) + s[2:], 1.5)
        inputs = {"src": rng.standard_normal(s), "dvf": dvf}
        return (lambda g, n: geometry.warp_node(n["src"], n["dvf"])), inputs, {"dvf": _warp_mask(dvf, h)}
    if kind == "affine_matrix":
        v = np.concatenate([rng.uniform(-0.5, 0.5, 6), rng.uniform(0.8, 1.2, 3), rng.uniform(-0.2, 0.2, 6)])
        return (lambda g, n: geometry.affine_matrix_node(n["p"])), {"p": v[None]}, None
    if kind == "affine_field":
        ext = tuple(s[-3:]) if s else (3, 4, 5)
        m = np.eye(4)[None] + np.pad(rng.uniform(-0.2, 0.2, (1, 3, 4)), ((0, 0), (0, 1), (0, 0)))
        return (lambda g, n: geometry.affine_field_node(n["m"], ext)), {"m": m}, None
    if kind == "ncc":
        s = s or (1, 1, 6, 6, 6)
        cfg = losses.LossConfig(window=3)
        inputs = {"a": rng.uniform(0, 1, s), "b": rng.uniform(0, 1, s)}
        return (lambda g, n: losses.local_ncc_loss(n["a"], n["b"], cfg)), inputs, None
    if kind == "smoothness":
        s = s or (1, 3, 4, 4, 4)
        return (lambda g, n: losses.smoothness_loss(n["u"])), {"u": rng.standard_normal(s)}, None
    if kind == "mse":
        s = s or (1, 1, 4, 4, 4)
        inputs = {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}
        return (lambda g, n: losses.restoration_mse(n["a"], n["b"])), inputs, None
    raise KeyError(f"no gradient-check case for op kind {kind!r}")


OP_KINDS = (
    "add", "sub", "mul", "div", "scalar_broadcast", "square", "sqrt", "negate", "scale", "add_scalar",
    "sum", "mean", "concat", "conv3d", "conv3d_stride2", "conv_transpose3d", "linear", "leaky_relu",
    "sigmoid", "tanh", "sin", "cos", "group_norm", "global_average_pool", "box_sum", "forward_diff",
    "softmax_cross_entropy", "trilinear_warp", "affine_matrix", "affine_field", "ncc", "smoothness", "mse",
)


def finite_difference_check(op, shape=None, seed=0, h=1e-3, tol=1e-4, max_points=40):
    if not 0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    rng = np.random.default_rng(seed)
    build, inputs, masks = _case(op, shape, rng, h)
    return check_gradients(build, inputs, seed=seed, h=h, tol=tol, max_points=max_points,
                           masks=masks, name=op)
