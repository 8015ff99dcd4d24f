"""Define-then-run computation graphs with reverse-mode differentiation.

A :class:`Graph` is built once from leaves (inputs, parameters, constants)
and op nodes, then evaluated any number of times against new bindings.
Node ids are assigned in creation order, which is always a valid
topological order, so evaluation is a single forward sweep and
backpropagation a single reverse sweep.
"""

from __future__ import annotations

import numpy as np


class GraphError(Exception):
    """Base class for graph construction and execution errors."""


class ShapeError(GraphError, ValueError):
    pass


class UnboundInputError(GraphError, KeyError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    def __init__(self, node_id, op_name, detail=""):
        self.node_id = node_id
        self.op_name = op_name
        super().__init__(f"non-finite value at node {node_id} ({op_name}){detail}")


class Op:
    """A differentiable operation.

    ``forward(ctx, *values, **attrs)`` returns the output array and may
    stash whatever the backward pass needs in the ``ctx`` dict.
    ``backward(ctx, grad, needs, **attrs)`` returns one gradient per input
    (``None`` where ``needs[i]`` is false or the input is not
    differentiable).
    """

    name = "op"

    def forward(self, ctx, *values, **attrs):
        raise NotImplementedError

    def backward(self, ctx, grad, needs, **attrs):
        raise NotImplementedError

    def __repr__(self):
        return f"<op {self.name}>"


class Node:
    __slots__ = ("graph", "id", "op", "parents", "attrs", "kind", "name", "requires_grad", "value")

    def __init__(self, graph, id, op, parents, attrs, kind, name, requires_grad, value=None):
        self.graph = graph
        self.id = id
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.kind = kind
        self.name = name
        self.requires_grad = requires_grad
        self.value = value  # constants only

    def __repr__(self):
        label = self.name or (self.op.name if self.op else self.kind)
        return f"Node({self.id}, {label})"

    # arithmetic sugar; the functions live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.negate(self)


class Graph:
    """Container for nodes plus the cached forward values of the last run."""

    def __init__(self, dtype=np.float64, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.outputs: dict[str, Node] = {}
        self._leaves: dict[str, Node] = {}
        self._values = None
        self._ctx = None

    # -- construction -------------------------------------------------
    def _leaf(self, name, kind, requires_grad):
        if name in self._leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = Node(self, len(self.nodes), None, (), {}, kind, name, requires_grad)
        self.nodes.append(node)
        self._leaves[name] = node
        self._values = None
        return node

    def input(self, name, requires_grad=False):
        return self._leaf(name, "input", requires_grad)

    def param(self, name):
        return self._leaf(name, "param", True)

    def constant(self, value, name=None):
        node = Node(self, len(self.nodes), None, (), {}, "const", name, False,
                    value=np.asarray(value, dtype=self.dtype))
        self.nodes.append(node)
        self._values = None
        return node

    def apply(self, op, parents, **attrs):
        for p in parents:
            if p.graph is not self:
                raise GraphError("nodes from different graphs cannot be combined")
        rg = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), op, tuple(parents), attrs, "op", None, rg)
        self.nodes.append(node)
        self._values = None
        return node

    def output(self, name, node):
        self.outputs[name] = node
        return node

    def leaves(self, kind=None):
        return {n: v for n, v in self._leaves.items() if kind is None or v.kind == kind}

    # -- execution ----------------------------------------------------
    def evaluate(self, bindings):
        values = [None] * len(self.nodes)
        ctxs = [None] * len(self.nodes)
        for node in self.nodes:
            if node.kind == "const":
                values[node.id] = node.value
                continue
            if node.kind in ("input", "param"):
                if node.name not in bindings:
                    raise UnboundInputError(f"unbound {node.kind} {node.name!r}")
                v = np.asarray(bindings[node.name], dtype=self.dtype)
                if self.check_finite and not np.all(np.isfinite(v)):
                    raise NonFiniteError(node.id, node.kind, f" bound to {node.name!r}")
                values[node.id] = v
                continue
            ctx = {}
            args = [values[p.id] for p in node.parents]
            try:
                out = node.op.forward(ctx, *args, **node.attrs)
            except ShapeError as exc:
                raise ShapeError(f"node {node.id} ({node.op.name}): {exc}") from None
            if out.dtype != self.dtype:
                out = out.astype(self.dtype)
            if self.check_finite and not np.all(np.isfinite(out)):
                raise NonFiniteError(node.id, node.op.name)
            values[node.id] = out
            ctxs[node.id] = ctx
        self._values = values
        self._ctx = ctxs
        return {name: values[n.id] for name, n in self.outputs.items()}

    def value(self, node):
        if self._values is None:
            raise GraphError("forward pass not evaluated")
        return self._values[node.id]

    def backpropagate(self, loss, seed=1.0):
        """Gradients of ``loss`` for every named leaf that requires grad.

        Leaves the loss does not depend on get a zero tensor.
        """
        if isinstance(loss, str):
            loss = self.outputs[loss]
        if self._values is None:
            raise GraphError("forward pass not evaluated")
        lv = self._values[loss.id]
        if lv.ndim != 0:
            raise ShapeError(f"loss must be a scalar, got shape {lv.shape}")
        grads = {loss.id: np.asarray(seed, dtype=self.dtype)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None) if node.kind == "op" else None
            if g is None or not node.requires_grad:
                continue
            needs = [p.requires_grad for p in node.parents]
            pgrads = node.op.backward(self._ctx[node.id], g, needs, **node.attrs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg
        out = {}
        for name, leaf in self._leaves.items():
            if not leaf.requires_grad:
                continue
            g = grads.get(leaf.id)
            if g is None:
                g = np.zeros_like(self._values[leaf.id])
            out[name] = np.asarray(g, dtype=self.dtype).reshape(self._values[leaf.id].shape)
        return out


def evaluate(graph, bindings):
    return graph.evaluate(bindings)


def backpropagate(graph, loss, seed=1.0):
    return graph.backpropagate(loss, seed=seed)


def eager(fn, *arrays, dtype=np.float64):
    """Evaluate ``fn(*nodes)`` once on plain arrays and return the result array."""
    g = Graph(dtype=dtype)
    nodes = [g.input(f"arg{i}") for i in range(len(arrays))]
    g.output("out", fn(*nodes))
    return g.evaluate({f"arg{i}": a for i, a in enumerate(arrays)})["out"]
