"""Dense tensors with reverse-mode automatic differentiation on numpy."""

from . import ops
from .gradcheck import GradCheckReport, OP_KINDS, check_gradients, finite_difference_check
from .graph import (
    Graph,
    GraphError,
    Node,
    NonFiniteError,
    Op,
    ShapeError,
    UnboundInputError,
    backpropagate,
    eager,
    evaluate,
)
from .optim import Adam, AdamState, adam_update

__all__ = [
    "Adam", "AdamState", "GradCheckReport", "Graph", "GraphError", "Node", "NonFiniteError", "OP_KINDS",
    "Op", "ShapeError", "UnboundInputError", "adam_update", "backpropagate", "check_gradients",
    "eager", "evaluate", "finite_difference_check", "ops",
]
