"""Registration and restoration objectives as graph fragments.

All functions take graph nodes shaped ``[N, C, Z, Y, X]`` and return a
0-d node, so they compose with anything else built on the same graph.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.graph import Op, ShapeError


@dataclass(frozen=True)
class LossConfig:
    window: int = 5
    eps: float = 1e-5
    smooth_weight: float = 1.0

    def __post_init__(self):
        if self.window % 2 == 0 or self.window < 3:
            raise ValueError(f"ncc window must be odd and >= 3, got {self.window}")
        if self.eps <= 0:
            raise ValueError("ncc eps must be positive")
        if self.smooth_weight < 0:
            raise ValueError("smooth weight must be non-negative")


class WindowCount(Op):
    """Number of in-grid voxels in each window; a constant of the shape only."""

    name = "window_count"

    def forward(self, ctx, x, n):
        from .autodiff.kernels import box_sum
        return box_sum(np.ones_like(x), n)

    def backward(self, ctx, g, needs, n):
        return (None,)


def local_ncc_loss(x_ab, x_b, cfg=LossConfig()):
    """Negated mean squared local correlation, in [-1, 0].

    Windows are n^3 boxes clipped to the grid: border voxels use only the
    in-grid part of their window, so adding a constant to either image
    leaves every window's correlation unchanged.
    """
    n = cfg.window
    cnt = x_ab.graph.apply(WindowCount(), (x_b,), n=n)
    i_sum = ops.box_sum(x_ab, n)
    j_sum = ops.box_sum(x_b, n)
    i2 = ops.box_sum(ops.square(x_ab), n)
    j2 = ops.box_sum(ops.square(x_b), n)
    ij = ops.box_sum(x_ab * x_b, n)
    cross = ij - i_sum * j_sum / cnt
    i_var = i2 - i_sum * i_sum / cnt
    j_var = j2 - j_sum * j_sum / cnt
    cc = ops.square(cross) / ops.add_scalar(i_var * j_var, cfg.eps)
    return ops.negate(ops.mean(cc))


def smoothness_loss(dvf):
    """Mean over voxels of the squared Frobenius norm of the forward-difference Jacobian."""
    total = None
    for axis in (-1, -2, -3):
        term = ops.mean(ops.square(ops.forward_diff(dvf, axis)))
        total = term if total is None else total + term
    # each mean divides by N*3*|grid|; the norm sums the 3 components
    return ops.scale(total, 3.0)


def restoration_mse(restored, original):
    return ops.mean(ops.square(restored - original))


def gvsl_total(ncc, smooth, cfg=LossConfig()):
    return ncc + ops.scale(smooth, cfg.smooth_weight)


def check_window(shape, cfg):
    if cfg.window > min(shape[-3:]):
        raise ShapeError(f"ncc window {cfg.window} larger than volume extents {tuple(shape[-3:])}")
