"""Affine parameterization, displacement fields and trilinear warping.

Conventions used throughout the package:

* volumes are indexed ``[z, y, x]`` (``x`` fastest);
* a displacement field (DVF) has shape ``[3, Z, Y, X]`` or
  ``[N, 3, Z, Y, X]`` with channels ordered ``(u_x, u_y, u_z)`` in voxel
  units;
* warping pulls: ``out(p) = source(p + u(p))``, zero outside the grid;
* affine transforms act about the grid centre, so a pure translation ``t``
  yields the constant field ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .autodiff.graph import Op, ShapeError

PARAM_NAMES = (
    "rot_x", "rot_y", "rot_z",
    "t_x", "t_y", "t_z",
    "s_x", "s_y", "s_z",
    "sh_xy", "sh_xz", "sh_yx", "sh_yz", "sh_zx", "sh_zy",
)


@dataclass(frozen=True)
class VolumeGrid:
    extents: tuple  # (Z, Y, X)
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.extents) != 3 or min(self.extents) < 2:
            raise ValueError(f"grid extents must be 3 values >= 2, got {self.extents}")

    @property
    def center(self):
        """Centre in (x, y, z) voxel coordinates."""
        Z, Y, X = self.extents
        return np.array([(X - 1) / 2.0, (Y - 1) / 2.0, (Z - 1) / 2.0])


@dataclass(frozen=True)
class AffineParams:
    """Fifteen transform scalars: rotation (rad), translation (voxels), scaling, shearing."""

    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    scaling: tuple = (1.0, 1.0, 1.0)
    shearing: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)  # xy, xz, yx, yz, zx, zy

    def __post_init__(self):
        v = self.to_vector()
        if not np.all(np.isfinite(v)):
            raise ValueError("affine parameters must be finite")
        if min(self.scaling) <= 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")

    def to_vector(self):
        return np.array([*self.rotation, *self.translation, *self.scaling, *self.shearing], dtype=float)

    @classmethod
    def from_vector(cls, v):
        v = [float(a) for a in np.asarray(v).ravel()]
        if len(v) != 15:
            raise ValueError(f"expected 15 affine values, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), tuple(v[9:15]))

    def to_dict(self):
        return dict(zip(PARAM_NAMES, self.to_vector().tolist()))

    @classmethod
    def from_dict(cls, d):
        return cls.from_vector([d[k] for k in PARAM_NAMES])


# -- affine matrix ---------------------------------------------------------

def _rot_factors(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return Rx, Ry, Rz, dRx, dRy, dRz


def _h(m3, t=None):
    out = np.eye(4)
    out[:3, :3] = m3
    if t is not None:
        out[:3, 3] = t
    return out


def _factors(v):
    rx, ry, rz, tx, ty, tz, sx, sy, sz, xy, xz, yx, yz, zx, zy = v
    Rx, Ry, Rz, dRx, dRy, dRz = _rot_factors(rx, ry, rz)
    R = _h(Rz @ Ry @ Rx)
    S = _h(np.diag([sx, sy, sz]))
    Sh = _h(np.array([[1.0, yx, zx], [xy, 1.0, zy], [xz, yz, 1.0]]))
    T = _h(np.eye(3), [tx, ty, tz])
    return R, S, Sh, T, (Rx, Ry, Rz, dRx, dRy, dRz)


def _matrix_and_jacobian(v):
    """4x4 matrix for one parameter vector and its derivative, shape [15, 4, 4]."""
    R, S, Sh, T, (Rx, Ry, Rz, dRx, dRy, dRz) = _factors(v)
    SShT = S @ Sh @ T
    M = R @ SShT
    d = np.zeros((15, 4, 4))
    dR = [Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx]
    for i in range(3):
        d[i, :3, :3] = 0.0
        d[i] = _h(dR[i]) @ SShT
        d[i, 3, 3] = 0.0
    RSSh = R @ S @ Sh
    for i in range(3):
        dT = np.zeros((4, 4))
        dT[i, 3] = 1.0
        d[3 + i] = RSSh @ dT
    ShT = Sh @ T
    for i in range(3):
        dS = np.zeros((4, 4))
        dS[i, i] = 1.0
        d[6 + i] = R @ dS @ ShT
    RS = R @ S
    # shear slots in PARAM_NAMES order: xy, xz, yx, yz, zx, zy
    slots = [(1, 0), (2, 0), (0, 1), (2, 1), (0, 2), (1, 2)]
    for i, (r, c) in enumerate(slots):
        dSh = np.zeros((4, 4))
        dSh[r, c] = 1.0
        d[9 + i] = RS @ dSh @ T
    return M, d


def affine_matrix_from_params(params):
    """Homogeneous 4x4 matrix Rotation . Scaling . Shearing . Translation.

    ``params`` is an :class:`AffineParams` or a raw 15-vector.
    """
    if isinstance(params, AffineParams):
        v = params.to_vector()
    else:
        v = np.asarray(params, dtype=float)
        if v.shape != (15,):
            raise ValueError(f"expected 15 affine values, got shape {v.shape}")
        if np.any(v[6:9] <= 0):
            raise ValueError("scaling must be positive")
    return _matrix_and_jacobian(v)[0]


# -- fields ------------------------------------------------------------------

def _centered_coords(extents):
    Z, Y, X = extents
    gz, gy, gx = np.meshgrid(np.arange(Z, dtype=float), np.arange(Y, dtype=float),
                             np.arange(X, dtype=float), indexing="ij")
    c = VolumeGrid(tuple(extents)).center
    return np.stack([gx - c[0], gy - c[1], gz - c[2]])  # [3, Z, Y, X]


def _affine_field(mats, extents):
    q = _centered_coords(extents)
    A = mats[:, :3, :3] - np.eye(3)
    m = mats[:, :3, 3]
    field = np.einsum("nij,jzyx->nizyx", A, q) + m[:, :, None, None, None]
    return field, q


def affine_to_dvf(matrix, grid):
    """Displacement p_hat - p of an affine matrix applied about the grid centre."""
    extents = grid.extents if isinstance(grid, VolumeGrid) else tuple(grid)
    mats = np.asarray(matrix, dtype=float)
    single = mats.ndim == 2
    field, _ = _affine_field(mats[None] if single else mats, extents)
    return field[0] if single else field


def _batched(x, ndim):
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-d or {ndim}-d array, got shape {x.shape}")
    return x, False


class _Trilinear:
    """Corner indices and weights of a pull-back trilinear sample."""

    def __init__(self, dvf):
        N, _, Z, Y, X = dvf.shape
        self.shape = (Z, Y, X)
        gz, gy, gx = np.meshgrid(np.arange(Z), np.arange(Y), np.arange(X), indexing="ij")
        s = [gx + dvf[:, 0], gy + dvf[:, 1], gz + dvf[:, 2]]  # sample coords x, y, z
        lo = [np.floor(a) for a in s]
        fr = [a - b for a, b in zip(s, lo)]
        lo = [b.astype(np.int64) for b in lo]
        size = (X, Y, Z)
        self.corners = []
        for dz, dy, dx in product((0, 1), repeat=3):
            offs = (dx, dy, dz)
            idx3 = [lo[a] + offs[a] for a in range(3)]
            valid = np.ones(idx3[0].shape, dtype=bool)
            for a in range(3):
                valid &= (idx3[a] >= 0) & (idx3[a] < size[a])
            w1 = [fr[a] if offs[a] else 1.0 - fr[a] for a in range(3)]
            sign = [1.0 if offs[a] else -1.0 for a in range(3)]
            ix = np.clip(idx3[0], 0, X - 1)
            iy = np.clip(idx3[1], 0, Y - 1)
            iz = np.clip(idx3[2], 0, Z - 1)
            flat = ((iz * Y + iy) * X + ix).reshape(N, -1)
            vf = valid.reshape(N, -1).astype(dvf.dtype)
            w = (w1[0] * w1[1] * w1[2]).reshape(N, -1) * vf
            # d weight / d coord_a, masked by validity
            dw = [
                (sign[0] * w1[1] * w1[2]).reshape(N, -1) * vf,
                (w1[0] * sign[1] * w1[2]).reshape(N, -1) * vf,
                (w1[0] * w1[1] * sign[2]).reshape(N, -1) * vf,
            ]
            self.corners.append((flat, w, dw))

    def sample(self, src):
        N, C = src.shape[:2]
        sf = src.reshape(N, C, -1)
        out = np.zeros_like(sf)
        for flat, w, _ in self.corners:
            for n in range(N):
                out[n] += sf[n][:, flat[n]] * w[n]
        return out.reshape(src.shape)

    def grad_source(self, g):
        N, C = g.shape[:2]
        V = int(np.prod(self.shape))
        gf = g.reshape(N, C, -1)
        out = np.zeros((N, C, V), dtype=g.dtype)
        idx = [np.concatenate([c[0][n] for c in self.corners]) for n in range(N)]
        for n in range(N):
            wn = [c[1][n] for c in self.corners]
            for ch in range(C):
                weights = np.concatenate([gf[n, ch] * w for w in wn])
                out[n, ch] = np.bincount(idx[n], weights=weights, minlength=V)
        return out.reshape(g.shape)

    def grad_dvf(self, g, src):
        N, C = src.shape[:2]
        sf = src.reshape(N, C, -1)
        gf = g.reshape(N, C, -1)
        out = np.zeros((N, 3, sf.shape[2]), dtype=g.dtype)
        for flat, _, dw in self.corners:
            for n in range(N):
                s = (sf[n][:, flat[n]] * gf[n]).sum(axis=0)
                for a in range(3):
                    out[n, a] += s * dw[a][n]
        return out.reshape((N, 3) + self.shape)


def warp_trilinear(source, dvf):
    """Pull-sample ``source`` [C,Z,Y,X] (or batched) at ``p + dvf(p)``."""
    src, single = _batched(source, 5)
    d, _ = _batched(dvf, 5)
    _check_warp_shapes(src.shape, d.shape)
    out = _Trilinear(d.astype(float)).sample(src.astype(float))
    return out[0] if single else out


def warp_nearest(labels, dvf, fill=0):
    """Nearest-neighbour pull warp of an integer grid [Z,Y,X] by dvf [3,Z,Y,X]."""
    labels = np.asarray(labels)
    Z, Y, X = labels.shape
    dvf = np.asarray(dvf)
    if dvf.shape != (3, Z, Y, X):
        raise ShapeError(f"dvf {dvf.shape} does not match labels {labels.shape}")
    gz, gy, gx = np.meshgrid(np.arange(Z), np.arange(Y), np.arange(X), indexing="ij")
    ix = np.floor(gx + dvf[0] + 0.5).astype(np.int64)
    iy = np.floor(gy + dvf[1] + 0.5).astype(np.int64)
    iz = np.floor(gz + dvf[2] + 0.5).astype(np.int64)
    valid = (ix >= 0) & (ix < X) & (iy >= 0) & (iy < Y) & (iz >= 0) & (iz < Z)
    out = np.full(labels.shape, fill, dtype=labels.dtype)
    out[valid] = labels[iz[valid], iy[valid], ix[valid]]
    return out


def _check_warp_shapes(src_shape, dvf_shape):
    if len(dvf_shape) != 5 or dvf_shape[1] != 3:
        raise ShapeError(f"dvf must be [N,3,Z,Y,X], got {dvf_shape}")
    if src_shape[0] != dvf_shape[0] or src_shape[2:] != dvf_shape[2:]:
        raise ShapeError(f"source {src_shape} and dvf {dvf_shape} grids differ")


def compose_dvf(matrix, deform):
    """Fuse an affine matrix with a deformable field: u(p) = d(p_hat) + p_hat - p."""
    d, single = _batched(deform, 5)
    mats = np.asarray(matrix, dtype=float)
    if mats.ndim == 2:
        mats = np.broadcast_to(mats, (d.shape[0], 4, 4))
    aff, _ = _affine_field(mats, d.shape[2:])
    out = _Trilinear(aff).sample(d.astype(float)) + aff
    return out[0] if single else out


def jacobian_determinant(dvf):
    """det(I + grad u) per voxel using forward differences (zero at the far edge)."""
    from .autodiff.kernels import forward_diff

    u = np.asarray(dvf, dtype=float)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"dvf must be [3,Z,Y,X], got {u.shape}")
    J = np.empty(u.shape[1:] + (3, 3))
    axes = (-1, -2, -3)  # d/dx, d/dy, d/dz
    for i in range(3):
        for j in range(3):
            J[..., i, j] = forward_diff(u[i], axes[j]) + (1.0 if i == j else 0.0)
    return np.linalg.det(J)


def translate(volume, shift):
    """Resample ``volume`` so that out(p) = volume(p + shift); shift is (x, y, z)."""
    vol = np.asarray(volume, dtype=float)
    field = np.zeros((3,) + vol.shape[-3:])
    for a in range(3):
        field[a] = shift[a]
    if vol.ndim == 3:
        return warp_trilinear(vol[None], field)[0]
    return warp_trilinear(vol, field)


# -- graph ops -----------------------------------------------------------------

class AffineMatrixOp(Op):
    """[N, 15] affine parameters -> [N, 4, 4] matrices."""

    name = "affine_matrix"

    def forward(self, ctx, params):
        if params.ndim != 2 or params.shape[1] != 15:
            raise ShapeError(f"affine params must be [N,15], got {params.shape}")
        mats, jacs = zip(*(_matrix_and_jacobian(v) for v in params))
        ctx["jac"] = np.stack(jacs)
        return np.stack(mats)

    def backward(self, ctx, g, needs):
        return (np.einsum("nkij,nij->nk", ctx["jac"], g),)


class AffineFieldOp(Op):
    """[N, 4, 4] matrices -> [N, 3, Z, Y, X] displacement about the grid centre."""

    name = "affine_field"

    def forward(self, ctx, mats, extents):
        if mats.ndim != 3 or mats.shape[1:] != (4, 4):
            raise ShapeError(f"matrices must be [N,4,4], got {mats.shape}")
        field, q = _affine_field(mats, extents)
        ctx["q"] = q
        return field

    def backward(self, ctx, g, needs, extents):
        q = ctx["q"]
        dm = np.zeros((g.shape[0], 4, 4), dtype=g.dtype)
        dm[:, :3, :3] = np.einsum("nizyx,jzyx->nij", g, q)
        dm[:, :3, 3] = g.sum(axis=(2, 3, 4))
        return (dm,)


class TrilinearWarpOp(Op):
    name = "trilinear_warp"

    def forward(self, ctx, src, dvf):
        _check_warp_shapes(src.shape, dvf.shape)
        tri = _Trilinear(dvf)
        ctx["saved"] = (tri, src)
        return tri.sample(src)

    def backward(self, ctx, g, needs):
        tri, src = ctx["saved"]
        gs = tri.grad_source(g) if needs[0] else None
        gd = tri.grad_dvf(g, src) if needs[1] else None
        return gs, gd


def affine_matrix_node(params):
    return params.graph.apply(AffineMatrixOp(), (params,))


def affine_field_node(mats, extents):
    return mats.graph.apply(AffineFieldOp(), (mats,), extents=tuple(int(e) for e in extents))


def warp_node(src, dvf):
    return src.graph.apply(TrilinearWarpOp(), (src, dvf))


def compose_dvf_node(aff_field, deform):
    """Graph form of :func:`compose_dvf`, given the affine displacement node."""
    return warp_node(deform, aff_field) + aff_field
