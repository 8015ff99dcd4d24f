"""Raw numpy kernels behind the differentiable ops.

Every function here works on plain ``ndarray`` values laid out as
``[batch, channel, z, y, x]``. Reductions run in a fixed order so that
repeated calls with identical inputs are bit-identical.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _conv_same_s1(x, w):
    # Shift-and-matmul over the flattened padded volume: every kernel offset
    # is a contiguous window of one buffer. Two layouts, picked by shape:
    # "stacked" multiplies all 27 taps at once (inner dim Ci) and then adds
    # 27 shifted slices; "partial" copies the 9 in-plane shifts into the
    # inner dim (9*Ci) and adds 3 shifted slices. The second keeps BLAS
    # busy when Ci is tiny or the layer is wide.
    N, Ci, Z, Y, X = x.shape
    Co, _, k, _, _ = w.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p + 1), (p, p), (p, p)))
    Zp, Yp, Xp = xp.shape[2:]
    L = Zp * Yp * Xp
    flat = xp.reshape(N, Ci, L)
    lout = Z * Yp * Xp
    out = np.zeros((N, Co, Z, Yp, Xp), dtype=x.dtype)
    if Ci <= 2 or Ci * Co >= 64:
        lx = L - ((k - 1) * Xp + k - 1)
        wk = np.ascontiguousarray(w.transpose(2, 0, 3, 4, 1)).reshape(k * Co, k * k * Ci)
        cols = np.empty((k * k, Ci, lx), dtype=x.dtype)
        for n in range(N):
            i = 0
            for b in range(k):
                for c in range(k):
                    off = b * Xp + c
                    cols[i] = flat[n, :, off:off + lx]
                    i += 1
            ys = (wk @ cols.reshape(k * k * Ci, lx)).reshape(k, Co, lx)
            o = out[n].reshape(Co, lout)
            for a in range(k):
                off = a * Yp * Xp
                o += ys[a, :, off:off + lout]
    else:
        wk = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1)).reshape(k ** 3 * Co, Ci)
        for n in range(N):
            ys = (wk @ flat[n]).reshape(k ** 3, Co, -1)
            o = out[n].reshape(Co, lout)
            idx = 0
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        off = a * Yp * Xp + b * Xp + c
                        o += ys[idx, :, off:off + lout]
                        idx += 1
    return np.ascontiguousarray(out[:, :, :, :Y, :X])


def _conv_same_s1_wgrad(x, g, k):
    N, Ci, Z, Y, X = x.shape
    Co = g.shape[1]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p + 1), (p, p), (p, p)))
    Zp, Yp, Xp = xp.shape[2:]
    flat = xp.reshape(N, Ci, Zp * Yp * Xp)
    lout = Z * Yp * Xp
    # Output gradient laid out on the padded row pitch; the extra columns
    # are zero so they contribute nothing.
    gfull = np.zeros((N, Co, Z, Yp, Xp), dtype=g.dtype)
    gfull[:, :, :, :Y, :X] = g
    gflat = gfull.reshape(N, Co, lout)
    # same 9 in-plane shifts as the forward pass; one matmul per z tap
    L = Zp * Yp * Xp
    lx = L - ((k - 1) * Xp + k - 1)
    cols = np.empty((k * k, Ci, lx), dtype=x.dtype)
    dw = np.zeros((k, Co, k * k * Ci), dtype=x.dtype)
    for n in range(N):
        i = 0
        for b in range(k):
            for c in range(k):
                off = b * Xp + c
                cols[i] = flat[n, :, off:off + lx]
                i += 1
        c2 = cols.reshape(k * k * Ci, lx)
        for a in range(k):
            off = a * Yp * Xp
            dw[a] += gflat[n] @ c2[:, off:off + lout].T
    # [a, Co, (b, c, Ci)] -> [Co, Ci, a, b, c]
    return np.ascontiguousarray(dw.reshape(k, Co, k, k, Ci).transpose(1, 4, 0, 2, 3))


def _im2col(x, k, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    v = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    N, Ci, Zo, Yo, Xo = v.shape[:5]
    cols = v.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(N, Ci * k ** 3, Zo * Yo * Xo)
    return cols, (Zo, Yo, Xo)


def conv3d(x, w, stride=1, pad=None):
    """Cross-correlation with zero padding; ``pad=None`` means (k-1)//2."""
    k = w.shape[2]
    if pad is None:
        pad = (k - 1) // 2
    if stride == 1 and k % 2 == 1 and pad == (k - 1) // 2:
        return _conv_same_s1(x, w)
    cols, (Zo, Yo, Xo) = _im2col(x, k, stride, pad)
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape(x.shape[0], w.shape[0], Zo, Yo, Xo)


def conv3d_backward(x, w, g, stride=1, pad=None, need_x=True, need_w=True):
    k = w.shape[2]
    if pad is None:
        pad = (k - 1) // 2
    dx = dw = None
    if stride == 1 and k % 2 == 1 and pad == (k - 1) // 2:
        if need_x:
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            dx = _conv_same_s1(g, wf)
        if need_w:
            dw = _conv_same_s1_wgrad(x, g, k)
        return dx, dw
    N, Ci, Z, Y, X = x.shape
    Co = w.shape[0]
    g2 = g.reshape(N, Co, -1)
    if need_w:
        cols, _ = _im2col(x, k, stride, pad)
        dw = np.zeros((Co, Ci * k ** 3), dtype=x.dtype)
        for n in range(N):
            dw += g2[n] @ cols[n].T
        dw = dw.reshape(w.shape)
    if need_x:
        Zo, Yo, Xo = g.shape[2:]
        dcols = (w.reshape(Co, -1).T @ g2).reshape(N, Ci, k, k, k, Zo, Yo, Xo)
        dxp = np.zeros((N, Ci, Z + 2 * pad, Y + 2 * pad, X + 2 * pad), dtype=x.dtype)
        s = stride
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    dxp[:, :, a:a + s * Zo:s, b:b + s * Yo:s, c:c + s * Xo:s] += dcols[:, :, a, b, c]
        dx = np.ascontiguousarray(dxp[:, :, pad:pad + Z, pad:pad + Y, pad:pad + X])
    return dx, dw


def conv_transpose3d_k2s2(x, w):
    """Transposed convolution, kernel 2, stride 2; ``w`` is [Ci, Co, 2, 2, 2]."""
    N, Ci, Z, Y, X = x.shape
    Co = w.shape[1]
    t = np.tensordot(x, w, axes=([1], [0]))  # N Z Y X Co a b c
    t = t.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return np.ascontiguousarray(t).reshape(N, Co, 2 * Z, 2 * Y, 2 * X)


def conv_transpose3d_k2s2_backward(x, w, g, need_x=True, need_w=True):
    N, Ci, Z, Y, X = x.shape
    Co = w.shape[1]
    g8 = g.reshape(N, Co, Z, 2, Y, 2, X, 2)
    dx = dw = None
    if need_x:
        # sum over o, a, b, c
        dx = np.tensordot(g8, w, axes=([1, 3, 5, 7], [1, 2, 3, 4]))  # N Z Y X Ci
        dx = np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3))
    if need_w:
        dw = np.tensordot(x, g8, axes=([0, 2, 3, 4], [0, 2, 4, 6]))  # Ci Co a b c
    return dx, dw


def box_sum(x, n):
    """Sum over an n*n*n window centred on each voxel, zero outside the grid."""
    r = (n - 1) // 2
    out = x
    for axis in (-3, -2, -1):
        size = out.shape[axis]
        acc = np.zeros_like(out)
        for d in range(-r, r + 1):
            dst = [slice(None)] * out.ndim
            src = [slice(None)] * out.ndim
            if d >= 0:
                dst[axis] = slice(0, size - d)
                src[axis] = slice(d, size)
            else:
                dst[axis] = slice(-d, size)
                src[axis] = slice(0, size + d)
            acc[tuple(dst)] += out[tuple(src)]
        out = acc
    return out


def forward_diff(x, axis):
    """x[i+1] - x[i] along ``axis``; the last slice is 0 (replicate boundary)."""
    out = np.zeros_like(x)
    n = x.shape[axis]
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    out[tuple(lo)] = x[tuple(hi)] - x[tuple(lo)]
    return out


def forward_diff_adjoint(g, axis):
    out = np.zeros_like(g)
    n = g.shape[axis]
    lo = [slice(None)] * g.ndim
    hi = [slice(None)] * g.ndim
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    out[tuple(lo)] -= g[tuple(lo)]
    out[tuple(hi)] += g[tuple(lo)]
    return out


def group_norm(x, gamma, beta, groups, eps):
    N, C = x.shape[:2]
    xr = x.reshape(N, groups, -1)
    mean = xr.mean(axis=2, keepdims=True)
    var = ((xr - mean) ** 2).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xr - mean) * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, xhat, inv


def group_norm_backward(g, xhat, inv, gamma, groups):
    N, C = g.shape[:2]
    bshape = (1, C) + (1,) * (g.ndim - 2)
    red = (0,) + tuple(range(2, g.ndim))
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    dxhat = (g * gamma.reshape(bshape)).reshape(N, groups, -1)
    xh = xhat.reshape(N, groups, -1)
    dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dx.reshape(g.shape), dgamma, dbeta


def log_softmax(z, axis=1):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))
