"""Numba-JIT kernel implementations (the default backend).

Scalar inner loops compiled with @njit(cache=True); single-threaded and
deterministic. Convolution accumulates in (ci, ky, kx) order to match
the numpy backend.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _conv2d_fwd_s1(xp, w, b, ho, wo):
    # stride-1 fast path: contiguous row views keep the inner loop SIMD-able
    cout, cin, kh, kw = w.shape
    y = np.empty((cout, ho, wo), dtype=xp.dtype)
    for co in range(cout):
        y[co, :, :] = b[co]
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[co, ci, ky, kx]
                    for oy in range(ho):
                        yrow = y[co, oy]
                        xrow = xp[ci, oy + ky]
                        for ox in range(wo):
                            yrow[ox] += wv * xrow[ox + kx]
    return y


@njit(cache=True)
def _conv2d_fwd(xp, w, b, stride, ho, wo):
    cout, cin, kh, kw = w.shape
    y = np.empty((cout, ho, wo), dtype=xp.dtype)
    for co in range(cout):
        y[co, :, :] = b[co]
    for co in range(cout):
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[co, ci, ky, kx]
                    for oy in range(ho):
                        iy = oy * stride + ky
                        for ox in range(wo):
                            y[co, oy, ox] += wv * xp[ci, iy, ox * stride + kx]
    return y


def conv2d_fwd(x, w, b, stride=1, pad=1):
    """[Cin,H,W] conv [Cout,Cin,kh,kw] + b -> [Cout,Ho,Wo]."""
    cin, height, width = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho = (height + 2 * pad - kh) // stride + 1
    wo = (width + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if stride == 1:
        return _conv2d_fwd_s1(xp, w, b, ho, wo)
    return _conv2d_fwd(xp, w, b, stride, ho, wo)


@njit(cache=True)
def _conv2d_bwd(xp, w, gy, need_dx, need_dw):
    cout, cin, kh, kw = w.shape
    height, width = gy.shape[1], gy.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for co in range(cout):
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    acc = 0.0
                    wv = w[co, ci, ky, kx]
                    for oy in range(height):
                        grow = gy[co, oy]
                        xrow = xp[ci, oy + ky]
                        drow = dxp[ci, oy + ky]
                        if need_dx and need_dw:
                            for ox in range(width):
                                g = grow[ox]
                                acc += g * xrow[ox + kx]
                                drow[ox + kx] += g * wv
                        elif need_dw:
                            for ox in range(width):
                                acc += grow[ox] * xrow[ox + kx]
                        else:
                            for ox in range(width):
                                drow[ox + kx] += grow[ox] * wv
                    dw[co, ci, ky, kx] = acc
    return dxp, dw


def conv2d_bwd(x, w, gy, need_dx=True, need_dw=True):
    """Gradients of stride-1 same-padding conv2d_fwd w.r.t. x and w."""
    kh = w.shape[2]
    pad = (kh - 1) // 2
    height, width = x.shape[1], x.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    dxp, dw = _conv2d_bwd(xp, w, gy, need_dx, need_dw)
    dx = dxp[:, pad : pad + height, pad : pad + width].copy() if need_dx else None
    return dx, (dw if need_dw else None)


@njit(cache=True)
def _attn_fwd(q, k, v, row_off, col_off, allow, scl):
    n_q, d = q.shape
    n_k = k.shape[0]
    dv_dim = v.shape[1]
    out = np.zeros((n_q, dv_dim), dtype=q.dtype)
    probs = np.zeros((n_q, n_k), dtype=q.dtype)
    n_rb = row_off.shape[0] - 1
    n_cb = col_off.shape[0] - 1
    for bi in range(n_rb):
        for i in range(row_off[bi], row_off[bi + 1]):
            m = -np.inf
            for bj in range(n_cb):
                if not allow[bi, bj]:
                    continue
                for j in range(col_off[bj], col_off[bj + 1]):
                    s = 0.0
                    for a in range(d):
                        s += q[i, a] * k[j, a]
                    s *= scl
                    probs[i, j] = s
                    if s > m:
                        m = s
            total = 0.0
            for bj in range(n_cb):
                if not allow[bi, bj]:
                    continue
                for j in range(col_off[bj], col_off[bj + 1]):
                    e = np.exp(probs[i, j] - m)
                    probs[i, j] = e
                    total += e
            inv = 1.0 / total
            for bj in range(n_cb):
                if not allow[bi, bj]:
                    continue
                for j in range(col_off[bj], col_off[bj + 1]):
                    p = probs[i, j] * inv
                    probs[i, j] = p
                    for a in range(dv_dim):
                        out[i, a] += p * v[j, a]
    return out, probs


def attn_fwd(q, k, v, row_off, col_off, allow, scl):
    """Blocked masked attention forward; skips disallowed key blocks."""
    return _attn_fwd(q, k, v, row_off, col_off, allow, scl)


@njit(cache=True)
def _attn_bwd(gy, q, k, v, probs, row_off, col_off, allow, scl):
    d = q.shape[1]
    dv_dim = v.shape[1]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    n_rb = row_off.shape[0] - 1
    n_cb = col_off.shape[0] - 1
    for bi in range(n_rb):
        for i in range(row_off[bi], row_off[bi + 1]):
            inner = 0.0
            for bj in range(n_cb):
                if not allow[bi, bj]:
                    continue
                for j in range(col_off[bj], col_off[bj + 1]):
                    dp = 0.0
                    for a in range(dv_dim):
                        dp += gy[i, a] * v[j, a]
                        dv[j, a] += probs[i, j] * gy[i, a]
                    inner += dp * probs[i, j]
            for bj in range(n_cb):
                if not allow[bi, bj]:
                    continue
                for j in range(col_off[bj], col_off[bj + 1]):
                    dp = 0.0
                    for a in range(dv_dim):
                        dp += gy[i, a] * v[j, a]
                    ds = probs[i, j] * (dp - inner) * scl
                    for a in range(d):
                        dq[i, a] += ds * k[j, a]
                        dk[j, a] += ds * q[i, a]
    return dq, dk, dv


def attn_bwd(gy, q, k, v, probs, row_off, col_off, allow, scl):
    """Gradients of attn_fwd w.r.t. q, k, v."""
    return _attn_bwd(gy, q, k, v, probs, row_off, col_off, allow, scl)
