"""Pure-numpy kernel implementations (the fallback backend).

Same call signatures and numerics as the numba backend; inner loops are
expressed as vectorized slab operations instead of JIT-compiled scalar
loops. Convolution accumulates in (ci, ky, kx) order so both backends
agree to the last bit on typical inputs.
"""

import numpy as np

NAME = "numpy"


def conv2d_fwd(x, w, b, stride=1, pad=1):
    """[Cin,H,W] conv [Cout,Cin,kh,kw] + b -> [Cout,Ho,Wo]."""
    cin, height, width = x.shape
    cout, _, kh, kw = w.shape
    ho = (height + 2 * pad - kh) // stride + 1
    wo = (width + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    y = np.empty((cout, ho, wo), dtype=x.dtype)
    y[:] = b[:, None, None]
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                win = xp[ci, ky : ky + stride * (ho - 1) + 1 : stride,
                         kx : kx + stride * (wo - 1) + 1 : stride]
                y += w[:, ci, ky, kx][:, None, None] * win[None]
    return y


def conv2d_bwd(x, w, gy, need_dx=True, need_dw=True):
    """Gradients of stride-1 same-padding conv2d_fwd w.r.t. x and w."""
    cin, height, width = x.shape
    cout, _, kh, kw = w.shape
    pad = (kh - 1) // 2
    dx = np.zeros_like(x) if need_dx else None
    dw = np.zeros_like(w) if need_dw else None
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    dxp = np.zeros_like(xp) if need_dx else None
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                win = xp[ci, ky : ky + height, kx : kx + width]
                if need_dw:
                    dw[:, ci, ky, kx] = np.tensordot(gy, win, axes=([1, 2], [0, 1]))
                if need_dx:
                    dxp[ci, ky : ky + height, kx : kx + width] += np.tensordot(
                        w[:, ci, ky, kx], gy, axes=(0, 0)
                    )
    if need_dx:
        dx = dxp[:, pad : pad + height, pad : pad + width].copy()
    return dx, dw


def _col_index(col_off, allow_row):
    cols = [
        np.arange(col_off[bj], col_off[bj + 1])
        for bj in np.nonzero(allow_row)[0]
    ]
    return np.concatenate(cols)


def attn_fwd(q, k, v, row_off, col_off, allow, scl):
    """Blocked masked attention forward.

    Key blocks disallowed for a whole query block are skipped, not biased.
    Returns the output rows and the dense probability matrix (blocked
    entries stay exactly zero) for reuse in the backward pass.
    """
    n_q = q.shape[0]
    n_k = k.shape[0]
    out = np.zeros((n_q, v.shape[1]), dtype=q.dtype)
    probs = np.zeros((n_q, n_k), dtype=q.dtype)
    for bi in range(len(row_off) - 1):
        r0, r1 = row_off[bi], row_off[bi + 1]
        idx = _col_index(col_off, allow[bi])
        s = (q[r0:r1] @ k[idx].T) * scl
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        p = e / e.sum(axis=1, keepdims=True)
        probs[r0:r1, idx] = p
        out[r0:r1] = p @ v[idx]
    return out, probs


def attn_bwd(gy, q, k, v, probs, row_off, col_off, allow, scl):
    """Gradients of attn_fwd w.r.t. q, k, v."""
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for bi in range(len(row_off) - 1):
        r0, r1 = row_off[bi], row_off[bi + 1]
        idx = _col_index(col_off, allow[bi])
        p = probs[r0:r1][:, idx]
        g = gy[r0:r1]
        dv[idx] += p.T @ g
        dp = g @ v[idx].T
        ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        dq[r0:r1] = (ds @ k[idx]) * scl
        dk[idx] += (ds.T @ q[r0:r1]) * scl
    return dq, dk, dv
