"""Reverse-mode automatic differentiation over numpy arrays.

The op set is deliberately small: exactly what the condition encoder, the
denoiser and the training loss are built from. Graphs are recorded eagerly;
``Tensor.backward`` walks the graph once per call and adds this pass's
gradients into ``.grad``, so calling backward twice without zeroing doubles
the gradients. Gradient checks should run in double precision; single
precision roughly multiplies finite-difference error by 100.

No general broadcasting: every op states the exact shapes it accepts.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels
from .errors import ContractError, DataError, MaskError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (used by sampling and evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus an optional backward edge into the graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(node) into .grad for every reachable node.

        self must be scalar. Gradients from repeated calls add up.
        """
        if self.data.shape != ():
            raise ContractError(
                f"backward expects a scalar loss, got shape {self.data.shape}"
            )
        order = _topo_order(self)
        flowing = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(order):
            g = flowing.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg
        for node in order:
            g = flowing.get(id(node))
            if g is None or not node.requires_grad:
                continue
            g = np.asarray(g)
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor):
    """Post-order over the graph: inputs before consumers, root last."""
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _node(data, parents, backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias to every row of x[..., d]."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias_add: {x.data.shape} + {b.data.shape}")
    nrow_axes = tuple(range(x.data.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=nrow_axes)))


def bias_add_chw(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a [C,H,W] feature map."""
    if x.data.ndim != 3 or b.data.ndim != 1 or x.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"bias_add_chw: {x.data.shape} + {b.data.shape}")
    return _node(
        x.data + b.data[:, None, None], (x, b), lambda g: (g, g.sum(axis=(1, 2)))
    )


def scale_chw(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a [C,H,W] feature map by a per-channel gain."""
    if x.data.ndim != 3 or s.data.ndim != 1 or x.data.shape[0] != s.data.shape[0]:
        raise ShapeError(f"scale_chw: {x.data.shape} * {s.data.shape}")
    xd, sd = x.data, s.data
    return _node(
        xd * sd[:, None, None],
        (x, s),
        lambda g: (g * sd[:, None, None], (g * xd).sum(axis=(1, 2))),
    )


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Axis permutation; default reverses the axes (matrix transpose in 2-D)."""
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat_rows(parts) -> Tensor:
    """Concatenate [n_i, ...] tensors along axis 0."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_rows: empty input list")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start:stop) of x; backward scatters into a zero buffer."""
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ContractError(f"slice_rows: [{start}:{stop}) out of range for {n} rows")
    xd = x.data

    def backward(g):
        gx = np.zeros_like(xd)
        gx[start:stop] = g
        return (gx,)

    return _node(xd[start:stop].copy(), (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids] with scatter-add backward.

    ids is a 1-D integer array; every id must be in [0, table rows).
    """
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding: ids must be a 1-D integer array")
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = ids[(ids < 0) | (ids >= n_rows)][0]
        raise DataError(f"embedding: token id {int(bad)} outside vocabulary of {n_rows}")
    td = table.data

    def backward(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(td[ids], (table,), backward)


def mean_all(x: Tensor) -> Tensor:
    """Scalar mean over all elements."""
    n = x.data.size
    shp = x.data.shape
    return _node(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shp, g / n, x.data.dtype),)
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Scalar mean squared error between two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size if diff.size else 1

    def backward(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _node(np.asarray((diff * diff).mean()), (a, b), backward)


def softmax_masked(logits: Tensor, bias) -> Tensor:
    """Row softmax under an additive {0, -inf} mask.

    bias has the same shape as logits (or is a single row broadcast over
    leading axes); -inf entries come out exactly 0 and each row must keep
    at least one allowed entry. Rows are stabilised by max subtraction.
    """
    bias = np.asarray(bias, dtype=logits.data.dtype)
    bias = np.broadcast_to(bias, logits.data.shape)
    z = logits.data + bias
    blocked = np.isneginf(z)
    if blocked.all(axis=-1).any():
        raise MaskError("softmax_masked: a row has no allowed entries")
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (logits,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta {gamma.data.shape}/{beta.data.shape} vs last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data

    def backward(g):
        lead = tuple(range(x.data.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _node(xhat * gd + beta.data, (x, gamma, beta), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding stride-1 convolution: [Cin,H,W] -> [Cout,H,W].

    Forward and backward run on the active kernel backend.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.data.shape}, w {w.data.shape}")
    if w.data.shape[1] != x.data.shape[0] or b.data.shape != (w.data.shape[0],):
        raise ShapeError(
            f"conv2d: channels mismatch x={x.data.shape} w={w.data.shape} b={b.data.shape}"
        )
    impl = kernels.active()
    xd, wd = x.data, w.data

    def backward(g):
        need_dx = x.requires_grad
        need_dw = w.requires_grad
        dx, dw = impl.conv2d_bwd(xd, wd, g, need_dx, need_dw)
        db = g.sum(axis=(1, 2)) if b.requires_grad else None
        return (dx if need_dx else None, dw if need_dw else None, db)

    return _node(impl.conv2d_fwd(xd, wd, b.data, 1, 1), (x, w, b), backward)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    f must be deterministic; h in [1e-6, 1e-4] is appropriate for fp64.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over elements of |analytic-numeric| / max(|numeric|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
