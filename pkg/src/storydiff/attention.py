"""Block-causal and windowed attention masks, plus the masked attention op.

Condition tokens are grouped into frame blocks: all tokens produced by
encoding one (caption, frame) pair share a block. Masks are defined at
block granularity:

* training mask: block i may attend block j iff j <= i (a block always
  sees itself, so every row keeps at least one allowed entry);
* inference mask: additionally j >= i - window, bounding the temporal
  receptive field to the most recent ``window`` preceding blocks.

``masked_attention`` evaluates softmax(q k^T / sqrt(d) + bias) v through
a blocked kernel that skips disallowed key blocks outright rather than
adding -inf and exponentiating zeros; the wall-clock benefit of a small
window is therefore mechanical, not cosmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff, kernels
from .autodiff import Tensor
from .errors import ConfigError, MaskError, ShapeError


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    """Additive attention bias with block structure metadata.

    ``allow[i, j]`` says whether query block i may read key block j; the
    dense ``bias`` view (0 allowed, -inf blocked) is derived lazily.
    ``window`` is None for the full block-causal mask.
    """

    row_sizes: tuple
    col_sizes: tuple
    allow: np.ndarray
    window: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.row_sizes or not self.col_sizes:
            raise ConfigError("mask needs at least one block per side")
        if any(s < 1 for s in self.row_sizes) or any(s < 1 for s in self.col_sizes):
            raise ConfigError("mask block sizes must be >= 1")
        if self.allow.shape != (len(self.row_sizes), len(self.col_sizes)):
            raise ShapeError(
                f"allow {self.allow.shape} vs blocks "
                f"({len(self.row_sizes)}, {len(self.col_sizes)})"
            )
        if not self.allow.any(axis=1).all():
            raise MaskError("every query block must be allowed at least one key block")

    @property
    def n_rows(self) -> int:
        return int(sum(self.row_sizes))

    @property
    def n_cols(self) -> int:
        return int(sum(self.col_sizes))

    @property
    def row_offsets(self) -> np.ndarray:
        if "row_off" not in self._cache:
            self._cache["row_off"] = np.cumsum([0] + list(self.row_sizes)).astype(np.int64)
        return self._cache["row_off"]

    @property
    def col_offsets(self) -> np.ndarray:
        if "col_off" not in self._cache:
            self._cache["col_off"] = np.cumsum([0] + list(self.col_sizes)).astype(np.int64)
        return self._cache["col_off"]

    @property
    def block_map(self) -> np.ndarray:
        """Token index -> block index, for the query side."""
        return np.repeat(np.arange(len(self.row_sizes)), self.row_sizes)

    @property
    def col_block_map(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.col_sizes)), self.col_sizes)

    @property
    def bias(self) -> np.ndarray:
        """Dense n_rows x n_cols additive bias: 0 allowed, -inf blocked."""
        if "bias" not in self._cache:
            token_allow = self.allow[np.ix_(self.block_map, self.col_block_map)]
            bias = np.where(token_allow, 0.0, -np.inf)
            self._cache["bias"] = bias
        return self._cache["bias"]

    def query_block_view(self, block: int) -> "MaskMatrix":
        """Rectangular sub-mask whose query rows are a single block."""
        return MaskMatrix(
            row_sizes=(self.row_sizes[block],),
            col_sizes=self.col_sizes,
            allow=self.allow[block : block + 1],
            window=self.window,
        )


def build_train_mask(block_sizes) -> MaskMatrix:
    """Block-causal mask: block i attends blocks j <= i (diagonal included)."""
    block_sizes = tuple(int(s) for s in block_sizes)
    if not block_sizes:
        raise ConfigError("build_train_mask: empty block list")
    n = len(block_sizes)
    idx = np.arange(n)
    allow = idx[None, :] <= idx[:, None]
    return MaskMatrix(block_sizes, block_sizes, allow, window=None)


def build_inference_mask(block_sizes, window: int) -> MaskMatrix:
    """Windowed causal mask: block i attends j with 0 <= i - j <= window.

    window >= len(block_sizes) - 1 degenerates to the training mask's
    allowed set; window = 0 is block-diagonal.
    """
    window = int(window)
    if window < 0:
        raise ConfigError(f"window must be >= 0, got {window}")
    block_sizes = tuple(int(s) for s in block_sizes)
    if not block_sizes:
        raise ConfigError("build_inference_mask: empty block list")
    n = len(block_sizes)
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    allow = (diff >= 0) & (diff <= window)
    return MaskMatrix(block_sizes, block_sizes, allow, window=window)


def full_mask(n_query_rows: int, n_key_rows: int) -> MaskMatrix:
    """All-allowed rectangular mask (one block per side)."""
    allow = np.ones((1, 1), dtype=bool)
    return MaskMatrix((int(n_query_rows),), (int(n_key_rows),), allow, window=None)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: MaskMatrix) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v under a block mask; differentiable.

    q is [n_q, d]; k and v are [n_k, d] with matching n_k; the mask's
    row/col token counts must equal n_q/n_k.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 2 or kd.ndim != 2 or vd.ndim != 2:
        raise ShapeError("masked_attention expects 2-D q, k, v")
    if kd.shape[0] != vd.shape[0] or kd.shape[1] != qd.shape[1]:
        raise ShapeError(
            f"masked_attention: q {qd.shape}, k {kd.shape}, v {vd.shape}"
        )
    if mask.n_rows != qd.shape[0] or mask.n_cols != kd.shape[0]:
        raise ShapeError(
            f"mask is {mask.n_rows}x{mask.n_cols} but q has {qd.shape[0]} rows "
            f"and k has {kd.shape[0]}"
        )
    impl = kernels.active()
    scl = 1.0 / np.sqrt(qd.shape[1])
    row_off, col_off, allow = mask.row_offsets, mask.col_offsets, mask.allow
    out, probs = impl.attn_fwd(qd, kd, vd, row_off, col_off, allow, scl)

    def backward(g):
        return impl.attn_bwd(g, qd, kd, vd, probs, row_off, col_off, allow, scl)

    return autodiff._node(out, (q, k, v), backward)


def attention_cost(
    n_blocks: int, tokens_per_block: int, d: int, window: int | None = None
) -> int:
    """Exact multiply-add count of the blocked kernel.

    Per query row with a allowed key tokens: 2*d*a for the scores,
    2*d*a for the value mixing, and 3*a for the softmax (subtract max,
    exponentiate, normalise). Disallowed blocks cost nothing, so the
    windowed/full ratio equals the allowed-pair ratio.
    """
    if n_blocks < 1 or tokens_per_block < 1 or d < 1:
        raise ConfigError("attention_cost: sizes must be positive")
    total_allowed_rows = 0
    for i in range(n_blocks):
        visible = i + 1 if window is None else min(i, int(window)) + 1
        total_allowed_rows += visible * tokens_per_block
    allowed_pairs = total_allowed_rows * tokens_per_block
    return allowed_pairs * (4 * d + 3)
