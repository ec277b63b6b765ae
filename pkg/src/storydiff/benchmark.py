"""Wall-clock benchmark of the blocked attention kernel.

Times the full block-causal mask against a windowed mask on the same
seeded inputs, for every available kernel backend, and pairs each timing
with the exact flop count from attention_cost. Flop counts are platform
facts; wall times are reported, never asserted against constants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import attention_cost, build_inference_mask, build_train_mask
from .errors import ConfigError


@dataclass(frozen=True)
class BenchReport:
    backend: str
    mask: str              # "full" | "windowed"
    n_blocks: int
    window: int | None
    tokens_per_block: int
    head_dim: int
    iters: int
    flops: int
    median_s: float
    iqr_s: float


def _time_kernel(impl, q, k, v, mask, iters: int):
    row_off, col_off, allow = mask.row_offsets, mask.col_offsets, mask.allow
    scl = 1.0 / np.sqrt(q.shape[1])
    impl.attn_fwd(q, k, v, row_off, col_off, allow, scl)  # warm-up / JIT
    samples = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        impl.attn_fwd(q, k, v, row_off, col_off, allow, scl)
        samples[i] = time.perf_counter() - t0
    q25, q50, q75 = np.percentile(samples, [25, 50, 75])
    return float(q50), float(q75 - q25)


def bench_attention(n_blocks: int, window: int, tokens_per_block: int,
                    head_dim: int, iters: int = 30, backends=None) -> list:
    """Benchmark full vs windowed masks; returns a list of BenchReport."""
    if iters < 30:
        raise ConfigError(f"iters must be >= 30, got {iters}")
    if window < 0:
        raise ConfigError("window must be >= 0")
    rng = np.random.default_rng(0)
    n = n_blocks * tokens_per_block
    q = rng.standard_normal((n, head_dim))
    k = rng.standard_normal((n, head_dim))
    v = rng.standard_normal((n, head_dim))
    sizes = [tokens_per_block] * n_blocks
    masks = [
        ("full", None, build_train_mask(sizes)),
        ("windowed", window, build_inference_mask(sizes, window)),
    ]
    if backends is None:
        backends = kernels.available_backends()
    reports = []
    for backend in backends:
        impl = kernels.get_backend(backend)
        for mask_name, win, mask in masks:
            median, iqr = _time_kernel(impl, q, k, v, mask, iters)
            reports.append(BenchReport(
                backend=backend,
                mask=mask_name,
                n_blocks=n_blocks,
                window=win,
                tokens_per_block=tokens_per_block,
                head_dim=head_dim,
                iters=iters,
                flops=attention_cost(n_blocks, tokens_per_block, head_dim, win),
                median_s=median,
                iqr_s=iqr,
            ))
    return reports


CSV_HEADER = ["backend", "mask", "n_blocks", "window", "tokens_per_block",
              "head_dim", "iters", "flops", "median_s", "iqr_s"]


def report_rows(reports) -> list:
    rows = []
    for r in reports:
        rows.append([
            r.backend, r.mask, r.n_blocks,
            "" if r.window is None else r.window,
            r.tokens_per_block, r.head_dim, r.iters, r.flops,
            f"{r.median_s:.9f}", f"{r.iqr_s:.9f}",
        ])
    return rows
