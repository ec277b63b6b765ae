"""Conditional noise-prediction network.

A compact residual conv stack at full resolution (no down/upsampling):
stem conv, then n_blocks residual blocks with a per-channel timestep
shift, with one image-to-condition cross-attention inserted after the
first block, and a zero-initialised output conv.

The conditioning path: masked self-attention over the memory tokens
(history blocks + current caption block) restricted by the block mask,
keeping only the current block's refined rows, then layer norm, then the
optional residual bottleneck adapter, immediately before cross-attention.
Because the refined current rows read only key blocks the mask allows,
frames outside the window cannot influence the output at all.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import MaskMatrix, full_mask, masked_attention
from .config import ModelConfig
from .encoder import ConditionMemory, init_encoder_params
from .errors import ConfigError, ContractError, ShapeError
from .params import ParamStore
from .schedule import DiffusionSchedule, timestep_embedding
from .seeding import derive_seed

ADAPTER_PREFIX = "adapter."


def init_params(cfg: ModelConfig, seed: int, zero_init_outputs: bool = True) -> ParamStore:
    """Build the full parameter store (encoder + conditioning + denoiser).

    Base weights are seeded Gaussians with std 0.02; the output
    projections of the residual branches (second conv of each block, the
    cross-attention out-projection and the adapter up-projection) start
    at zero unless zero_init_outputs is False (useful for gradient
    checks, which want non-degenerate flows). Adapter entries draw from
    their own derived stream, so stores with and without an adapter share
    identical base weights for the same seed.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_encoder_params(store, cfg, rng)

    def normal(shape):
        return rng.normal(0.0, 0.02, shape)

    def branch_init(shape):
        return np.zeros(shape) if zero_init_outputs else normal(shape)

    d, ch = cfg.d_model, cfg.channels
    c_in = cfg.image_shape[0]

    for h in range(cfg.n_cond_heads):
        store.add(f"cond.h{h}.wq", normal((d, cfg.head_dim)))
        store.add(f"cond.h{h}.wk", normal((d, cfg.head_dim)))
        store.add(f"cond.h{h}.wv", normal((d, cfg.head_dim)))
    store.add("cond.wo", normal((d, d)))
    store.add("cond.ln.gamma", np.ones(d))
    store.add("cond.ln.beta", np.zeros(d))

    store.add("den.stem.w", normal((ch, c_in, 3, 3)))
    store.add("den.stem.b", np.zeros(ch))
    store.add("den.temb.w1", normal((d, d)))
    store.add("den.temb.b1", np.zeros(d))
    for i in range(cfg.n_blocks):
        store.add(f"den.block{i}.conv1.w", normal((ch, ch, 3, 3)))
        store.add(f"den.block{i}.conv1.b", np.zeros(ch))
        store.add(f"den.block{i}.ln.gamma", np.ones(ch))
        store.add(f"den.block{i}.ln.beta", np.zeros(ch))
        store.add(f"den.block{i}.gain.w", normal((d, ch)))
        store.add(f"den.block{i}.gain.b", np.zeros(ch))
        store.add(f"den.block{i}.shift.w", normal((d, ch)))
        store.add(f"den.block{i}.shift.b", np.zeros(ch))
        store.add(f"den.block{i}.cond_gain.w", normal((d, ch)))
        store.add(f"den.block{i}.cond_gain.b", np.zeros(ch))
        store.add(f"den.block{i}.cond_shift.w", normal((d, ch)))
        store.add(f"den.block{i}.cond_shift.b", np.zeros(ch))
        store.add(f"den.block{i}.conv2.w", branch_init((ch, ch, 3, 3)))
        store.add(f"den.block{i}.conv2.b", np.zeros(ch))
    # the cross-attention out-projection starts random, not zero: a dead
    # conditioning branch trains far too slowly at desk-scale step budgets
    store.add("den.xattn.wq", normal((ch, d)))
    store.add("den.xattn.wk", normal((d, d)))
    store.add("den.xattn.wv", normal((d, d)))
    store.add("den.xattn.wo", normal((d, ch)))
    store.add("den.out.w", normal((c_in, ch, 3, 3)))
    store.add("den.out.b", np.zeros(c_in))
    store.add("den.out2.w", normal((c_in, ch, 3, 3)))
    store.add("den.out2.b", np.zeros(c_in))

    if cfg.adapter_enabled:
        arng = np.random.default_rng(derive_seed(seed, "adapter"))
        r = cfg.adapter_bottleneck
        store.add("adapter.down.w", arng.normal(0.0, 0.02, (d, r)))
        store.add("adapter.down.b", np.zeros(r))
        store.add("adapter.up.w", np.zeros((r, d)))
        store.add("adapter.up.b", np.zeros(d))
    return store


def adapter_apply(cond, params: ParamStore):
    """Residual bottleneck out = in + up(tanh(down(in))).

    With the up projection still at its zero init this is exactly the
    identity.
    """
    d = params["adapter.down.w"].data.shape[0]
    if cond.data.ndim != 2 or cond.data.shape[1] != d:
        raise ContractError(
            f"adapter expects [*, {d}] features, got {cond.data.shape}"
        )
    h = ad.tanh(ad.bias_add(ad.matmul(cond, params["adapter.down.w"]),
                            params["adapter.down.b"]))
    up = ad.bias_add(ad.matmul(h, params["adapter.up.w"]), params["adapter.up.b"])
    return ad.add(cond, up)


def trainable_names(params: ParamStore, mode: str) -> set:
    """Parameter names updated in a given training mode."""
    if mode == "full":
        return set(params.names())
    if mode == "adapter_only":
        names = {n for n in params.names() if n.startswith(ADAPTER_PREFIX)}
        if not names:
            raise ConfigError("adapter_only training requires an adapter in the store")
        return names
    raise ConfigError(f"unknown training mode {mode!r}")


def _condition_features(memory: ConditionMemory, mask: MaskMatrix,
                        params: ParamStore, cfg: ModelConfig):
    """Refined current-block condition rows [b_tok, d_model].

    Queries come from the current block only; keys/values span the whole
    memory, restricted to the key blocks the mask allows for the final
    block. Disallowed blocks are skipped by the kernel, so they cannot
    leak into the result.
    """
    tokens = memory.tokens()
    sizes = memory.block_sizes()
    if mask.n_rows != tokens.data.shape[0] or mask.n_cols != tokens.data.shape[0]:
        raise ShapeError(
            f"mask {mask.n_rows}x{mask.n_cols} does not cover {tokens.data.shape[0]} "
            "memory tokens"
        )
    if tuple(mask.row_sizes) != sizes:
        raise ContractError(
            f"mask blocks {mask.row_sizes} do not match memory blocks {sizes}"
        )
    last = len(sizes) - 1
    view = mask.query_block_view(last)
    n = tokens.data.shape[0]
    current = ad.slice_rows(tokens, n - sizes[-1], n)

    heads = []
    for h in range(cfg.n_cond_heads):
        q = ad.matmul(current, params[f"cond.h{h}.wq"])
        k = ad.matmul(tokens, params[f"cond.h{h}.wk"])
        v = ad.matmul(tokens, params[f"cond.h{h}.wv"])
        heads.append(masked_attention(q, k, v, view))
    stacked = heads[0] if len(heads) == 1 else ad.transpose(
        ad.concat_rows([ad.transpose(h) for h in heads])
    )
    refined = ad.matmul(stacked, params["cond.wo"])
    cond = ad.layer_norm(
        ad.add(current, refined), params["cond.ln.gamma"], params["cond.ln.beta"]
    )
    if cfg.adapter_enabled and "adapter.down.w" in params:
        cond = adapter_apply(cond, params)
    return cond


def denoise(x_t, t: int, memory: ConditionMemory, mask: MaskMatrix,
            params: ParamStore, cfg: ModelConfig, sched: DiffusionSchedule):
    """Predict the noise in x_t at step t given the condition memory.

    Two output heads combine as eps_hat = noise_head + sqrt(abar_t) *
    correction_head. The noise head trains at full weight for every
    timestep, which keeps the reverse chain calibrated; the correction
    head carries the signal-dependent (hence condition-dependent) part,
    learns it where sqrt(abar_t) is large and deploys it at every step
    with the exact structural scaling. Output shape equals the input
    shape; the result is deterministic in (inputs, params) and
    differentiable end to end.
    """
    x_t = ad.as_tensor(x_t)
    if x_t.data.shape != cfg.image_shape:
        raise ShapeError(f"x_t shape {x_t.data.shape}, expected {cfg.image_shape}")
    if not 1 <= t <= sched.timesteps:
        raise ContractError(f"t={t} outside [1, {sched.timesteps}]")
    cond = _condition_features(memory, mask, params, cfg)
    # pooled condition: one vector steering per-channel statistics (the
    # fast path for global properties such as the scene background)
    pool = ad.Tensor(np.full((1, cond.data.shape[0]), 1.0 / cond.data.shape[0]))
    cond_vec = ad.matmul(pool, cond)

    temb = ad.Tensor(timestep_embedding(t, cfg.d_model))
    temb = ad.reshape(temb, (1, cfg.d_model))
    temb = ad.tanh(ad.bias_add(ad.matmul(temb, params["den.temb.w1"]),
                               params["den.temb.b1"]))

    ch, size = cfg.channels, cfg.image_shape[1]
    one = ad.Tensor(np.ones((1, ch)))

    def film(prefix, source):
        gain = ad.bias_add(ad.matmul(source, params[f"{prefix}.w"]),
                           params[f"{prefix}.b"])
        return gain

    h = ad.conv2d(x_t, params["den.stem.w"], params["den.stem.b"])
    for i in range(cfg.n_blocks):
        a = ad.conv2d(h, params[f"den.block{i}.conv1.w"],
                      params[f"den.block{i}.conv1.b"])
        # normalise over channels per pixel, then condition via FiLM
        a = ad.reshape(ad.transpose(ad.layer_norm(
            ad.transpose(ad.reshape(a, (ch, size * size))),
            params[f"den.block{i}.ln.gamma"], params[f"den.block{i}.ln.beta"])),
            (ch, size, size))
        # feature-wise gain and shift from the timestep and the condition
        gain = ad.add(one, ad.add(film(f"den.block{i}.gain", temb),
                                  film(f"den.block{i}.cond_gain", cond_vec)))
        shift = ad.add(film(f"den.block{i}.shift", temb),
                       film(f"den.block{i}.cond_shift", cond_vec))
        a = ad.scale_chw(a, ad.reshape(gain, (ch,)))
        a = ad.bias_add_chw(a, ad.reshape(shift, (ch,)))
        a = ad.conv2d(ad.tanh(a), params[f"den.block{i}.conv2.w"],
                      params[f"den.block{i}.conv2.b"])
        h = ad.add(h, a)
        if i == 0:
            h = ad.add(h, _cross_attend(h, cond, params, cfg, ch, size))
    h = ad.tanh(h)
    noise_head = ad.conv2d(h, params["den.out.w"], params["den.out.b"])
    correction = ad.conv2d(h, params["den.out2.w"], params["den.out2.b"])
    return ad.add(noise_head, ad.scale(correction, np.sqrt(sched.alpha_bar[t])))


def _cross_attend(h, cond, params, cfg, ch, size):
    """Image pixels as queries over the condition rows; residual update."""
    flat = ad.transpose(ad.reshape(h, (ch, size * size)))
    q = ad.matmul(flat, params["den.xattn.wq"])
    k = ad.matmul(cond, params["den.xattn.wk"])
    v = ad.matmul(cond, params["den.xattn.wv"])
    att = masked_attention(q, k, v, full_mask(size * size, cond.data.shape[0]))
    upd = ad.matmul(att, params["den.xattn.wo"])
    return ad.reshape(ad.transpose(upd), (ch, size, size))
