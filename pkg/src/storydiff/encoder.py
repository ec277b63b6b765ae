"""Trainable multimodal condition encoder.

Each (caption, frame) pair becomes one fixed-size block of condition
tokens: token + position embeddings for the caption, a linear patch
embedding for the frame, one full self-attention + MLP layer over the
joint sequence, then a cross-attention pool into b_tok learned query
slots. The current frame (no pixels yet) encodes from its caption alone,
with the frame stream replaced by a learned null token.

History blocks stay separate per frame (ordered, one block each) so the
causal mask can weight them; classifier-free dropout replaces the whole
memory with a single learned null block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import full_mask, masked_attention
from .config import ModelConfig
from .errors import ContractError
from .params import ParamStore


@dataclass
class ConditionMemory:
    """Encoded history for one target frame.

    blocks[i] is the [b_tok, d_model] encoding of history frame
    block_origin[i] (1-based); current_caption_block conditions the frame
    being generated. unconditional marks the classifier-free null memory.
    """

    blocks: list = field(default_factory=list)
    block_origin: list = field(default_factory=list)
    current_caption_block: object = None
    unconditional: bool = False

    @property
    def n_blocks(self) -> int:
        return len(self.blocks) + 1

    def tokens(self):
        """All condition tokens, history first, current block last."""
        return ad.concat_rows(list(self.blocks) + [self.current_caption_block])

    def block_sizes(self):
        b = self.current_caption_block.data.shape[0]
        return tuple([blk.data.shape[0] for blk in self.blocks] + [b])


def init_encoder_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator):
    """Add all encoder entries (prefix 'enc.') with std-0.02 Gaussian init."""

    def normal(shape):
        return rng.normal(0.0, 0.02, shape)

    d = cfg.d_model
    store.add("enc.tok_emb", normal((cfg.vocab_size, d)))
    store.add("enc.pos_cap", normal((cfg.caption_len, d)))
    store.add("enc.patch_proj.w", normal((cfg.patch_dim, d)))
    store.add("enc.patch_proj.b", np.zeros(d))
    store.add("enc.pos_patch", normal((cfg.n_patches, d)))
    store.add("enc.null_frame", normal((1, d)))
    store.add("enc.null_block", normal((cfg.b_tok, d)))
    for h in range(cfg.n_cond_heads):
        store.add(f"enc.attn.h{h}.wq", normal((d, cfg.head_dim)))
        store.add(f"enc.attn.h{h}.wk", normal((d, cfg.head_dim)))
        store.add(f"enc.attn.h{h}.wv", normal((d, cfg.head_dim)))
    store.add("enc.attn.wo", normal((d, d)))
    store.add("enc.ln1.gamma", np.ones(d))
    store.add("enc.ln1.beta", np.zeros(d))
    store.add("enc.mlp.w1", normal((d, 2 * d)))
    store.add("enc.mlp.b1", np.zeros(2 * d))
    store.add("enc.mlp.w2", normal((2 * d, d)))
    store.add("enc.mlp.b2", np.zeros(d))
    store.add("enc.ln2.gamma", np.ones(d))
    store.add("enc.ln2.beta", np.zeros(d))
    store.add("enc.pool.slots", normal((cfg.b_tok, d)))
    store.add("enc.pool.wk", normal((d, d)))
    store.add("enc.pool.wv", normal((d, d)))
    store.add("enc.pool.ln.gamma", np.ones(d))
    store.add("enc.pool.ln.beta", np.zeros(d))


def _multihead_full_attention(seq, params: ParamStore, cfg: ModelConfig, prefix: str):
    n = seq.data.shape[0]
    mask = full_mask(n, n)
    heads = []
    for h in range(cfg.n_cond_heads):
        q = ad.matmul(seq, params[f"{prefix}.h{h}.wq"])
        k = ad.matmul(seq, params[f"{prefix}.h{h}.wk"])
        v = ad.matmul(seq, params[f"{prefix}.h{h}.wv"])
        heads.append(masked_attention(q, k, v, mask))
    stacked = heads[0] if len(heads) == 1 else ad.concat_rows(
        [ad.transpose(h) for h in heads]
    )
    if len(heads) > 1:
        stacked = ad.transpose(stacked)
    return ad.matmul(stacked, params[f"{prefix}.wo"])


def _caption_tokens(caption_ids, params, cfg):
    caption_ids = np.asarray(caption_ids)
    if caption_ids.shape != (cfg.caption_len,):
        raise ContractError(
            f"caption must be padded to length {cfg.caption_len}, got {caption_ids.shape}"
        )
    tok = ad.embedding(params["enc.tok_emb"], caption_ids)
    return ad.add(tok, params["enc.pos_cap"])


def _frame_tokens(frame, params, cfg):
    frame = ad.as_tensor(frame)
    if frame.data.shape != cfg.image_shape:
        raise ContractError(
            f"frame shape {frame.data.shape}, expected {cfg.image_shape}"
        )
    c, size, p = cfg.image_shape[0], cfg.image_shape[1], cfg.patch
    g = size // p
    # non-overlapping patches are a pure reshape/permute
    x = ad.reshape(frame, (c, g, p, g, p))
    x = ad.transpose(x, (1, 3, 0, 2, 4))
    x = ad.reshape(x, (g * g, c * p * p))
    x = ad.bias_add(ad.matmul(x, params["enc.patch_proj.w"]), params["enc.patch_proj.b"])
    return ad.add(x, params["enc.pos_patch"])


def _encode_sequence(seq, params, cfg):
    attn = _multihead_full_attention(seq, params, cfg, "enc.attn")
    seq = ad.layer_norm(
        ad.add(seq, attn), params["enc.ln1.gamma"], params["enc.ln1.beta"]
    )
    hidden = ad.tanh(ad.bias_add(ad.matmul(seq, params["enc.mlp.w1"]), params["enc.mlp.b1"]))
    mlp = ad.bias_add(ad.matmul(hidden, params["enc.mlp.w2"]), params["enc.mlp.b2"])
    seq = ad.layer_norm(
        ad.add(seq, mlp), params["enc.ln2.gamma"], params["enc.ln2.beta"]
    )
    # pool into b_tok learned slots via one cross-attention
    k = ad.matmul(seq, params["enc.pool.wk"])
    v = ad.matmul(seq, params["enc.pool.wv"])
    slots = params["enc.pool.slots"]
    pooled = masked_attention(slots, k, v, full_mask(slots.data.shape[0], seq.data.shape[0]))
    return ad.layer_norm(pooled, params["enc.pool.ln.gamma"], params["enc.pool.ln.beta"])


def encode_pair(caption_ids, frame, params: ParamStore, cfg: ModelConfig):
    """Encode one (caption, frame) pair into a [b_tok, d_model] block."""
    seq = ad.concat_rows([
        _caption_tokens(caption_ids, params, cfg),
        _frame_tokens(frame, params, cfg),
    ])
    return _encode_sequence(seq, params, cfg)


def encode_caption_only(caption_ids, params: ParamStore, cfg: ModelConfig):
    """Encode a caption with the frame stream replaced by the null token."""
    seq = ad.concat_rows([
        _caption_tokens(caption_ids, params, cfg),
        params["enc.null_frame"],
    ])
    return _encode_sequence(seq, params, cfg)


def assemble_history(
    pairs,
    current_caption,
    params: ParamStore,
    cfg: ModelConfig,
    unconditional: bool = False,
) -> ConditionMemory:
    """Build the condition memory for one target frame.

    pairs is the ordered list of (caption_ids, frame) for frames 1..t-1;
    current_caption belongs to frame t. With unconditional=True the whole
    memory collapses to the learned null block (classifier-free dropout).
    """
    if unconditional:
        return ConditionMemory(
            blocks=[],
            block_origin=[],
            current_caption_block=params["enc.null_block"],
            unconditional=True,
        )
    blocks = [encode_pair(c, f, params, cfg) for c, f in pairs]
    return ConditionMemory(
        blocks=blocks,
        block_origin=list(range(1, len(blocks) + 1)),
        current_caption_block=encode_caption_only(current_caption, params, cfg),
    )
