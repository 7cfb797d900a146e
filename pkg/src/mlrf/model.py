"""Post-norm Transformer encoder-decoder that exposes every layer's output.

Both stacks return the full list of per-layer representations (the embedding
output at index 0, then one entry per layer) so a fusion function can consume
any of them instead of just the top.

Batches are processed as packed sequences: sentences are concatenated along
the time axis and attention is confined to sentence blocks by additive masks.
Masked logits get -1e9, which underflows to an exact zero weight after
softmax, so packing is equivalent to running sentences one at a time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

log = logging.getLogger(__name__)

MASK_PENALTY = -1e9

# per-layer representations, embedding output first; always n_layers+1 entries
LayerStack = list


@dataclass(frozen=True)
class ModelConfig:
    """Architectural description of the encoder-decoder core."""

    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    src_vocab: int
    tgt_vocab: int
    max_len: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sinusoidal positions")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def positional_encoding(seq_len: int, d: int) -> np.ndarray:
    """Fixed sine/cosine position table; not trainable."""
    if d % 2 != 0:
        raise ValueError("positional encoding needs an even width")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((seq_len, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


# ---------------------------------------------------------------------------
# packed-sequence helpers


def packed_positions(lengths: Sequence[int]) -> np.ndarray:
    """Within-sentence position index for each row of a packed batch."""
    return np.concatenate([np.arange(n, dtype=np.int64) for n in lengths])


def block_mask(q_lens: Sequence[int], k_lens: Sequence[int]) -> np.ndarray:
    """Boolean [sum(q) x sum(k)] mask allowing attention within paired blocks."""
    if len(q_lens) != len(k_lens):
        raise ValueError("query and key batches have different sentence counts")
    mask = np.zeros((sum(q_lens), sum(k_lens)), dtype=bool)
    qi = ki = 0
    for qn, kn in zip(q_lens, k_lens):
        mask[qi : qi + qn, ki : ki + kn] = True
        qi += qn
        ki += kn
    return mask


def causal_block_mask(lengths: Sequence[int]) -> np.ndarray:
    """Block mask further restricted to positions at or before the query."""
    total = sum(lengths)
    mask = np.zeros((total, total), dtype=bool)
    start = 0
    for n in lengths:
        mask[start : start + n, start : start + n] = np.tril(np.ones((n, n), bool))
        start += n
    return mask


# ---------------------------------------------------------------------------
# sublayers


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    params: ParamStore,
    prefix: str,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` splits of the width.

    ``mask`` is boolean [len_q x len_k]; disallowed entries receive a -1e9
    penalty before the softmax.  Rows with no allowed key still produce a
    defined (uniform) output; they are only flagged at debug log level.
    """
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise ValueError(f"attention width mismatch: {q.shape}/{k.shape}/{v.shape}")
    penalty = None
    if mask is not None:
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ValueError(
                f"mask shape {mask.shape} != ({q.shape[0]}, {k.shape[0]})"
            )
        if log.isEnabledFor(logging.DEBUG) and not mask.any(axis=1).all():
            log.debug("attention row with every key masked at %s", prefix)
        penalty = np.where(mask, 0.0, MASK_PENALTY)

    qp = ad.add(ad.matmul(q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    kp = ad.add(ad.matmul(k, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    vp = ad.add(ad.matmul(v, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])

    dh = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(n_heads):
        cols = np.s_[:, h * dh : (h + 1) * dh]
        scores = ad.scale(ad.matmul(qp[cols], ad.transpose(kp[cols])), inv_sqrt)
        if penalty is not None:
            scores = ad.add(scores, Tensor(penalty))
        heads.append(ad.matmul(ad.softmax(scores, axis=1), vp[cols]))
    merged = heads[0] if n_heads == 1 else ad.concat(heads, axis=1)
    return ad.add(ad.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def feed_forward(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _post_norm(x: Tensor, sub: Tensor, params, prefix, rate, rng) -> Tensor:
    """Residual wrapper: layer_norm(x + dropout(sublayer(x)))."""
    return ad.layer_norm(
        ad.add(x, ad.dropout(sub, rate, rng)),
        params[f"{prefix}.gain"],
        params[f"{prefix}.bias"],
    )


def encoder_layer(
    x: Tensor,
    params: ParamStore,
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    att = multi_head_attention(x, x, x, n_heads, params, f"{prefix}.self_attn", mask)
    x = _post_norm(x, att, params, f"{prefix}.norm1", rate, rng)
    ffn = feed_forward(x, params, f"{prefix}.ffn")
    return _post_norm(x, ffn, params, f"{prefix}.norm2", rate, rng)


def decoder_layer(
    z: Tensor,
    enc_rep: Tensor,
    params: ParamStore,
    prefix: str,
    n_heads: int,
    causal_mask: np.ndarray,
    cross_mask: np.ndarray | None,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    att = multi_head_attention(
        z, z, z, n_heads, params, f"{prefix}.self_attn", causal_mask
    )
    z = _post_norm(z, att, params, f"{prefix}.norm1", rate, rng)
    cross = multi_head_attention(
        z, enc_rep, enc_rep, n_heads, params, f"{prefix}.cross_attn", cross_mask
    )
    z = _post_norm(z, cross, params, f"{prefix}.norm2", rate, rng)
    ffn = feed_forward(z, params, f"{prefix}.ffn")
    return _post_norm(z, ffn, params, f"{prefix}.norm3", rate, rng)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardResult:
    logits: Tensor  # [sum(tgt_lengths) x tgt_vocab]
    encoder_trace: "AttentionTrace | None"
    decoder_trace: "AttentionTrace | None"


class Transformer:
    """Encoder-decoder with an optional fusion layer on either side.

    Decoder-side fusion replaces the top decoder representation as the sole
    input of the output projection; encoder-side fusion replaces the top
    encoder representation as the key/value source of every decoder
    cross-attention sublayer.
    """

    def __init__(self, config: ModelConfig, fusion=None, params=None, seed: int = 0):
        from .fusion import FusionConfig  # deferred: fusion imports this module

        self.config = config
        self.fusion = fusion if fusion is not None else FusionConfig()
        self.seed = seed
        if params is None:
            from .training import init_parameters

            params = init_parameters(config, self.fusion, seed)
        self.params = params
        self.dropout_rng = np.random.default_rng(seed)
        self._pe = positional_encoding(config.max_len, config.d_model)

    # -- embedding + stacks

    def _embed(self, table: str, ids: np.ndarray, lengths, train: bool) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if any(n > self.config.max_len for n in lengths):
            raise ValueError(
                f"sentence length exceeds max_len={self.config.max_len}"
            )
        x = ad.embedding_lookup(self.params[table], ids)
        x = ad.add(x, Tensor(self._pe[packed_positions(lengths)]))
        rate = self.config.dropout if train else 0.0
        return ad.dropout(x, rate, self.dropout_rng)

    def encode(self, src_ids, src_lengths: Sequence[int], train: bool = False) -> LayerStack:
        """Run the encoder; returns n_layers+1 reps (embedding output first)."""
        cfg = self.config
        rate = cfg.dropout if train else 0.0
        mask = block_mask(src_lengths, src_lengths)
        stack = [self._embed("src_embed.weight", src_ids, src_lengths, train)]
        for i in range(cfg.n_layers):
            stack.append(
                encoder_layer(
                    stack[-1], self.params, f"encoder.layer{i}",
                    cfg.n_heads, mask, rate, self.dropout_rng,
                )
            )
        return stack

    def decode_teacher_forced(
        self,
        tgt_in_ids,
        tgt_lengths: Sequence[int],
        enc_rep: Tensor,
        src_lengths: Sequence[int],
        train: bool = False,
    ) -> LayerStack:
        """Decoder stack over gold prefixes (inputs already BOS-shifted)."""
        cfg = self.config
        rate = cfg.dropout if train else 0.0
        causal = causal_block_mask(tgt_lengths)
        cross = block_mask(tgt_lengths, src_lengths)
        stack = [self._embed("tgt_embed.weight", tgt_in_ids, tgt_lengths, train)]
        for i in range(cfg.n_layers):
            stack.append(
                decoder_layer(
                    stack[-1], enc_rep, self.params, f"decoder.layer{i}",
                    cfg.n_heads, causal, cross, rate, self.dropout_rng,
                )
            )
        return stack

    # -- fusion hooks

    def encoder_output(self, stack: LayerStack):
        """Representation handed to the decoder: fused, or the top layer."""
        from .fusion import fuse_side

        return fuse_side(stack, "encoder", self.fusion, self.params)

    def decoder_output(self, stack: LayerStack):
        """Representation handed to the output projection."""
        from .fusion import fuse_side

        return fuse_side(stack, "decoder", self.fusion, self.params)

    def output_logits(self, rep: Tensor) -> Tensor:
        return ad.add(
            ad.matmul(rep, self.params["output.weight"]), self.params["output.bias"]
        )

    def forward(
        self,
        src_ids,
        src_lengths: Sequence[int],
        tgt_in_ids,
        tgt_lengths: Sequence[int],
        train: bool = False,
    ) -> ForwardResult:
        """Teacher-forced logits for a packed batch, plus any fusion traces."""
        enc_rep, enc_trace = self.encoder_output(self.encode(src_ids, src_lengths, train))
        stack = self.decode_teacher_forced(
            tgt_in_ids, tgt_lengths, enc_rep, src_lengths, train
        )
        dec_rep, dec_trace = self.decoder_output(stack)
        return ForwardResult(self.output_logits(dec_rep), enc_trace, dec_trace)

    # -- misc

    def reseed_dropout(self, seed) -> None:
        self.dropout_rng = np.random.default_rng(seed)

    def with_fusion(self, fusion) -> "Transformer":
        """Same core weights (same seed), different fusion attachment."""
        return Transformer(self.config, fusion, seed=self.seed)
