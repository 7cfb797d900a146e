"""Fusion functions that collapse a stack of layer outputs into one vector.

A fusion layer sits on top of the encoder stack, the decoder stack, or both.
It sees every layer's representation at a position (optionally including the
embedding layer at index 0) and produces a single width-d vector, so nothing
downstream changes size.  Four kinds are supported:

* ``baseline``         - the top layer, untouched (no extra parameters)
* ``avg``              - arithmetic mean of the included layers
* ``fnn``              - concatenate the layers, then a one-hidden-layer FNN
* ``self_attention``   - multi-hop attention over the layer axis with learned
                         layer-index embeddings; each hop yields a probability
                         distribution over layers and a weighted sum, the hops
                         are stacked and mixed by a final FNN

Every parametric kind ends with its own layer normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

log = logging.getLogger(__name__)

SIDES = ("none", "encoder", "decoder", "both")
KINDS = ("baseline", "avg", "fnn", "self_attention")


@dataclass(frozen=True)
class FusionConfig:
    """Which fusion runs where, and its widths.

    ``include_embedding`` adds the embedding layer (index 0) to the fusion
    input, giving n_layers+1 entries.  ``share_w1`` uses one inner attention
    projection for all layers instead of a per-layer one.
    ``share_layer_embedding`` keeps a single layer-index table for both sides.
    """

    side: str = "none"
    enc_kind: str = "baseline"
    dec_kind: str = "baseline"
    n_hop: int = 1
    d_a: int = 1
    d_f: int = 1
    include_embedding: bool = True
    share_w1: bool = True
    share_layer_embedding: bool = True

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        for kind in (self.enc_kind, self.dec_kind):
            if kind not in KINDS:
                raise ValueError(f"fusion kind must be one of {KINDS}, got {kind!r}")
        if self.n_hop < 1:
            raise ValueError("n_hop must be >= 1")
        if self.d_a < 1 or self.d_f < 1:
            raise ValueError("d_a and d_f must be >= 1")

    def kind_for(self, side: str) -> str:
        """Active kind on ``side`` ('encoder'/'decoder'), 'baseline' if off."""
        if self.side in ("both", side):
            return self.enc_kind if side == "encoder" else self.dec_kind
        return "baseline"

    def uses_self_attention(self) -> bool:
        return "self_attention" in (self.kind_for("encoder"), self.kind_for("decoder"))


@dataclass
class AttentionTrace:
    """Per-position hop-by-layer weights from a self-attention fusion.

    ``weights[t, p, l]`` is hop p's weight on included layer l at position t;
    each (t, p) row is a probability distribution over layers.
    ``first_layer`` is the stack index of weight column 0 (0 when the
    embedding layer is included, else 1).
    """

    weights: np.ndarray
    first_layer: int = 0

    @property
    def n_hops(self) -> int:
        return self.weights.shape[1]

    @property
    def n_layers(self) -> int:
        return self.weights.shape[2]


def included_layers(stack: Sequence[Tensor], cfg: FusionConfig) -> list[Tensor]:
    return list(stack) if cfg.include_embedding else list(stack[1:])


# ---------------------------------------------------------------------------
# fusion kinds


def fuse_baseline(stack: Sequence[Tensor]) -> Tensor:
    """The unfused path: top of the stack, no normalization, no parameters."""
    if not stack:
        raise ValueError("empty layer stack")
    return stack[-1]


def _final_norm(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return ad.layer_norm(
        x, params[f"{prefix}.post_norm.gain"], params[f"{prefix}.post_norm.bias"]
    )


def fuse_avg(stack: Sequence[Tensor], params: ParamStore, prefix: str) -> Tensor:
    """Mean of the included layers, then the post-fusion layer norm."""
    if not stack:
        raise ValueError("empty layer stack")
    total = stack[0]
    for rep in stack[1:]:
        total = ad.add(total, rep)
    return _final_norm(ad.scale(total, 1.0 / len(stack)), params, prefix)


def _fusion_fnn(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    h = ad.relu(
        ad.add(ad.matmul(x, params[f"{prefix}.fnn.w1"]), params[f"{prefix}.fnn.b1"])
    )
    return ad.add(ad.matmul(h, params[f"{prefix}.fnn.w2"]), params[f"{prefix}.fnn.b2"])


def fuse_fnn(stack: Sequence[Tensor], params: ParamStore, prefix: str) -> Tensor:
    """Concatenate the included layers featurewise and mix with an FNN."""
    if not stack:
        raise ValueError("empty layer stack")
    flat = stack[0] if len(stack) == 1 else ad.concat(list(stack), axis=1)
    return _final_norm(_fusion_fnn(flat, params, prefix), params, prefix)


def fuse_self_attention(
    stack: Sequence[Tensor],
    params: ParamStore,
    prefix: str,
    layer_embed: Tensor,
    n_hop: int,
    share_w1: bool,
    first_layer: int = 0,
) -> tuple[Tensor, AttentionTrace]:
    """Multi-hop attention over the layer axis.

    Each included layer gets its index embedding added, energies come from a
    one-hidden-layer network (tanh inner activation), and a softmax across
    the layer axis gives every hop a distribution over layers.  Hop-wise
    weighted sums are stacked, flattened, and mixed by the final FNN.
    With a single hop the stacked intermediate is just one width-d vector.
    """
    n_layers = len(stack)
    if layer_embed.shape[0] != n_layers:
        raise ValueError(
            f"layer embedding rows {layer_embed.shape[0]} != stack size {n_layers}"
        )
    # z-tilde: content plus layer-index information
    tagged = [
        ad.add(rep, layer_embed[l : l + 1, :]) for l, rep in enumerate(stack)
    ]
    # energies per (position, hop, layer)
    energies = []
    for l, zt in enumerate(tagged):
        w1 = params[f"{prefix}.att.w1" if share_w1 else f"{prefix}.att.w1.layer{l}"]
        e = ad.matmul(ad.tanh(ad.matmul(zt, w1)), params[f"{prefix}.att.w2"])
        energies.append(ad.reshape(e, (e.shape[0], n_hop, 1)))
    att = ad.softmax(ad.concat(energies, axis=2), axis=2)

    hops = []
    for p in range(n_hop):
        acc = None
        for l, zt in enumerate(tagged):
            w = ad.reshape(att[:, p, l], (zt.shape[0], 1))
            term = ad.mul(w, zt)
            acc = term if acc is None else ad.add(acc, term)
        hops.append(acc)
    stacked = hops[0] if n_hop == 1 else ad.concat(hops, axis=1)

    fused = _final_norm(_fusion_fnn(stacked, params, prefix), params, prefix)
    return fused, AttentionTrace(att.data.copy(), first_layer)


# ---------------------------------------------------------------------------
# dispatch


def layer_embedding_name(cfg: FusionConfig, side: str) -> str:
    if cfg.share_layer_embedding:
        return "fusion.layer_embed.weight"
    return f"fusion.{side}.layer_embed.weight"


def fuse_side(
    stack: Sequence[Tensor],
    side: str,
    cfg: FusionConfig,
    params: ParamStore,
) -> tuple[Tensor, AttentionTrace | None]:
    """Apply the configured fusion for ``side`` to a full layer stack."""
    kind = cfg.kind_for(side)
    if kind == "baseline":
        return fuse_baseline(stack), None
    reps = included_layers(stack, cfg)
    prefix = f"fusion.{side}"
    if kind == "avg":
        return fuse_avg(reps, params, prefix), None
    if kind == "fnn":
        return fuse_fnn(reps, params, prefix), None
    fused, trace = fuse_self_attention(
        reps,
        params,
        prefix,
        params[layer_embedding_name(cfg, side)],
        cfg.n_hop,
        cfg.share_w1,
        first_layer=0 if cfg.include_embedding else 1,
    )
    return fused, trace


def attach_fusion(model, cfg: FusionConfig):
    """Rebuild ``model`` with ``cfg`` attached (same seed, same core weights)."""
    if cfg.side == "both" and cfg.enc_kind == cfg.dec_kind == "baseline":
        log.warning("side=both with baseline on both sides degenerates to baseline")
    return model.with_fusion(cfg)


# ---------------------------------------------------------------------------
# closed-form parameter accounting (kept in lock-step with init_parameters)


def kind_param_delta(
    kind: str,
    n_inputs: int,
    d: int,
    d_a: int,
    d_f: int,
    n_hop: int,
    share_w1: bool,
    count_layer_embed: bool = True,
) -> int:
    """Extra trainable scalars one fusion site adds over the baseline path.

    ``n_inputs`` is the number of fused layers (n_layers+1 when the
    embedding layer is included).  For self-attention fusion the layer
    embedding table is counted only when ``count_layer_embed`` (a shared
    table must be counted once, not per side).
    """
    if kind == "baseline":
        return 0
    if kind == "avg":
        return 2 * d  # post-fusion norm only
    if kind == "fnn":
        return (n_inputs * d) * d_f + d_f + d_f * d + d + 2 * d
    if kind == "self_attention":
        w1 = d * d_a if share_w1 else n_inputs * d * d_a
        w2 = d_a * n_hop
        emb = n_inputs * d if count_layer_embed else 0
        fnn = (n_hop * d) * d_f + d_f + d_f * d + d
        return w1 + w2 + emb + fnn + 2 * d
    raise ValueError(f"unknown fusion kind {kind!r}")


def fusion_param_count(cfg: FusionConfig, n_layers: int, d: int) -> int:
    """Total trainable scalars the whole fusion configuration adds."""
    n_inputs = n_layers + 1 if cfg.include_embedding else n_layers
    total = 0
    counted_shared_embed = False
    for side in ("encoder", "decoder"):
        kind = cfg.kind_for(side)
        count_embed = True
        if kind == "self_attention" and cfg.share_layer_embedding:
            count_embed = not counted_shared_embed
            counted_shared_embed = True
        total += kind_param_delta(
            kind, n_inputs, d, cfg.d_a, cfg.d_f, cfg.n_hop, cfg.share_w1, count_embed
        )
    return total
