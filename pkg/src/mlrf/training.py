"""Initialization, the warmup/restart Adam recipe, and the training loop.

Initialization classes:

* word embeddings          ~ N(0, sd = d^-0.5)
* layer-index embeddings   ~ U(-0.1, 0.1)
* layer-norm gain/bias     = 1 / 0
* everything else          ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
                             using their layer's fan_in

Phase 1 uses the width-scaled warmup schedule; phase 2 restarts Adam
(moments and step zeroed) and trains at a small fixed rate with smaller
mini-batches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .fusion import FusionConfig, layer_embedding_name
from .model import ModelConfig, Transformer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_phase1: int = 1
    epochs_phase2: int = 0
    batch_phase1: int = 80
    batch_phase2: int = 32
    warmup_steps: int = 16000
    restart_lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float | None = None  # off unless configured
    seed: int = 1
    log_every: int = 10

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        for name in ("warmup_steps", "batch_phase1", "batch_phase2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.restart_lr <= 0 or self.adam_eps <= 0:
            raise ValueError("restart_lr and adam_eps must be positive")


# ---------------------------------------------------------------------------
# parameter initialization


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_linear(store, rng, prefix: str, fan_in: int, fan_out: int) -> None:
    store.add(f"{prefix}.w", Tensor(_uniform(rng, fan_in, (fan_in, fan_out))))
    store.add(f"{prefix}.b", Tensor(_uniform(rng, fan_in, (fan_out,))))


def _add_norm(store, prefix: str, d: int) -> None:
    store.add(f"{prefix}.gain", Tensor(np.ones(d)))
    store.add(f"{prefix}.bias", Tensor(np.zeros(d)))


def _add_attention(store, rng, prefix: str, d: int) -> None:
    for name in ("q", "k", "v", "o"):
        store.add(f"{prefix}.w{name}", Tensor(_uniform(rng, d, (d, d))))
        store.add(f"{prefix}.b{name}", Tensor(_uniform(rng, d, (d,))))


def _add_ffn(store, rng, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
    store.add(f"{prefix}.w1", Tensor(_uniform(rng, d_in, (d_in, d_hidden))))
    store.add(f"{prefix}.b1", Tensor(_uniform(rng, d_in, (d_hidden,))))
    store.add(f"{prefix}.w2", Tensor(_uniform(rng, d_hidden, (d_hidden, d_out))))
    store.add(f"{prefix}.b2", Tensor(_uniform(rng, d_hidden, (d_out,))))


def _add_fusion_side(store, rng, side: str, kind: str, cfg, fcfg: FusionConfig) -> None:
    if kind == "baseline":
        return
    d = cfg.d_model
    prefix = f"fusion.{side}"
    n_inputs = cfg.n_layers + 1 if fcfg.include_embedding else cfg.n_layers
    if kind == "avg":
        _add_norm(store, f"{prefix}.post_norm", d)
        return
    if kind == "fnn":
        _add_ffn(store, rng, f"{prefix}.fnn", n_inputs * d, fcfg.d_f, d)
        _add_norm(store, f"{prefix}.post_norm", d)
        return
    # self_attention: inner projections carry no bias
    if fcfg.share_w1:
        store.add(f"{prefix}.att.w1", Tensor(_uniform(rng, d, (d, fcfg.d_a))))
    else:
        for l in range(n_inputs):
            store.add(
                f"{prefix}.att.w1.layer{l}", Tensor(_uniform(rng, d, (d, fcfg.d_a)))
            )
    store.add(f"{prefix}.att.w2", Tensor(_uniform(rng, fcfg.d_a, (fcfg.d_a, fcfg.n_hop))))
    emb_name = layer_embedding_name(fcfg, side)
    if emb_name not in store:
        store.add(emb_name, Tensor(rng.uniform(-0.1, 0.1, size=(n_inputs, d))))
    _add_ffn(store, rng, f"{prefix}.fnn", fcfg.n_hop * d, fcfg.d_f, d)
    _add_norm(store, f"{prefix}.post_norm", d)


def init_parameters(
    config: ModelConfig, fusion: FusionConfig, seed: int
) -> ParamStore:
    """Draw every trainable tensor; bit-identical for equal seeds.

    Core parameters are drawn before any fusion parameters, so two models
    that differ only in fusion attachment share identical core weights.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d = config.d_model

    sd = d ** -0.5
    store.add("src_embed.weight", Tensor(rng.normal(0.0, sd, (config.src_vocab, d))))
    store.add("tgt_embed.weight", Tensor(rng.normal(0.0, sd, (config.tgt_vocab, d))))

    for i in range(config.n_layers):
        prefix = f"encoder.layer{i}"
        _add_attention(store, rng, f"{prefix}.self_attn", d)
        _add_norm(store, f"{prefix}.norm1", d)
        _add_ffn(store, rng, f"{prefix}.ffn", d, config.d_ff, d)
        _add_norm(store, f"{prefix}.norm2", d)
    for i in range(config.n_layers):
        prefix = f"decoder.layer{i}"
        _add_attention(store, rng, f"{prefix}.self_attn", d)
        _add_norm(store, f"{prefix}.norm1", d)
        _add_attention(store, rng, f"{prefix}.cross_attn", d)
        _add_norm(store, f"{prefix}.norm2", d)
        _add_ffn(store, rng, f"{prefix}.ffn", d, config.d_ff, d)
        _add_norm(store, f"{prefix}.norm3", d)

    store.add("output.weight", Tensor(_uniform(rng, d, (d, config.tgt_vocab))))
    store.add("output.bias", Tensor(_uniform(rng, d, (config.tgt_vocab,))))

    _add_fusion_side(store, rng, "encoder", fusion.kind_for("encoder"), config, fusion)
    _add_fusion_side(store, rng, "decoder", fusion.kind_for("decoder"), config, fusion)
    return store


def count_parameters(params: ParamStore) -> int:
    return params.count_scalars()


def parameter_breakdown(params: ParamStore) -> dict[str, int]:
    """Scalar counts grouped by top-level component."""
    groups = {"embeddings": 0, "encoder": 0, "decoder": 0, "fusion": 0, "output": 0}
    for name, t in params.items():
        if name.startswith(("src_embed", "tgt_embed")):
            groups["embeddings"] += t.size
        else:
            groups[name.split(".", 1)[0]] += t.size
    return groups


# ---------------------------------------------------------------------------
# optimizer


def lr_schedule(t: int, d: int, warmup_steps: int = 16000) -> float:
    """Width-scaled rate: linear warmup, then inverse square-root decay."""
    if t < 1:
        raise ValueError("schedule step starts at 1")
    return d ** -0.5 * min(t ** -0.5, t * warmup_steps ** -1.5)


class AdamState:
    """Per-parameter moments plus the phase marker for the restart."""

    def __init__(self, params: ParamStore):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0
        self.phase = "warmup_schedule"

    def restarted(self) -> bool:
        return self.phase == "restarted"


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    """One bias-corrected Adam update from the accumulated grads."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def restart_adam(state: AdamState) -> None:
    """Zero the moments and step counter and mark phase 2; one-shot."""
    if state.restarted():
        raise RuntimeError("Adam was already restarted once")
    for m in state.m.values():
        m[:] = 0.0
    for v in state.v.values():
        v[:] = 0.0
    state.t = 0
    state.phase = "restarted"


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepMetrics:
    step: int
    phase: str
    lr: float
    loss: float
    accuracy: float


def batch_to_packed(batch, pad_id: int = 0):
    """Strip padding from a batch into packed (ids, lengths) triples."""
    src_lens = [int(m.sum()) for m in batch.src_mask]
    tgt_lens = [int(m.sum()) for m in batch.tgt_mask]
    src = np.concatenate([row[:n] for row, n in zip(batch.src, src_lens)])
    tgt_in = np.concatenate([row[:n] for row, n in zip(batch.tgt_in, tgt_lens)])
    tgt_out = np.concatenate([row[:n] for row, n in zip(batch.tgt_out, tgt_lens)])
    return src, src_lens, tgt_in, tgt_lens, tgt_out


def train_step(
    model: Transformer,
    batch,
    state: AdamState,
    cfg: TrainConfig,
    pad_id: int = 0,
) -> StepMetrics:
    """Forward, backward, and one optimizer update on a single batch."""
    src, src_lens, tgt_in, tgt_lens, tgt_out = batch_to_packed(batch, pad_id)
    result = model.forward(src, src_lens, tgt_in, tgt_lens, train=True)
    loss = ad.cross_entropy(result.logits, tgt_out, pad_id=pad_id)
    model.params.zero_grads()
    ad.backward(loss)
    if cfg.clip_norm is not None:
        clip_gradients(model.params, cfg.clip_norm)
    if state.restarted():
        lr = cfg.restart_lr
    else:
        lr = lr_schedule(state.t + 1, model.config.d_model, cfg.warmup_steps)
    adam_step(model.params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    acc = token_accuracy(result.logits.data, tgt_out, pad_id)
    return StepMetrics(state.t, state.phase, lr, loss.item(), acc)


def token_accuracy(logits: np.ndarray, targets: np.ndarray, pad_id: int = 0) -> float:
    targets = np.asarray(targets)
    live = targets != pad_id
    if not live.any():
        return 0.0
    pred = logits.argmax(axis=1)
    return float((pred[live] == targets[live]).mean())


def train_epoch(
    model: Transformer,
    batches: Sequence,
    state: AdamState,
    cfg: TrainConfig,
    pad_id: int = 0,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> dict[str, float]:
    """One pass over ``batches``; returns mean loss and token accuracy."""
    if not batches:
        raise ValueError("empty dataset")
    losses, accs = [], []
    for batch in batches:
        metrics = train_step(model, batch, state, cfg, pad_id)
        losses.append(metrics.loss)
        accs.append(metrics.accuracy)
        if on_step is not None:
            on_step(metrics)
    return {"loss": float(np.mean(losses)), "accuracy": float(np.mean(accs))}


def evaluate_teacher_forced(
    model: Transformer, batches: Sequence, pad_id: int = 0
) -> dict[str, float]:
    """Loss and token accuracy with dropout off and no tape."""
    losses, correct, total = [], 0, 0
    with ad.no_grad():
        for batch in batches:
            src, src_lens, tgt_in, tgt_lens, tgt_out = batch_to_packed(batch, pad_id)
            result = model.forward(src, src_lens, tgt_in, tgt_lens, train=False)
            losses.append(ad.cross_entropy(result.logits, tgt_out, pad_id).item())
            live = tgt_out != pad_id
            pred = result.logits.data.argmax(axis=1)
            correct += int((pred[live] == tgt_out[live]).sum())
            total += int(live.sum())
    return {
        "loss": float(np.mean(losses)) if losses else float("nan"),
        "accuracy": correct / total if total else 0.0,
    }
