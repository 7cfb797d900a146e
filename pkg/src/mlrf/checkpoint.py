"""Self-describing checkpoint container.

Layout: one magic line, one line with the header byte length, a JSON text
header (configs, counters, RNG states, and a tensor index), then the named
raw tensor blocks as little-endian float64 in index order.  Serialization
is canonical (sorted keys, fixed separators), so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ParamStore
from .fusion import FusionConfig
from .model import ModelConfig, Transformer
from .training import AdamState, TrainConfig

MAGIC = "MLRF-CHECKPOINT 1"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    fusion_config: FusionConfig
    train_config: TrainConfig | None
    tensors: dict[str, np.ndarray]  # parameters
    opt_m: dict[str, np.ndarray] | None
    opt_v: dict[str, np.ndarray] | None
    opt_t: int
    phase: str
    meta: dict[str, Any]  # step/epoch counters, vocab info, RNG states


def _config_dict(cfg) -> dict:
    return asdict(cfg)


def save_checkpoint(
    path,
    model: Transformer,
    state: AdamState | None = None,
    train_config: TrainConfig | None = None,
    meta: dict[str, Any] | None = None,
) -> None:
    params = model.params
    index = [[name, list(t.shape)] for name, t in params.items()]
    blocks = [t.data for _, t in params.items()]
    opt = None
    if state is not None:
        opt = {"t": state.t, "phase": state.phase}
        for name in params.names():
            index.append([f"opt.m.{name}", list(state.m[name].shape)])
            blocks.append(state.m[name])
        for name in params.names():
            index.append([f"opt.v.{name}", list(state.v[name].shape)])
            blocks.append(state.v[name])
    header = {
        "model": _config_dict(model.config),
        "fusion": _config_dict(model.fusion),
        "train": _config_dict(train_config) if train_config is not None else None,
        "optimizer": opt,
        "meta": meta or {},
        "tensors": index,
    }
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC.encode("ascii") + b"\n")
        f.write(str(len(body)).encode("ascii") + b"\n")
        f.write(body)
        for arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    magic, rest = raw.split(b"\n", 1)
    if magic.decode("ascii", "replace") != MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    size_line, rest = rest.split(b"\n", 1)
    n = int(size_line)
    header = json.loads(rest[:n].decode("utf-8"))
    blob = rest[n:]

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        offset += count * 8

    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt = header.get("optimizer")
    opt_m = opt_v = None
    if opt is not None:
        opt_m = {k[len("opt.m.") :]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        opt_v = {k[len("opt.v.") :]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    return Checkpoint(
        model_config=ModelConfig(**header["model"]),
        fusion_config=FusionConfig(**header["fusion"]),
        train_config=TrainConfig(**header["train"]) if header["train"] else None,
        tensors=params,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_t=opt["t"] if opt else 0,
        phase=opt["phase"] if opt else "warmup_schedule",
        meta=header.get("meta", {}),
    )


def restore_params(params: ParamStore, tensors: dict[str, np.ndarray]) -> None:
    """Overwrite a parameter store in place; shapes and names must match."""
    names = set(params.names())
    saved = set(tensors)
    if names != saved:
        missing = sorted(names - saved)
        extra = sorted(saved - names)
        raise ValueError(
            f"checkpoint does not match model: missing={missing[:5]} extra={extra[:5]}"
        )
    for name, t in params.items():
        arr = tensors[name]
        if tuple(arr.shape) != t.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {t.shape}"
            )
        t.data = arr.copy()


def build_model(ckpt: Checkpoint) -> Transformer:
    """Reconstruct the saved model (weights included)."""
    model = Transformer(ckpt.model_config, ckpt.fusion_config, seed=int(ckpt.meta.get("seed", 0)))
    restore_params(model.params, ckpt.tensors)
    return model


def restore_optimizer(ckpt: Checkpoint, params: ParamStore) -> AdamState:
    state = AdamState(params)
    if ckpt.opt_m is not None:
        for name in params.names():
            state.m[name][:] = ckpt.opt_m[name]
            state.v[name][:] = ckpt.opt_v[name]
    state.t = ckpt.opt_t
    state.phase = ckpt.phase
    return state
