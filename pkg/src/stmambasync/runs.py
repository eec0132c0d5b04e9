"""Packing and unpacking full training runs into checkpoint files."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import StandardScaler
from .model import ModelConfig, ModelParams
from .train import AdamState, TrainConfig, TrainState

FORMAT = "stmambasync-run"


def _train_cfg_items(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["milestones"] = ",".join(str(m) for m in cfg.milestones)
    return {f"train.{k}": (repr(v) if isinstance(v, float) else v) for k, v in d.items()}


def _parse_train_cfg(manifest: dict) -> TrainConfig:
    raw = {k[6:]: v for k, v in manifest.items() if k.startswith("train.")}
    ms = tuple(int(m) for m in raw.pop("milestones", "").split(",") if m)
    ints = {"batch_size", "patience", "max_epochs", "seed"}
    kw = {k: (int(v) if k in ints else float(v)) for k, v in raw.items()}
    return TrainConfig(milestones=ms, **kw)


def save_run(path, params: ModelParams, scaler: StandardScaler | None, tcfg: TrainConfig,
             data_info: dict | None = None, state: TrainState | None = None) -> Path:
    """Write parameters (and, with ``state``, optimizer/early-stopping state)."""
    manifest = {"format": FORMAT}
    manifest.update({f"model.{k}": v for k, v in params.cfg.to_dict().items()})
    manifest.update(_train_cfg_items(tcfg))
    manifest.update({f"data.{k}": v for k, v in (data_info or {}).items()})
    tensors = {f"param.{k}": v for k, v in params.state_dict().items()}
    if scaler is not None:
        tensors["scaler.mean"] = scaler.mean
        tensors["scaler.std"] = scaler.std
    if state is not None:
        manifest.update({"state.epoch": state.epoch, "state.best_val": repr(state.best_val),
                         "state.best_epoch": state.best_epoch,
                         "state.bad_epochs": state.bad_epochs, "state.adam_t": state.adam.t})
        for i, row in enumerate(state.history):
            manifest[f"history.{i}"] = (f"{row['epoch']},{row['lr']!r},{row['train_mae']!r},"
                                        f"{row['val_mae']!r}")
        names = list(params.named_parameters())
        for n, m, v in zip(names, state.adam.m, state.adam.v):
            tensors[f"adam.m.{n}"] = m
            tensors[f"adam.v.{n}"] = v
        tensors.update({f"best.{k}": v for k, v in state.best_params.items()})
    return save_checkpoint(path, manifest, tensors)


def load_run(path):
    """Return ``(params, scaler, train_cfg, data_info, state_or_None)``."""
    manifest, tensors = load_checkpoint(path)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a training-run checkpoint")
    cfg = ModelConfig.from_dict({k[6:]: v for k, v in manifest.items() if k.startswith("model.")})
    params = ModelParams(cfg, 0)
    params.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param.")})
    scaler = None
    if "scaler.mean" in tensors:
        scaler = StandardScaler(tensors["scaler.mean"], tensors["scaler.std"])
    tcfg = _parse_train_cfg(manifest)
    data_info = {k[5:]: v for k, v in manifest.items() if k.startswith("data.")}
    state = None
    if "state.epoch" in manifest:
        names = list(params.named_parameters())
        adam = AdamState([tensors[f"adam.m.{n}"].copy() for n in names],
                         [tensors[f"adam.v.{n}"].copy() for n in names],
                         int(manifest["state.adam_t"]))
        history = []
        i = 0
        while f"history.{i}" in manifest:
            e, lr, tr, va = manifest[f"history.{i}"].split(",")
            history.append({"epoch": int(e), "lr": float(lr), "train_mae": float(tr),
                            "val_mae": float(va)})
            i += 1
        state = TrainState(int(manifest["state.epoch"]), adam, float(manifest["state.best_val"]),
                           int(manifest["state.best_epoch"]),
                           {n: tensors[f"best.{n}"].copy() for n in names},
                           int(manifest["state.bad_epochs"]), history)
    return params, scaler, tcfg, data_info, state


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
