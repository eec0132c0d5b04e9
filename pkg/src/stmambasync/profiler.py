"""Closed-form FLOPS accounting, inference timing and the layer-count ablation.

FLOPS here are multiply-adds of dense contractions for one input window.
Normalisations, softmax exponentials and activations are not counted. The
Mamba scan counts its decay/input products and state read-out as
contractions over the state axis.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TrafficDataset, make_windows, SplitSpec, standardize
from .model import ModelConfig, ModelParams, forward
from .train import TrainConfig, evaluate, train
from . import tensor as T

ABLATION_SCHEMA_VERSION = 1
ABLATION_COLUMNS = ["attn_layers", "mamba_layers", "MAE", "RMSE", "MAPE", "flops_m",
                    "infer_s", "train_s"]
PER_STEP_COLUMNS = ["step", "MAE", "RMSE", "MAPE"]
STAGES = ("embedding", "attention", "mamba", "head")


@dataclass
class FlopsReport:
    parts: dict = field(default_factory=dict)  # "stage/sublayer" -> multiply-adds
    config: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.parts.values()))

    def stage_total(self, stage: str) -> int:
        return int(sum(v for k, v in self.parts.items() if k.split("/")[0] == stage))

    @property
    def stages(self) -> dict[str, int]:
        return {s: self.stage_total(s) for s in STAGES}


def _attention_sublayer(L: int, seq: int, groups: int, d_h: int) -> dict:
    """One attention sublayer over ``groups`` independent sequences of length ``seq``."""
    return {"qkv": 3 * L * d_h * d_h,
            "scores": groups * seq * seq * d_h,
            "av": groups * seq * seq * d_h,
            "out": L * d_h * d_h,
            "ffn": 2 * L * d_h * 4 * d_h}


def count_flops(cfg: ModelConfig) -> FlopsReport:
    """Exact multiply-add counts per sublayer for one window of ``cfg``'s shapes."""
    T_, N, d_h = cfg.M, cfg.N, cfg.d_h
    L = T_ * N
    di, ds = cfg.d_inner, cfg.d_state
    parts = {"embedding/feature_map": L * cfg.d * cfg.d_e}
    for i in range(cfg.n_attention_layers):
        for k, v in _attention_sublayer(L, T_, N, d_h).items():
            parts[f"attention/{i}/temporal/{k}"] = v
        for k, v in _attention_sublayer(L, N, T_, d_h).items():
            parts[f"attention/{i}/spatial/{k}"] = v
    for i in range(cfg.n_mamba_layers):
        parts.update({
            f"mamba/{i}/in_proj": L * d_h * di,
            f"mamba/{i}/proj_BC": 2 * L * di * ds,
            f"mamba/{i}/proj_delta": L * di * di,
            f"mamba/{i}/discretize": 2 * L * di * ds,
            f"mamba/{i}/scan": 3 * L * di * ds + L * di,
            f"mamba/{i}/out_proj": L * di * d_h,
        })
    parts["head/fc"] = N * (cfg.M * d_h) * (cfg.Z * cfg.d)
    return FlopsReport(parts, cfg.to_dict())


@dataclass
class TimingStats:
    samples: list
    stages: dict  # stage -> median seconds per sweep

    @property
    def median(self) -> float:
        return float(np.median(self.samples))

    @property
    def iqr(self) -> float:
        q75, q25 = np.percentile(self.samples, [75, 25])
        return float(q75 - q25)


def bench_inference(params: ModelParams, windows, repeats: int = 5, warmup: int = 1,
                    batch_size: int = 64) -> TimingStats:
    """Wall-clock of full gradient-free sweeps over ``windows`` (warm-up excluded)."""
    x, wk, tod = windows.x, windows.weekday_idx, windows.tod_idx
    samples, per_stage = [], {s: [] for s in STAGES}
    with T.no_grad():
        for rep in range(warmup + repeats):
            timer: dict = {}
            t0 = time.perf_counter()
            for i in range(0, len(x), batch_size):
                sl = slice(i, i + batch_size)
                forward(x[sl], wk[sl], tod[sl], params, timer=timer)
            elapsed = time.perf_counter() - t0
            if rep >= warmup:
                samples.append(elapsed)
                for s in STAGES:
                    per_stage[s].append(timer.get(s, 0.0))
    return TimingStats(samples, {s: float(np.median(v)) for s, v in per_stage.items()})


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})
    return path


def ablation_run(ds: TrafficDataset, grid, base: ModelConfig, tcfg: TrainConfig,
                 out_dir=None, split: SplitSpec = SplitSpec(), repeats: int = 3) -> list[dict]:
    """Train every ``(attention layers, mamba layers)`` pair under identical settings.

    Returns one row per configuration with the ``ablation.csv`` columns; each
    row also carries its test ``EvalResult`` under ``"eval"``. With
    ``out_dir`` set, writes ``ablation.csv`` plus ``per_step_a{A}_m{M}.csv``.
    """
    tr, va, te = make_windows(ds, base.M, base.Z, split)
    (tr, va, te), scaler = standardize(tr, [tr, va, te], ds.sensor_ids)
    rows = []
    for a, m in grid:
        cfg = replace(base, n_attention_layers=int(a), n_mamba_layers=int(m))
        params = ModelParams(cfg, tcfg.seed)
        t0 = time.perf_counter()
        train(params, tr, va, scaler, tcfg)
        train_s = time.perf_counter() - t0
        res = evaluate(params, te, scaler, tcfg.mape_floor)
        timing = bench_inference(params, te, repeats=repeats)
        rows.append({"attn_layers": a, "mamba_layers": m, "MAE": res.mae, "RMSE": res.rmse,
                     "MAPE": res.mape, "flops_m": count_flops(cfg).total / 1e6,
                     "infer_s": timing.median, "train_s": train_s, "eval": res})
        if out_dir is not None:
            write_csv(Path(out_dir) / f"per_step_a{a}_m{m}.csv", PER_STEP_COLUMNS, res.rows())
    if out_dir is not None:
        write_csv(Path(out_dir) / "ablation.csv", ABLATION_COLUMNS, rows)
    return rows
