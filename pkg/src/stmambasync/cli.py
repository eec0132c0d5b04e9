"""Command-line entry point: ``synth``, ``train``, ``eval``, ``bench``, ``ablate``, ``verify``.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import duality, plotting
from .checkpoint import CheckpointError
from .data import ParseError, SplitSpec, generate_synthetic, load_csv, make_windows, save_csv, standardize
from .model import ModelConfig, ModelParams
from .profiler import (ABLATION_COLUMNS, PER_STEP_COLUMNS, ablation_run, bench_inference,
                       count_flops, write_csv)
from .runs import load_run, save_run
from .train import TrainConfig, evaluate, train

log = logging.getLogger("stmambasync")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every knob of a run, resolved from defaults, an optional config file and flags."""

    data: str = ""
    out: str = "runs/latest"
    seed: int = 0
    nodes: int = 4
    days: int = 14
    noise: float = 1.0
    attn_layers: int = 1
    mamba_layers: int = 1
    d_embed: int = 24
    d_adaptive: int = 8
    d_state: int = 16
    heads: int = 4
    expand: int = 2
    horizon: int = 12
    window: int = 12
    split: str = "6:2:2"
    batch: int = 16
    lr: float = 1e-3
    milestones: str = "25,50"
    patience: int = 30
    epochs: int = 200
    mape_floor: float = None  # resolved: 10 flow units for CSV data, 1e-3 for synthetic

    def validate(self) -> None:
        for name in ("nodes", "days", "d_embed", "d_state", "heads", "expand", "horizon",
                     "window", "batch", "patience", "epochs"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be at least 1")
        for name in ("attn_layers", "mamba_layers", "d_adaptive"):
            if getattr(self, name) < 0:
                raise UsageError(f"--{name.replace('_', '-')} must be non-negative")
        if not self.lr > 0:
            raise UsageError("--lr must be positive")
        if self.mape_floor < 0:
            raise UsageError("--mape-floor must be non-negative")
        try:
            SplitSpec.parse(self.split)
        except ValueError as e:
            raise UsageError(f"--split: {e}") from None

    def model_config(self, n_nodes: int, steps_per_day: int = 288) -> ModelConfig:
        try:
            return ModelConfig(N=n_nodes, M=self.window, Z=self.horizon, d=1, d_e=self.d_embed,
                               d_s=self.d_adaptive, heads=self.heads,
                               n_attention_layers=self.attn_layers,
                               n_mamba_layers=self.mamba_layers, expand=self.expand,
                               d_state=self.d_state, steps_per_day=steps_per_day)
        except ValueError as e:
            raise UsageError(str(e)) from None

    def train_config(self) -> TrainConfig:
        ms = tuple(int(m) for m in self.milestones.split(",") if m.strip())
        return TrainConfig(lr0=self.lr, milestones=ms, batch_size=self.batch,
                           patience=self.patience, max_epochs=self.epochs, seed=self.seed,
                           mape_floor=self.mape_floor)

    def dump(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicitly given flags."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k not in types:
                raise UsageError(f"unknown config key {k!r}")
            values[k] = v
    for k in types:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    conv = {"int": int, "float": float, "str": str}
    try:
        cfg = RunConfig(**{k: conv[types[k]](v) for k, v in values.items()})
    except ValueError as e:
        raise UsageError(f"bad config value: {e}") from None
    if cfg.mape_floor is None:
        cfg.mape_floor = 10.0 if cfg.data else 1e-3
    cfg.validate()
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, model: bool = True) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--data", help="CSV dataset (header of sensor ids); synthetic if omitted")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--nodes", type=int, help="sensor count for synthetic data")
    p.add_argument("--days", type=int, help="days of synthetic data")
    p.add_argument("--noise", type=float, help="synthetic noise scale")
    if not model:
        return
    p.add_argument("--attn-layers", dest="attn_layers", type=int)
    p.add_argument("--mamba-layers", dest="mamba_layers", type=int)
    p.add_argument("--d-embed", dest="d_embed", type=int)
    p.add_argument("--d-adaptive", dest="d_adaptive", type=int)
    p.add_argument("--d-state", dest="d_state", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--expand", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--split", help="train:val:test ratios, e.g. 6:2:2")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--milestones", help="epochs after which the learning rate halves")
    p.add_argument("--patience", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mape-floor", dest="mape_floor", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stmambasync", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset (CSV + .meta sidecar)")
    _common(p, model=False)
    p.add_argument("--name", default="synthetic")

    p = sub.add_parser("train", help="train a model and write checkpoints and reports")
    _common(p)
    p.add_argument("--resume", help="continue from a last.ckpt written by a previous run")

    p = sub.add_parser("eval", help="per-step test metrics of a checkpoint")
    _common(p, model=False)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("bench", help="FLOPS count and inference timing")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--windows", type=int, default=32, help="random windows when no data is given")

    p = sub.add_parser("ablate", help="train a grid of (attention, mamba) layer counts")
    _common(p)
    p.add_argument("--grid", default="1,1;1,0;0,1", help="semicolon-separated A,M pairs")

    p = sub.add_parser("verify", help="run the attention/least-squares/scan duality checks")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    return parser


def _load_dataset(rc: RunConfig):
    if rc.data:
        return load_csv(rc.data)
    return generate_synthetic(rc.nodes, rc.days, rc.seed, rc.noise)


def _outdir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(rc.dump())
    return out


def cmd_synth(args) -> int:
    rc = resolve(args)
    ds = generate_synthetic(rc.nodes, rc.days, rc.seed, rc.noise)
    ds.name = args.name
    csv_path, meta = save_csv(ds, Path(rc.out) / "data.csv")
    print(f"wrote {csv_path} and {meta} ({ds.n_frames} frames x {ds.n_nodes} sensors)")
    return EXIT_OK


def _write_epoch_reports(out: Path, report) -> None:
    write_csv(out / "epochs.csv", ["epoch", "lr", "train_mae", "val_mae"],
              [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
               for r in report.epochs])


def cmd_train(args) -> int:
    rc = resolve(args)
    ds = _load_dataset(rc)
    split = SplitSpec.parse(rc.split)
    state = None
    if args.resume:
        params, scaler, tcfg, info, state = load_run(args.resume)
        if state is None:
            raise UsageError(f"{args.resume} holds no optimizer state; use a last.ckpt")
        cfg = params.cfg
        tcfg = replace(tcfg, max_epochs=rc.epochs, patience=rc.patience)
        split = SplitSpec.parse(info.get("split", rc.split))
    else:
        cfg = rc.model_config(ds.n_nodes, ds.steps_per_day)
        tcfg = rc.train_config()
        params = ModelParams(cfg, rc.seed)
    if ds.n_nodes != cfg.N:
        raise UsageError(f"data has {ds.n_nodes} sensors, model expects {cfg.N}")
    tr, va, te = make_windows(ds, cfg.M, cfg.Z, split)
    if len(tr) == 0:
        raise UsageError("training split has no complete windows")
    if state is None:
        try:
            (tr, va, te), scaler = standardize(tr, [tr, va, te], ds.sensor_ids)
        except ValueError as e:
            raise UsageError(str(e)) from None
    else:
        tr, va, te = (w.with_x(scaler.transform(w.x)) for w in (tr, va, te))
    out = _outdir(rc)
    info = {"source": rc.data or "synthetic", "split": str(split), "nodes": ds.n_nodes}
    log.info("windows: train %d, val %d, test %d", len(tr), len(va), len(te))

    def checkpoint(row, st):
        save_run(out / "last.ckpt", params, scaler, tcfg, info, st)

    report, state = train(params, tr, va, scaler, tcfg, state=state, on_epoch=checkpoint)
    save_run(out / "best.ckpt", params, scaler, tcfg, info)
    _write_epoch_reports(out, report)
    write_csv(out / "timings.csv", ["epoch", "seconds"],
              [{"epoch": r["epoch"], "seconds": s}
               for r, s in zip(report.epochs[-len(report.seconds):], report.seconds)])
    plotting.plot_loss_curves(report.epochs, out / "loss.png", report.best_epoch)
    print(f"best epoch {report.best_epoch} (val MAE {report.best_val:.4f}), "
          f"{len(report.epochs)} epochs{' (early stop)' if report.stopped_early else ''}")
    if len(te):
        res = evaluate(params, te, scaler, tcfg.mape_floor)
        write_csv(out / "metrics.csv", PER_STEP_COLUMNS, res.rows())
        plotting.plot_per_step({"test": res.rows()}, out / "per_step.png")
        print(f"test MAE {res.mae:.4f}  RMSE {res.rmse:.4f}  MAPE {res.mape:.2f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = resolve(args)
    params, scaler, tcfg, info, _ = load_run(args.checkpoint)
    ds = _load_dataset(rc)
    if ds.n_nodes != params.cfg.N:
        raise UsageError(f"data has {ds.n_nodes} sensors, checkpoint expects {params.cfg.N}")
    split = SplitSpec.parse(info.get("split", rc.split))
    _, _, te = make_windows(ds, params.cfg.M, params.cfg.Z, split)
    if len(te) == 0:
        raise UsageError("test split has no complete windows")
    te = te.with_x(scaler.transform(te.x))
    res = evaluate(params, te, scaler, tcfg.mape_floor)
    out = _outdir(rc)
    write_csv(out / "per_step.csv", PER_STEP_COLUMNS, res.rows())
    plotting.plot_per_step({"test": res.rows()}, out / "per_step.png")
    print(f"test MAE {res.mae:.4f}  RMSE {res.rmse:.4f}  MAPE {res.mape:.2f}%  "
          f"({res.n_windows} windows)")
    return EXIT_OK


def cmd_bench(args) -> int:
    rc = resolve(args)
    if args.checkpoint:
        params, scaler, _, info, _ = load_run(args.checkpoint)
        cfg = params.cfg
    else:
        nodes = args.nodes if args.nodes is not None else 170
        cfg = rc.model_config(nodes)
        params = ModelParams(cfg, rc.seed)
        scaler = None
    if rc.data:
        ds = load_csv(rc.data)
        _, _, windows = make_windows(ds, cfg.M, cfg.Z, SplitSpec.parse(rc.split))
        if scaler is not None:
            windows = windows.with_x(scaler.transform(windows.x))
    else:
        windows = _random_windows(cfg, args.windows, rc.seed)
    flops = count_flops(cfg)
    timing = bench_inference(params, windows, repeats=args.repeats)
    out = _outdir(rc)
    write_csv(out / "flops.csv", ["part", "madds"],
              [{"part": k, "madds": v} for k, v in flops.parts.items()]
              + [{"part": "total", "madds": flops.total}])
    write_csv(out / "timings.csv", ["stage", "flops_m", "seconds"],
              [{"stage": s, "flops_m": flops.stage_total(s) / 1e6, "seconds": timing.stages[s]}
               for s in flops.stages]
              + [{"stage": "total", "flops_m": flops.total / 1e6, "seconds": timing.median}])
    plotting.plot_flops_breakdown(flops.stages, out / "flops.png", timing.stages)
    print(f"FLOPS {flops.total / 1e6:.3f} M per window; inference {timing.median:.4f} s "
          f"(IQR {timing.iqr:.4f}) over {len(windows)} windows")
    return EXIT_OK


def _random_windows(cfg: ModelConfig, n: int, seed: int):
    from .data import WindowSet
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cfg.M, cfg.N, cfg.d))
    t0 = np.arange(n)
    wk = np.zeros((n, cfg.M), dtype=np.int64)
    tod = (t0[:, None] + np.arange(cfg.M)) % cfg.steps_per_day
    return WindowSet(x, np.zeros((n, cfg.Z, cfg.N, cfg.d)), wk, tod, t0)


def cmd_ablate(args) -> int:
    rc = resolve(args)
    try:
        grid = [tuple(int(v) for v in pair.split(",")) for pair in args.grid.split(";") if pair]
    except ValueError:
        raise UsageError(f"bad --grid {args.grid!r}") from None
    if any(len(g) != 2 or min(g) < 0 for g in grid):
        raise UsageError(f"bad --grid {args.grid!r}")
    ds = _load_dataset(rc)
    base = rc.model_config(ds.n_nodes, ds.steps_per_day)
    out = _outdir(rc)
    rows = ablation_run(ds, grid, base, rc.train_config(), out, SplitSpec.parse(rc.split))
    plotting.plot_tradeoff(rows, out / "tradeoff.png")
    plotting.plot_per_step({f"A{r['attn_layers']} M{r['mamba_layers']}": r["eval"].rows()
                            for r in rows}, out / "per_step.png")
    for r in rows:
        print("  ".join(f"{c}={r[c]:.4g}" if isinstance(r[c], float) else f"{c}={r[c]}"
                        for c in ABLATION_COLUMNS))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = duality.run_suite(args.seed, args.instances)
    print(duality.format_table(results))
    if args.out:
        write_csv(Path(args.out) / "verify.csv", ["check", "max_dev", "tol", "passed"],
                  [{"check": r.name, "max_dev": r.deviation, "tol": r.tolerance,
                    "passed": r.passed} for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "ablate": cmd_ablate, "verify": cmd_verify}


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = int(os.environ.get("STMS_THREADS", "1"))
    try:
        with threadpool_limits(limits=max(1, threads)):
            return COMMANDS[args.command](args)
    except (UsageError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
