"""Metrics, Adam, the training loop with early stopping, and evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import IdentityScaler, WindowSet
from .model import ModelParams, forward, predict
from .nn import make_rng

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def _check(y_hat, y):
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {y.shape}")
    return y_hat, y


def mae(y_hat, y) -> float:
    y_hat, y = _check(y_hat, y)
    return float(np.mean(np.abs(y_hat - y)))


def rmse(y_hat, y) -> float:
    y_hat, y = _check(y_hat, y)
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def mape(y_hat, y, floor: float = 0.0) -> float:
    """Mean absolute percentage error over targets with ``|y| > floor``."""
    if floor < 0:
        raise ValueError("floor must be non-negative")
    y_hat, y = _check(y_hat, y)
    keep = np.abs(y) > floor
    if not keep.any():
        raise UndefinedMetricError(f"no target exceeds the MAPE floor {floor}")
    return float(np.mean(np.abs(y_hat[keep] - y[keep]) / np.abs(y[keep])) * 100.0)


def mae_loss(pred: T.Tensor, y) -> T.Tensor:
    return T.tabs(pred - y).mean()


# -- optimiser ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr0: float = 1e-3
    milestones: tuple = (25, 50)
    lr_gamma: float = 0.5
    batch_size: int = 16
    patience: int = 30
    max_epochs: int = 200
    seed: int = 0
    mape_floor: float = 10.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        self.milestones = tuple(int(m) for m in self.milestones)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: halved after each milestone epoch."""
        return self.lr0 * self.lr_gamma ** sum(epoch > m for m in self.milestones)


@dataclass
class EvalResult:
    mae: float
    rmse: float
    mape: float
    step_mae: np.ndarray
    step_rmse: np.ndarray
    step_mape: np.ndarray
    n_windows: int

    def rows(self) -> list[dict]:
        return [{"step": k + 1, "MAE": self.step_mae[k], "RMSE": self.step_rmse[k],
                 "MAPE": self.step_mape[k]} for k in range(len(self.step_mae))]


@dataclass
class RunReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, lr, train_mae, val_mae
    seconds: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    stopped_early: bool = False
    test: EvalResult | None = None


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int
    adam: AdamState
    best_val: float
    best_epoch: int
    best_params: dict
    bad_epochs: int
    history: list


def raw_predict(params: ModelParams, ws: WindowSet, scaler, batch_size: int = 64) -> np.ndarray:
    return scaler.inverse(predict(params, ws.x, ws.weekday_idx, ws.tod_idx, batch_size))


def evaluate(params: ModelParams, ws: WindowSet, scaler=None, mape_floor: float = 0.0,
             batch_size: int = 64) -> EvalResult:
    """Metrics per forecast step and over all steps, in raw units."""
    if len(ws) == 0:
        raise ValueError("empty evaluation set")
    scaler = scaler or IdentityScaler()
    return evaluate_predictions(raw_predict(params, ws, scaler, batch_size), ws.y, mape_floor)


def evaluate_predictions(y_hat: np.ndarray, y: np.ndarray, mape_floor: float = 0.0) -> EvalResult:
    y_hat, y = _check(y_hat, y)
    Z = y.shape[1]
    return EvalResult(
        mae(y_hat, y), rmse(y_hat, y), mape(y_hat, y, mape_floor),
        np.array([mae(y_hat[:, k], y[:, k]) for k in range(Z)]),
        np.array([rmse(y_hat[:, k], y[:, k]) for k in range(Z)]),
        np.array([mape(y_hat[:, k], y[:, k], mape_floor) for k in range(Z)]),
        len(y))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle permutation of epoch ``epoch``; a pure function of its arguments."""
    return make_rng([seed, epoch]).permutation(n)


def train(params: ModelParams, train_ws: WindowSet, val_ws: WindowSet, scaler,
          cfg: TrainConfig, state: TrainState | None = None, on_epoch=None,
          stop_when=None) -> tuple[RunReport, TrainState]:
    """Minimise MAE on de-standardised predictions with Adam and early stopping.

    The best-validation parameters are restored into ``params`` at the end.
    ``on_epoch(row, state)`` is called after each epoch; ``stop_when(row)``
    returning true ends the run early.
    """
    if len(train_ws) == 0:
        raise ValueError("empty training split")
    scaler = scaler or IdentityScaler()
    plist = params.parameters()
    if state is None:
        state = TrainState(0, AdamState.zeros(plist), float("inf"), 0, params.state_dict(), 0, [])
    report = RunReport(epochs=list(state.history))
    monitor = val_ws if len(val_ws) else train_ws
    n = len(train_ws)

    while state.epoch < cfg.max_epochs and state.bad_epochs < cfg.patience:
        epoch = state.epoch + 1
        lr = cfg.lr_at(epoch)
        t0 = time.perf_counter()
        order = epoch_order(n, cfg.seed, epoch)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            b = train_ws[idx]
            params.zero_grad()
            pred = scaler.inverse(forward(b.x, b.weekday_idx, b.tod_idx, params))
            loss = mae_loss(pred, b.y)
            loss.backward()
            adam_step(plist, [p.grad for p in plist], state.adam, lr)
            total += loss.item() * len(idx)
        train_mae = total / n
        val_mae = mae(raw_predict(params, monitor, scaler), monitor.y)
        row = {"epoch": epoch, "lr": lr, "train_mae": train_mae, "val_mae": val_mae}
        state.history.append(row)
        report.epochs.append(row)
        report.seconds.append(time.perf_counter() - t0)
        state.epoch = epoch
        if val_mae < state.best_val:
            state.best_val, state.best_epoch = val_mae, epoch
            state.best_params = params.state_dict()
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        log.info("epoch %d lr %.2e train %.4f val %.4f", epoch, lr, train_mae, val_mae)
        if on_epoch is not None:
            on_epoch(row, state)
        if stop_when is not None and stop_when(row):
            break

    report.stopped_early = state.bad_epochs >= cfg.patience
    report.best_epoch, report.best_val = state.best_epoch, state.best_val
    params.load_state_dict(state.best_params)
    return report, state
