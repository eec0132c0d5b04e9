"""End-to-end forecaster: embedding, ST-Transformer blocks, ST-mixer, Mamba blocks, head."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import STBlockParams, st_transformer_block
from .embedding import EmbedConfig, EmbedParams, embed
from .mamba import MambaConfig, MambaParams, mamba_block, st_mix, st_unmix
from .nn import LinearMap, Parameter, split_rng
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    N: int = 170
    M: int = 12
    Z: int = 12
    d: int = 1
    d_e: int = 24
    d_s: int = 8
    heads: int = 4
    n_attention_layers: int = 1
    n_mamba_layers: int = 1
    expand: int = 2
    d_state: int = 16
    steps_per_day: int = 288

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        for name in ("N", "M", "Z", "d", "d_e", "heads", "expand", "d_state", "steps_per_day"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_attention_layers and self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by heads={self.heads}")

    @property
    def d_h(self) -> int:
        return 3 * self.d_e + self.d_s

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_h

    @property
    def embed(self) -> EmbedConfig:
        return EmbedConfig(self.d_e, self.d_s, self.M, self.N, self.d, self.steps_per_day)

    @property
    def mamba(self) -> MambaConfig:
        return MambaConfig(self.d_h, self.expand, self.d_state)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in d.items() if k in names})


class ModelParams:
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        r = split_rng(seed, 4)
        self.embed = EmbedParams(cfg.embed, r[0])
        self.st_blocks = [STBlockParams(cfg.d_h, cfg.heads, g, f"st{i}")
                          for i, g in enumerate(split_rng(r[1], cfg.n_attention_layers))]
        self.mamba = [MambaParams(cfg.mamba, g, f"mamba{i}")
                      for i, g in enumerate(split_rng(r[2], cfg.n_mamba_layers))]
        self.head = LinearMap(cfg.M * cfg.d_h, cfg.Z * cfg.d, r[3], name="head")

    def parameters(self) -> list[Parameter]:
        out = self.embed.parameters()
        for b in self.st_blocks:
            out += b.parameters()
        for m in self.mamba:
            out += m.parameters()
        return out + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.parameters()}
        assert len(named) == len(self.parameters()), "duplicate parameter names"
        return named

    def n_scalars(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in named.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.shape}")
            p.data = v.copy()


def count_params(cfg: ModelConfig) -> int:
    """Closed-form number of learnable scalars for ``cfg``."""
    d_h, di, ds = cfg.d_h, cfg.d_inner, cfg.d_state
    embed = (cfg.d * cfg.d_e + cfg.d_e + 7 * cfg.d_e + cfg.steps_per_day * cfg.d_e
             + cfg.M * cfg.N * cfg.d_s)
    sublayer = 4 * (d_h * d_h + d_h) + (d_h * 4 * d_h + 4 * d_h) + (4 * d_h * d_h + d_h) + 4 * d_h
    mamba = (2 * d_h + (d_h * di + di) + di * ds + 2 * di * ds + di * di + di + di
             + (di * d_h + d_h) + 2 * d_h)
    head = cfg.M * d_h * cfg.Z * cfg.d + cfg.Z * cfg.d
    return embed + cfg.n_attention_layers * 2 * sublayer + cfg.n_mamba_layers * mamba + head


@contextmanager
def _stage(timer, key):
    if timer is None:
        yield
        return
    t0 = time.perf_counter()
    yield
    timer[key] = timer.get(key, 0.0) + time.perf_counter() - t0


def forward(x, weekday_idx, tod_idx, params: ModelParams, timer: dict | None = None) -> Tensor:
    """Forecast ``(..., Z, N, d)`` from ``(..., M, N, d)`` inputs and calendar indices.

    ``timer``, when given, accumulates wall-clock seconds per stage under the
    keys ``embedding``, ``attention``, ``mamba`` and ``head``.
    """
    cfg = params.cfg
    with _stage(timer, "embedding"):
        z = embed(x, weekday_idx, tod_idx, params.embed)
    with _stage(timer, "attention"):
        for blk in params.st_blocks:
            z = st_transformer_block(z, blk)
    with _stage(timer, "mamba"):
        if params.mamba:
            h = st_mix(z)
            for mp in params.mamba:
                h = mamba_block(h, mp)
            z = st_unmix(h, cfg.N)
    with _stage(timer, "head"):
        lead = z.shape[:-3]
        flat = z.swapaxes(-2, -3).reshape(*lead, cfg.N, cfg.M * cfg.d_h)
        y = params.head(flat).reshape(*lead, cfg.N, cfg.Z, cfg.d)
        y = y.swapaxes(-2, -3)
    return y


def predict(params: ModelParams, x, weekday_idx, tod_idx, batch_size: int = 64) -> np.ndarray:
    """Gradient-free batched forward over a stack of windows."""
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            sl = slice(i, i + batch_size)
            outs.append(forward(x[sl], weekday_idx[sl], tod_idx[sl], params).data)
    if not outs:
        c = params.cfg
        return np.zeros((0, c.Z, c.N, c.d))
    return np.concatenate(outs, axis=0)
