"""Input embedding: dense feature map, calendar lookups and the adaptive embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LinearMap, Parameter, split_rng, xavier_uniform_init
from .tensor import Tensor

DAYS_PER_WEEK = 7


@dataclass(frozen=True)
class EmbedConfig:
    d_e: int = 24
    d_s: int = 8
    M: int = 12
    N: int = 170
    d: int = 1
    steps_per_day: int = 288

    @property
    def d_h(self) -> int:
        return 3 * self.d_e + self.d_s


class EmbedParams:
    def __init__(self, cfg: EmbedConfig, rng):
        r = split_rng(rng, 4)
        self.cfg = cfg
        self.feature_map = LinearMap(cfg.d, cfg.d_e, r[0], name="embed.feature_map")
        self.weekday_table = Parameter(
            xavier_uniform_init((DAYS_PER_WEEK, cfg.d_e), r[1]), "embed.weekday_table")
        self.tod_table = Parameter(
            xavier_uniform_init((cfg.steps_per_day, cfg.d_e), r[2]), "embed.tod_table")
        self.adaptive = Parameter(
            xavier_uniform_init((cfg.M, cfg.N, cfg.d_s), r[3]), "embed.adaptive")

    def parameters(self) -> list[Parameter]:
        return [*self.feature_map.parameters(), self.weekday_table, self.tod_table,
                self.adaptive]


def embed_features(x, p: EmbedParams) -> Tensor:
    """Dense map of the raw ``(..., M, N, d)`` readings to ``(..., M, N, d_e)``."""
    x = T.ensure_tensor(x)
    cfg = p.cfg
    if x.shape[-3:] != (cfg.M, cfg.N, cfg.d):
        raise ValueError(f"expected input (..., {cfg.M}, {cfg.N}, {cfg.d}), got {x.shape}")
    return p.feature_map(x)


def embed_calendar(weekday_idx, tod_idx, p: EmbedParams, N: int) -> Tensor:
    """Weekday and time-of-day rows, concatenated and repeated over ``N`` nodes.

    Index arrays are ``(..., M)``; the result is ``(..., M, N, 2*d_e)``.
    """
    weekday_idx = np.asarray(weekday_idx)
    tod_idx = np.asarray(tod_idx)
    if weekday_idx.shape != tod_idx.shape:
        raise ValueError("weekday and time-of-day index shapes differ")
    zw = T.take_rows(p.weekday_table, weekday_idx)
    zh = T.take_rows(p.tod_table, tod_idx)
    zc = T.concat([zw, zh], axis=-1)
    lead = zc.shape[:-1]
    zc = zc.reshape(*lead, 1, zc.shape[-1])
    return T.broadcast_to(zc, (*lead, N, zc.shape[-1]))


def assemble_hidden(zf, zc, zs) -> Tensor:
    """Concatenate ``[feature | weekday | time-of-day | adaptive]`` on the last axis."""
    zf, zc, zs = T.ensure_tensor(zf), T.ensure_tensor(zc), T.ensure_tensor(zs)
    if zf.shape[-3:-1] != zc.shape[-3:-1] or zs.shape[-3:-1] != zf.shape[-3:-1]:
        raise ValueError(f"inconsistent (M, N): {zf.shape}, {zc.shape}, {zs.shape}")
    lead = zf.shape[:-1]
    if zc.shape[:-1] != lead:
        zc = T.broadcast_to(zc, (*lead, zc.shape[-1]))
    if zs.shape[:-1] != lead:
        zs = T.broadcast_to(zs, (*lead, zs.shape[-1]))
    return T.concat([zf, zc, zs], axis=-1)


def embed(x, weekday_idx, tod_idx, p: EmbedParams) -> Tensor:
    zf = embed_features(x, p)
    zc = embed_calendar(weekday_idx, tod_idx, p, p.cfg.N)
    return assemble_hidden(zf, zc, p.adaptive)


def calendar_indices(t0: int, M: int, steps_per_day: int = 288, start_weekday: int = 0):
    """Weekday and time-of-day indices for the ``M`` frames starting at ``t0``."""
    if t0 < 0:
        raise ValueError("t0 must be non-negative")
    t = t0 + np.arange(M)
    tod = t % steps_per_day
    weekday = (start_weekday + t // steps_per_day) % DAYS_PER_WEEK
    return weekday.astype(np.int64), tod.astype(np.int64)
