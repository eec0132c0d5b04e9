"""Traffic datasets: CSV ingestion, synthetic generation, windowing, standardisation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import calendar_indices
from .nn import make_rng

META_SUFFIX = ".meta"


class ParseError(ValueError):
    pass


@dataclass
class TrafficDataset:
    values: np.ndarray  # T_total x N x d
    steps_per_day: int = 288
    start_weekday: int = 0
    name: str = "traffic"
    sensor_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"values must be T x N x d, got {self.values.shape}")
        if np.isnan(self.values).any():
            raise ValueError("dataset contains NaN")
        if not self.sensor_ids:
            self.sensor_ids = [str(i) for i in range(self.n_nodes)]

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]


def _impute(col: np.ndarray, sensor: str) -> np.ndarray:
    """Forward-fill gaps; leading gaps take the first observed value."""
    ok = ~np.isnan(col)
    if not ok.any():
        raise ParseError(f"sensor {sensor!r} has no readings")
    idx = np.where(ok, np.arange(len(col)), 0)
    np.maximum.accumulate(idx, out=idx)
    filled = col[idx]
    first = np.argmax(ok)
    filled[:first] = col[first]
    return filled


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(META_SUFFIX)


def read_meta(path) -> dict[str, str]:
    meta = {}
    p = _meta_path(path)
    if p.exists():
        for line in p.read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    return meta


def load_csv(path, steps_per_day: int | None = None,
             start_weekday: int | None = None) -> TrafficDataset:
    """Read a header row of sensor ids followed by one row of readings per frame.

    Calendar settings default to the ``.meta`` sidecar, if any, then to 288/0.
    """
    path = Path(path)
    meta = read_meta(path)
    if steps_per_day is None:
        steps_per_day = int(meta.get("steps_per_day", 288))
    if start_weekday is None:
        start_weekday = int(meta.get("start_weekday", 0))
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        n = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n:
                raise ParseError(f"{path}:{lineno}: expected {n} cells, got {len(row)}")
            vals = []
            for cell in row:
                cell = cell.strip()
                if cell == "":
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    for j, sensor in enumerate(header):
        values[:, j] = _impute(values[:, j], sensor)
    return TrafficDataset(values[:, :, None], steps_per_day, start_weekday,
                          meta.get("name", path.stem), [h.strip() for h in header])


def save_csv(ds: TrafficDataset, path) -> tuple[Path, Path]:
    """Write the CSV and its ``.meta`` sidecar; values round-trip exactly."""
    if ds.values.shape[2] != 1:
        raise ValueError("CSV format holds one feature per sensor")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.sensor_ids)
        for row in ds.values[:, :, 0]:
            w.writerow([repr(float(v)) for v in row])
    meta = _meta_path(path)
    meta.write_text(f"name={ds.name}\nsteps_per_day={ds.steps_per_day}\n"
                    f"start_weekday={ds.start_weekday}\n")
    return path, meta


def generate_synthetic(N: int, days: int, seed: int = 0, noise: float = 1.0,
                       steps_per_day: int = 288, start_weekday: int = 0) -> TrafficDataset:
    """Daily sinusoid per sensor with a weekend dip and Gaussian noise.

    ``noise`` scales every sensor's noise level; ``noise=0`` gives a signal
    that repeats exactly every day within weekdays and within weekends.
    """
    if N < 1 or days < 1:
        raise ValueError("N and days must be at least 1")
    rng = make_rng(seed)
    base = rng.uniform(150.0, 350.0, N)
    amp = rng.uniform(60.0, 140.0, N)
    phase = rng.uniform(0.0, 2 * np.pi, N)
    dip = rng.uniform(20.0, 60.0, N)
    sigma = noise * rng.uniform(0.5, 1.5, N)
    t = np.arange(days * steps_per_day)
    tod = t % steps_per_day
    weekday = (start_weekday + t // steps_per_day) % 7
    weekend = (weekday >= 5).astype(np.float64)
    signal = (base[None, :] + amp[None, :] * np.sin(2 * np.pi * tod[:, None] / steps_per_day
                                                    + phase[None, :])
              - dip[None, :] * weekend[:, None])
    values = np.clip(signal + sigma[None, :] * rng.standard_normal(signal.shape), 0.0, None)
    return TrafficDataset(values[:, :, None], steps_per_day, start_weekday, "synthetic",
                          [f"s{i}" for i in range(N)])


@dataclass(frozen=True)
class SplitSpec:
    train: int = 6
    val: int = 2
    test: int = 2

    @classmethod
    def parse(cls, text: str) -> "SplitSpec":
        parts = [int(p) for p in text.replace(",", ":").split(":")]
        if len(parts) != 3:
            raise ValueError(f"split must look like 6:2:2, got {text!r}")
        return cls(*parts)

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or self.train + self.val + self.test == 0:
            raise ValueError("split ratios must be non-negative with a positive sum")

    def __str__(self) -> str:
        return f"{self.train}:{self.val}:{self.test}"

    def bounds(self, n_frames: int) -> list[tuple[int, int]]:
        """Chronological ``[start, stop)`` frame ranges for train, val and test."""
        total = self.train + self.val + self.test
        a = n_frames * self.train // total
        b = a + n_frames * self.val // total
        return [(0, a), (a, b), (b, n_frames)]


@dataclass
class TrafficWindow:
    x: np.ndarray
    y: np.ndarray
    weekday_idx: np.ndarray
    tod_idx: np.ndarray
    t0: int


@dataclass
class WindowSet:
    """A stack of windows; ``x`` is ``n x M x N x d`` and ``y`` is ``n x Z x N x d``."""

    x: np.ndarray
    y: np.ndarray
    weekday_idx: np.ndarray
    tod_idx: np.ndarray
    t0: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return TrafficWindow(self.x[i], self.y[i], self.weekday_idx[i], self.tod_idx[i],
                                 int(self.t0[i]))
        return WindowSet(self.x[i], self.y[i], self.weekday_idx[i], self.tod_idx[i], self.t0[i])

    def with_x(self, x: np.ndarray) -> "WindowSet":
        return WindowSet(x, self.y, self.weekday_idx, self.tod_idx, self.t0)


def _windows(ds: TrafficDataset, start: int, stop: int, M: int, Z: int) -> WindowSet:
    count = max(0, stop - start - M - Z + 1)
    t0 = start + np.arange(count)
    N, d = ds.values.shape[1:]
    x = np.empty((count, M, N, d))
    y = np.empty((count, Z, N, d))
    wk = np.empty((count, M), dtype=np.int64)
    tod = np.empty((count, M), dtype=np.int64)
    for i, t in enumerate(t0):
        x[i] = ds.values[t:t + M]
        y[i] = ds.values[t + M:t + M + Z]
        wk[i], tod[i] = calendar_indices(int(t), M, ds.steps_per_day, ds.start_weekday)
    return WindowSet(x, y, wk, tod, t0)


def make_windows(ds: TrafficDataset, M: int, Z: int,
                 split: SplitSpec = SplitSpec()) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Stride-1 windows inside each chronological split; none straddles a boundary."""
    if M < 1 or Z < 1:
        raise ValueError("M and Z must be at least 1")
    return tuple(_windows(ds, a, b, M, Z) for a, b in split.bounds(ds.n_frames))


class IdentityScaler:
    def transform(self, x):
        return x

    def inverse(self, x):
        return x


@dataclass
class StandardScaler:
    """Per-sensor z-scoring; ``mean`` and ``std`` are ``N x d``."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, x):
        return x * self.std + self.mean


def fit_scaler(train: WindowSet, sensor_ids=None) -> StandardScaler:
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on an empty training split")
    flat = train.x.reshape(-1, *train.x.shape[2:])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    bad = np.argwhere(std == 0)
    if len(bad):
        n = int(bad[0][0])
        label = sensor_ids[n] if sensor_ids is not None else str(n)
        raise ValueError(f"sensor {label!r} is constant over the training inputs (zero std)")
    return StandardScaler(mean, std)


def standardize(train: WindowSet, windows, sensor_ids=None):
    """Z-score the inputs of every window set with training statistics.

    Targets stay in raw units. Returns the scaled sets and the scaler.
    """
    scaler = fit_scaler(train, sensor_ids)
    return [w.with_x(scaler.transform(w.x)) for w in windows], scaler
