"""Series ingestion, splitting, windowing, normalization, patching and masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import DTYPE, RngState

EPS_NORM = 1e-8
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeriesDataset:
    name: str
    values: np.ndarray  # T x C
    timestamps: tuple[str, ...] | None = None
    split: tuple[int, int] | None = None
    columns: tuple[str, ...] = ()
    labels: np.ndarray | None = field(default=None, compare=False)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def segment(self, split_name: str) -> np.ndarray:
        if split_name == "all":
            return self.values
        if self.split is None:
            raise DataError(f"dataset {self.name!r} has no split boundaries")
        train_end, val_end = self.split
        bounds = {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, self.T)}
        if split_name not in bounds:
            raise DataError(f"unknown split {split_name!r}")
        lo, hi = bounds[split_name]
        return self.values[lo:hi]


@dataclass(frozen=True)
class ForecastWindow:
    input: np.ndarray  # L x C
    target: np.ndarray  # H x C
    origin: int


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # B x C
    std: np.ndarray  # B x C


@dataclass(frozen=True)
class PatchBatch:
    patches: np.ndarray  # B x C x N x P
    patch_len: int
    stride: int
    pad_mode: str = "none"

    @property
    def N(self) -> int:
        return self.patches.shape[2]


@dataclass(frozen=True)
class MaskPair:
    m: np.ndarray  # B x C x N, 1 = visible in view 1

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.m


# ---------------------------------------------------------------- ingestion


def load_csv(path, timestamp_col: str | None = "auto", value_cols: Sequence[str] | None = None) -> TimeSeriesDataset:
    """Read an ETT-style CSV: header row, optional timestamp column, numeric channels.

    ``timestamp_col="auto"`` treats the first column as timestamps when its
    first cell is not numeric.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if len(body) < 2:
        raise DataError(f"{path}: need at least 2 data rows, got {len(body)}")

    if timestamp_col == "auto":
        timestamp_col = header[0] if not _is_number(body[0][0]) else None
    if timestamp_col is not None and timestamp_col not in header:
        raise DataError(f"{path}: missing timestamp column {timestamp_col!r}")

    if value_cols is None:
        value_cols = [h for h in header if h != timestamp_col]
    missing = [c for c in value_cols if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    idx = [header.index(c) for c in value_cols]

    values = np.empty((len(body), len(idx)), dtype=DTYPE)
    for r, row in enumerate(body):
        for j, k in enumerate(idx):
            cell = row[k] if k < len(row) else ""
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell {cell!r} at row {r + 2}, column {header[k]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite cell at row {r + 2}, column {header[k]!r}")
            values[r, j] = v

    stamps = None
    if timestamp_col is not None:
        ti = header.index(timestamp_col)
        stamps = tuple(row[ti] for row in body)
    return TimeSeriesDataset(path.stem, values, stamps, None, tuple(value_cols))


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_csv(ds: TimeSeriesDataset, path) -> None:
    path = Path(path)
    cols = list(ds.columns) or [f"c{j}" for j in range(ds.C)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if ds.timestamps else []) + cols)
        for t in range(ds.T):
            row = [repr(float(v)) for v in ds.values[t]]
            w.writerow(([ds.timestamps[t]] if ds.timestamps else []) + row)


def chronological_split(ds: TimeSeriesDataset, ratios=(0.6, 0.2, 0.2)) -> TimeSeriesDataset:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {sum(ratios)}")
    train_end = int(math.floor(ds.T * ratios[0] + 1e-9))
    val_end = int(math.floor(ds.T * (ratios[0] + ratios[1]) + 1e-9))
    if not 0 < train_end < val_end < ds.T:
        raise DataError(f"split of T={ds.T} by {ratios} leaves an empty split")
    return replace(ds, split=(train_end, val_end))


def make_forecast_windows(ds: TimeSeriesDataset, split_name: str, L: int, H: int,
                          window_stride: int = 1) -> list[ForecastWindow]:
    if L <= 0 or H <= 0 or window_stride <= 0:
        raise DataError("L, H and window_stride must be positive")
    seg = ds.segment(split_name)
    if len(seg) < L + H:
        raise DataError(
            f"split {split_name!r} has {len(seg)} steps; need at least L+H = {L + H}"
        )
    count = (len(seg) - L - H) // window_stride + 1
    return [
        ForecastWindow(seg[o : o + L], seg[o + L : o + L + H], o)
        for o in range(0, count * window_stride, window_stride)
    ]


def stack_windows(windows: Sequence[ForecastWindow]) -> tuple[np.ndarray, np.ndarray]:
    """(B x L x C inputs, B x H x C targets)."""
    return (np.stack([w.input for w in windows]), np.stack([w.target for w in windows]))


# ---------------------------------------------------------------- normalization


def instance_normalize(x: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Per-instance, per-channel standardization over time.

    Accepts L x C or B x L x C; stats are B x C (B=1 for 2-D input).
    """
    x3 = x[None] if x.ndim == 2 else x
    mean = x3.mean(axis=1)
    std = np.maximum(x3.std(axis=1), EPS_NORM)
    out = (x3 - mean[:, None, :]) / std[:, None, :]
    return (out[0] if x.ndim == 2 else out), NormStats(mean, std)


def denormalize(pred: np.ndarray, stats: NormStats) -> np.ndarray:
    p3 = pred[None] if pred.ndim == 2 else pred
    out = p3 * stats.std[:, None, :] + stats.mean[:, None, :]
    return out[0] if pred.ndim == 2 else out


# ---------------------------------------------------------------- patching


def num_patches(L: int, patch_len: int, stride: int, pad_mode: str = "none") -> int:
    L_eff = L + stride if pad_mode == "replicate-last" else L
    if L_eff < patch_len:
        raise DataError(f"series length {L} shorter than patch length {patch_len}")
    return (L_eff - patch_len) // stride + 1


def patchify(x: np.ndarray, patch_len: int, stride: int | None = None,
             pad_mode: str = "none") -> PatchBatch:
    """Cut B x L x C (or L x C) normalized input into B x C x N x P patches."""
    if patch_len < 1:
        raise DataError("patch length must be >= 1")
    stride = patch_len if stride is None else stride
    if stride < 1:
        raise DataError("stride must be >= 1")
    if pad_mode not in ("none", "replicate-last"):
        raise DataError(f"unknown pad_mode {pad_mode!r}")
    x3 = x[None] if x.ndim == 2 else x
    series = np.transpose(x3, (0, 2, 1))  # B x C x L
    if pad_mode == "replicate-last":
        tail = np.repeat(series[..., -1:], stride, axis=-1)
        series = np.concatenate([series, tail], axis=-1)
    n = num_patches(x3.shape[1], patch_len, stride, pad_mode)
    idx = np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]
    patches = np.ascontiguousarray(series[..., idx])
    return PatchBatch(patches, patch_len, stride, pad_mode)


# ---------------------------------------------------------------- masking


def complementary_masks(B: int, C: int, N: int, rng: np.random.Generator) -> MaskPair:
    """Exactly floor(N/2) zeros per (instance, channel) row of m."""
    if N < 2:
        raise DataError(f"complementary masking needs N >= 2, got {N}")
    keys = rng.random((B, C, N))
    order = np.argsort(keys, axis=-1, kind="stable")
    m = np.ones((B, C, N), dtype=DTYPE)
    np.put_along_axis(m, order[..., : N // 2], 0.0, axis=-1)
    return MaskPair(m)


# ---------------------------------------------------------------- toy generators

DEFAULT_SLOPE_DELTAS = tuple(round(0.1 * k, 10) for k in range(-10, 4))  # 14 values
DEFAULT_AMP_DELTAS = (-0.75, -0.5, -0.25, 0.0, 0.5, 1.0, 2.0)  # 7 values


@dataclass(frozen=True)
class ShiftPoint:
    slope: float
    amplitude: float
    slope_delta: float
    amp_delta: float


def _trend_sine(T: int, slope: float, amplitude: float, period: float, noise_std: float,
                rng: np.random.Generator, phase: float = 0.0) -> np.ndarray:
    t = np.arange(T, dtype=DTYPE)
    y = amplitude * np.sin(2 * np.pi * t / period + phase) + slope * t / period
    if noise_std > 0:
        y = y + rng.normal(0.0, noise_std, size=T)
    return y


def default_shift_grid(s0: float = 0.5, a0: float = 1.0) -> list[ShiftPoint]:
    return [
        ShiftPoint(s0 + ds, a0 + da, ds, da)
        for ds in DEFAULT_SLOPE_DELTAS
        for da in DEFAULT_AMP_DELTAS
    ]


def gen_shift_toy(train_params=(0.5, 1.0), test_grid: Sequence[ShiftPoint] | None = None,
                  T: int = 2000, noise_std: float = 0.1, rng: RngState | None = None,
                  period: float = 24.0):
    """Trend-plus-sinusoid series: one train dataset and one test dataset per grid point.

    ``y(t) = a sin(2 pi t / period) + s t / period + noise``. The train
    dataset carries a 7:1:2 chronological split.
    """
    s0, a0 = train_params
    grid = default_shift_grid(s0, a0) if test_grid is None else list(test_grid)
    if not grid:
        raise DataError("shift grid is empty")
    rng = rng or RngState(0)
    y = _trend_sine(T, s0, a0, period, noise_std, rng.stream("toy-shift", 0))
    train = chronological_split(
        TimeSeriesDataset("shift_train", y[:, None], columns=("y",)), (0.7, 0.1, 0.2)
    )
    tests = []
    for k, pt in enumerate(grid):
        yk = _trend_sine(T, pt.slope, pt.amplitude, period, noise_std, rng.stream("toy-shift", k + 1))
        tests.append(TimeSeriesDataset(f"shift_{k:03d}", yk[:, None], columns=("y",)))
    return train, tests, grid


# per-class generator tables: (slope, period, amplitude)
CLASS_TABLE = (
    (0.0, 8.0, 1.0),
    (0.0, 16.0, 1.0),
    (0.0, 32.0, 1.0),
    (0.5, 8.0, 1.0),
    (0.5, 16.0, 0.5),
    (-0.5, 8.0, 1.0),
    (-0.5, 32.0, 0.5),
    (1.0, 16.0, 0.25),
    (-1.0, 16.0, 0.25),
    (0.25, 12.0, 2.0),
)


def gen_class_toy(num_classes: int = 10, per_class: int = 20, T: int = 96,
                  rng: RngState | None = None, noise_std: float = 0.1) -> TimeSeriesDataset:
    """Labeled univariate series: ``values`` is T x S, one column per series.

    Class k follows ``CLASS_TABLE[k]``: a linear trend rising ``4 * slope``
    over the series plus a sinusoid. With ``noise_std > 0`` each member also
    gets a random phase and Gaussian noise.
    """
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    if not 1 <= num_classes <= len(CLASS_TABLE):
        raise DataError(f"num_classes must be in [1, {len(CLASS_TABLE)}]")
    rng = rng or RngState(0)
    cols, labels = [], []
    g = rng.stream("toy-class")
    for k in range(num_classes):
        slope, period, amp = CLASS_TABLE[k]
        for _ in range(per_class):
            phase = g.uniform(0, 2 * np.pi) if noise_std > 0 else 0.0
            # _trend_sine scales slope by t/period
            cols.append(_trend_sine(T, 4 * slope * period / T, amp, period, noise_std, g, phase))
            labels.append(k)
    values = np.stack(cols, axis=1)
    return TimeSeriesDataset(
        "class_toy", values, columns=tuple(f"s{j}" for j in range(values.shape[1])),
        labels=np.asarray(labels, dtype=np.int64),
    )


def write_labels(labels: np.ndarray, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "label"])
        for i, y in enumerate(labels):
            w.writerow([i, int(y)])


def read_labels(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.asarray([int(r["label"]) for r in sorted(rows, key=lambda r: int(r["series_id"]))])


def gen_seasonal_toy(T: int = 4000, C: int = 3, rng: RngState | None = None,
                     noise_std: float = 0.3) -> TimeSeriesDataset:
    """Hourly-style multichannel series: daily and weekly cycles, drifting level, AR(1) noise.

    Carries the 6:2:2 split used for ETT-style data.
    """
    rng = rng or RngState(0)
    g = rng.stream("toy-seasonal")
    t = np.arange(T, dtype=DTYPE)
    cols = []
    for _ in range(C):
        amp_day, amp_week = g.uniform(0.5, 2.0), g.uniform(0.2, 1.0)
        ph_day, ph_week, ph_env = g.uniform(0, 2 * np.pi, 3)
        day = np.sin(2 * np.pi * t / 24 + ph_day)
        envelope = 1 + 0.5 * np.sin(2 * np.pi * t / (24 * 60) + ph_env)
        level = np.cumsum(g.normal(0, 0.05, T))
        shocks = g.normal(0, noise_std, T)
        ar = np.zeros(T)
        for k in range(1, T):
            ar[k] = 0.7 * ar[k - 1] + shocks[k]
        cols.append(envelope * amp_day * day + amp_week * np.sin(2 * np.pi * t / 168 + ph_week)
                    + 0.3 * np.maximum(day, 0) ** 3 + level + ar)
    ds = TimeSeriesDataset("seasonal_toy", np.stack(cols, axis=1),
                           columns=tuple(f"c{j}" for j in range(C)))
    return chronological_split(ds, (0.6, 0.2, 0.2))
