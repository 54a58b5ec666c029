"""RMSSD from beat intervals and per-minute context features."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import MinuteGrid
from .timeutil import MS_PER_MINUTE, day_to_date, local_fields

FEATURE_VERSION = 1
SLOPE_CHANNELS = ("hr", "rmssd", "respiration", "stress")
SLOPE_SPANS = (5, 15)
RAW_CHANNELS = ("hr", "rmssd", "respiration", "stress", "steps")
FEATURE_NAMES = (
    list(RAW_CHANNELS)
    + [f"{c}_slope{s}" for c in SLOPE_CHANNELS for s in SLOPE_SPANS]
    + ["tod_sin", "tod_cos", "dow_sin", "dow_cos", "sleep"]
)

STEP_MS = 30_000


@dataclass
class RmssdSeries:
    start: int
    rmssd: np.ndarray  # NaN where invalid
    valid: np.ndarray
    n_intervals: np.ndarray  # smallest N among the updates averaged into each minute

    @property
    def minutes(self):
        return self.start + np.arange(len(self.rmssd), dtype=np.int64)


@dataclass
class FeatureFrame:
    user_id: str
    start: int
    values: np.ndarray  # (minutes, features), NaN where invalid
    names: tuple = tuple(FEATURE_NAMES)
    version: int = FEATURE_VERSION

    @property
    def valid(self):
        return np.isfinite(self.values)

    def __len__(self):
        return len(self.values)

    @property
    def width(self):
        return self.values.shape[1]

    def metadata(self):
        return {"user_id": self.user_id, "start": self.start, "feature_names": list(self.names),
                "version": self.version, "n_minutes": len(self)}


def rmssd(intervals) -> float:
    """Root mean square of successive differences of one contiguous interval run."""
    d = np.diff(np.asarray(intervals, dtype=float))
    return float(np.sqrt(np.mean(d * d)))


def compute_rmssd(bbi_t, bbi, start: int, n_minutes: int, *, window_minutes: int = 15,
                  min_intervals: int = 20, max_gap_minutes: float = 30,
                  adjacency_ms: float = 5_000) -> RmssdSeries:
    """Rolling RMSSD updated every 30 s, averaged to one value per minute.

    Minute ``m`` averages the updates ending at ``m:30`` and ``m+1:00``; each
    update covers the trailing ``window_minutes`` ``[T - W, T)``. Successive
    differences are taken only between beats less than ``adjacency_ms``
    apart. An update is invalid with fewer than ``min_intervals`` differences
    or if a beat-to-beat gap longer than ``max_gap_minutes`` ends inside it.
    """
    bbi_t = np.asarray(bbi_t, dtype=np.int64)
    bbi = np.asarray(bbi, dtype=float)
    window_ms = window_minutes * MS_PER_MINUTE
    blocks_per_window = window_ms // STEP_MS
    origin = start * MS_PER_MINUTE - window_ms
    n_blocks = blocks_per_window + 2 * n_minutes

    sumsq = np.zeros(n_blocks)
    count = np.zeros(n_blocks)
    gaps = np.zeros(n_blocks)
    if len(bbi) > 1:
        d = np.diff(bbi)
        dt = np.diff(bbi_t)
        t = bbi_t[1:]
        blk = (t - origin) // STEP_MS
        inside = (blk >= 0) & (blk < n_blocks)
        use = inside & (dt <= adjacency_ms)
        sumsq = np.bincount(blk[use], weights=d[use] ** 2, minlength=n_blocks)
        count = np.bincount(blk[use], minlength=n_blocks).astype(float)
        g = inside & (dt > max_gap_minutes * MS_PER_MINUTE)
        gaps = np.bincount(blk[g], minlength=n_blocks).astype(float)

    # window i spans blocks i .. i + blocks_per_window - 1
    s = sliding_window_view(sumsq, blocks_per_window).sum(axis=1)
    n = sliding_window_view(count, blocks_per_window).sum(axis=1)
    gap = sliding_window_view(gaps, blocks_per_window).sum(axis=1) > 0
    ok = (n >= max(min_intervals, 1)) & ~gap
    upd = np.full(len(s), np.nan)
    upd[ok] = np.sqrt(s[ok] / n[ok])

    pair = np.stack([upd[1:2 * n_minutes:2], upd[2:2 * n_minutes + 1:2]], axis=1)
    pair_n = np.stack([n[1:2 * n_minutes:2], n[2:2 * n_minutes + 1:2]], axis=1)
    pair_ok = np.isfinite(pair)
    k = pair_ok.sum(axis=1)
    valid = k > 0
    out = np.full(n_minutes, np.nan)
    out[valid] = np.where(pair_ok, pair, 0.0).sum(axis=1)[valid] / k[valid]
    n_used = np.where(pair_ok, pair_n, np.inf).min(axis=1)
    n_used = np.where(valid, n_used, 0).astype(np.int64)
    return RmssdSeries(start, out, valid, n_used)


def minute_bbi(bbi_t, bbi, start: int, n_minutes: int) -> np.ndarray:
    """Mean interval of the beats stamped in each minute; NaN for beat-free minutes."""
    m = np.asarray(bbi_t, dtype=np.int64) // MS_PER_MINUTE - start
    inside = (m >= 0) & (m < n_minutes)
    tot = np.bincount(m[inside], weights=np.asarray(bbi, dtype=float)[inside], minlength=n_minutes)
    cnt = np.bincount(m[inside], minlength=n_minutes)
    out = np.full(n_minutes, np.nan)
    has = cnt > 0
    out[has] = tot[has] / cnt[has]
    return out


def compute_slope(values, span: int, min_points: int = 3) -> np.ndarray:
    """Trailing least-squares slope (value per minute) over ``span`` minutes.

    NaN entries are invalid; the result is NaN where fewer than
    ``min_points`` valid points fall in the trailing span.
    """
    if span not in (5, 15):
        raise ValueError("span must be 5 or 15")
    y = np.concatenate([np.full(span - 1, np.nan), np.asarray(values, dtype=float)])
    win = sliding_window_view(y, span)
    w = np.isfinite(win)
    yz = np.where(w, win, 0.0)
    x = np.arange(span, dtype=float)
    n = w.sum(axis=1)
    sx = (w * x).sum(axis=1)
    sxx = (w * x * x).sum(axis=1)
    sy = yz.sum(axis=1)
    sxy = (yz * x).sum(axis=1)
    denom = n * sxx - sx * sx
    out = np.full(len(win), np.nan)
    ok = n >= min_points
    out[ok] = (n[ok] * sxy[ok] - sx[ok] * sy[ok]) / denom[ok]
    return out


def time_encodings(minutes, tz: str = "UTC") -> np.ndarray:
    """Columns tod_sin, tod_cos, dow_sin, dow_cos (Monday is day 0)."""
    _, mod, dow = local_fields(minutes, tz)
    tod = 2 * np.pi * mod / 1440.0
    wk = 2 * np.pi * dow / 7.0
    return np.stack([np.sin(tod), np.cos(tod), np.sin(wk), np.cos(wk)], axis=1)


def encode_time(minute: int, tz: str = "UTC"):
    return tuple(float(v) for v in time_encodings([minute], tz)[0])


def build_feature_frame(grid: MinuteGrid, rmssd_series: RmssdSeries, sleep: dict,
                        tz: str | None = None) -> FeatureFrame:
    if rmssd_series.start != grid.start or len(rmssd_series.rmssd) != len(grid):
        raise ValueError(
            f"index mismatch: grid starts {grid.start} ({len(grid)} min), "
            f"rmssd starts {rmssd_series.start} ({len(rmssd_series.rmssd)} min)"
        )
    tz = tz or grid.tz
    raw = {name: grid.values[name] for name in ("hr", "respiration", "stress", "steps")}
    raw["rmssd"] = np.where(rmssd_series.valid, rmssd_series.rmssd, np.nan)
    cols = [raw[c] for c in RAW_CHANNELS]
    for c in SLOPE_CHANNELS:
        for s in SLOPE_SPANS:
            cols.append(compute_slope(raw[c], s))
    enc = time_encodings(grid.minutes, tz)
    cols.extend(enc.T)
    scores = {}
    for d in np.unique(grid.day):
        scores[d] = sleep.get(day_to_date(d), np.nan)
    cols.append(np.array([scores[d] for d in grid.day], dtype=float))
    values = np.stack(cols, axis=1)
    return FeatureFrame(grid.user_id, grid.start, values)


def write_frame(frame: FeatureFrame, path):
    path = Path(path)
    df = pd.DataFrame(frame.values, columns=list(frame.names))
    df.insert(0, "minute", frame.start + np.arange(len(frame), dtype=np.int64))
    df.to_csv(path, index=False, float_format="%.17g")
    path.with_suffix(".json").write_text(json.dumps(frame.metadata(), indent=2, sort_keys=True))


def read_frame(path) -> FeatureFrame:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta["feature_names"] != FEATURE_NAMES:
        raise ValueError(f"{path}: feature order differs from version {FEATURE_VERSION}")
    df = pd.read_csv(path, float_precision="round_trip")
    return FeatureFrame(meta["user_id"], meta["start"], df[FEATURE_NAMES].to_numpy(dtype=float),
                        tuple(meta["feature_names"]), meta["version"])
