"""Raw stream/tag parsing and alignment onto a per-user 1-minute grid.

File layout per user directory::

    bbi.csv          timestamp,interval_ms        (timestamp: epoch milliseconds)
    hr.csv           timestamp,bpm                (timestamp: ISO-8601 minute)
    steps.csv        timestamp,steps
    respiration.csv  timestamp,breaths_per_min    (3-minute cadence)
    stress.csv       timestamp,stress             (3-minute cadence, 0-100)
    sleep.csv        date,score                   (0-100, night ending on `date`)
    tags.csv         name,category,start,end,expected_effect
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from .constants import CATEGORIES, EXPECTED_EFFECTS
from .timeutil import local_fields, parse_minutes

log = logging.getLogger(__name__)

# stream -> (file name, value column, lower bound, upper bound, lower bound inclusive)
STREAM_FILES = {
    "bbi": ("bbi.csv", "interval_ms", 0.0, np.inf, False),
    "hr": ("hr.csv", "bpm", 0.0, np.inf, False),
    "steps": ("steps.csv", "steps", 0.0, np.inf, True),
    "respiration": ("respiration.csv", "breaths_per_min", 0.0, np.inf, False),
    "stress": ("stress.csv", "stress", 0.0, 100.0, True),
}
SLEEP_FILE = ("sleep.csv", "score")
TAG_COLUMNS = ["name", "category", "start", "end", "expected_effect"]

INTERPOLATED = ("hr", "steps")
CARRIED = ("respiration", "stress")
GRID_CHANNELS = INTERPOLATED + CARRIED


class StreamFileError(FileNotFoundError):
    """A required per-stream file is missing or malformed."""


class EmptyGridError(ValueError):
    pass


@dataclass
class StreamBundle:
    user_id: str
    bbi_t: np.ndarray  # epoch ms
    bbi: np.ndarray  # ms
    hr_t: np.ndarray  # epoch minutes (all minute-cadence streams)
    hr: np.ndarray
    steps_t: np.ndarray
    steps: np.ndarray
    respiration_t: np.ndarray
    respiration: np.ndarray
    stress_t: np.ndarray
    stress: np.ndarray
    sleep: dict = field(default_factory=dict)  # date -> score
    parse_report: dict = field(default_factory=dict)

    def stream(self, name):
        return getattr(self, f"{name}_t"), getattr(self, name)


@dataclass(frozen=True)
class TagRecord:
    user_id: str
    name: str
    category: str
    t0: int
    t1: int
    expected_effect: str | None = None
    tag_id: str = ""

    def __post_init__(self):
        if self.t0 >= self.t1:
            raise ValueError(f"tag {self.name!r}: start {self.t0} not before end {self.t1}")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


@dataclass
class MinuteGrid:
    user_id: str
    start: int
    tz: str
    values: dict  # channel -> float array, NaN where invalid
    valid: dict  # channel -> bool array
    day: np.ndarray  # local day number per minute

    def __len__(self):
        return len(self.day)

    @property
    def minutes(self):
        return self.start + np.arange(len(self), dtype=np.int64)

    @property
    def end(self):
        return self.start + len(self)


def _validate(t, v, lo, hi, lo_inclusive):
    """Drop out-of-range then non-monotone rows; return kept arrays and drop counts."""
    ok = np.isfinite(v) & (v <= hi) & ((v >= lo) if lo_inclusive else (v > lo))
    n_range = int((~ok).sum())
    t, v = t[ok], v[ok]
    if len(t):
        prev_max = np.maximum.accumulate(t)
        keep = np.ones(len(t), dtype=bool)
        keep[1:] = t[1:] > prev_max[:-1]
    else:
        keep = np.ones(0, dtype=bool)
    n_mono = int((~keep).sum())
    return t[keep], v[keep], {"out_of_range": n_range, "non_monotone": n_mono}


def _read_stream(path: Path, value_col: str, time_col: str = "timestamp"):
    if not path.exists():
        raise StreamFileError(f"missing stream file: {path}")
    df = pd.read_csv(path, dtype={time_col: str}, float_precision="round_trip")
    if list(df.columns) != [time_col, value_col]:
        raise StreamFileError(
            f"{path}: expected header '{time_col},{value_col}', got {','.join(df.columns)}"
        )
    return df


def parse_streams(user_dir, user_id: str | None = None) -> StreamBundle:
    """Parse and validate all stream files of one user directory."""
    user_dir = Path(user_dir)
    user_id = user_id or user_dir.name
    arrays = {}
    report = {}
    for name, (fname, col, lo, hi, lo_inc) in STREAM_FILES.items():
        df = _read_stream(user_dir / fname, col)
        n_rows = len(df)
        if n_rows == 0:
            t = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        elif name == "bbi":
            t = pd.to_numeric(df["timestamp"], errors="coerce").to_numpy()
            v = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
        else:
            t = parse_minutes(df["timestamp"].to_numpy()).astype(float)
            v = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
        bad_time = ~np.isfinite(t.astype(float))
        v = np.where(bad_time, np.nan, v)
        t = np.where(bad_time, 0, t).astype(np.int64)
        t, v, drops = _validate(t, v, lo, hi, lo_inc)
        arrays[f"{name}_t"], arrays[name] = t, v
        report[name] = {"rows": n_rows, "kept": int(len(t)), "dropped": n_rows - int(len(t)), **drops}

    df = _read_stream(user_dir / SLEEP_FILE[0], SLEEP_FILE[1], time_col="date")
    sleep = {}
    n_bad = 0
    for d, s in zip(df["date"], pd.to_numeric(df["score"], errors="coerce")):
        if not (np.isfinite(s) and 0 <= s <= 100):
            n_bad += 1
            continue
        sleep[date.fromisoformat(str(d))] = float(s)
    report["sleep"] = {"rows": len(df), "kept": len(sleep), "dropped": n_bad, "out_of_range": n_bad}
    return StreamBundle(user_id=user_id, sleep=sleep, parse_report=report, **arrays)


def write_parse_report(bundles, path):
    data = {b.user_id: b.parse_report for b in bundles}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def _tag_minute(text: str) -> int:
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    return int(parse_minutes([text])[0])


def parse_tags(path, user_id: str | None = None):
    """Parse one user's tag file.

    Returns ``(tags, issues)``; tags are sorted by ``(user_id, t1)`` and issues
    lists rejected rows and category remappings.
    """
    path = Path(path)
    if not path.exists():
        raise StreamFileError(f"missing tag file: {path}")
    user_id = user_id or path.parent.name
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns) != TAG_COLUMNS:
        raise StreamFileError(f"{path}: expected header {','.join(TAG_COLUMNS)}")
    tags, issues = [], []
    for i, row in enumerate(df.itertuples(index=False)):
        try:
            t0, t1 = _tag_minute(row.start), _tag_minute(row.end)
        except (ValueError, TypeError):
            issues.append({"row": i, "reason": "bad_time"})
            continue
        if t0 >= t1:
            issues.append({"row": i, "reason": "start_not_before_end"})
            log.warning("%s row %d rejected: start >= end", path, i)
            continue
        category = row.category
        if category not in CATEGORIES:
            issues.append({"row": i, "reason": "unknown_category", "value": category})
            log.warning("%s row %d: unknown category %r mapped to Other", path, i, category)
            category = "Other"
        effect = row.expected_effect.strip().lower() or None
        if effect is not None and effect not in EXPECTED_EFFECTS:
            effect = "unknown"
        tags.append(TagRecord(user_id, row.name, category, t0, t1, effect, f"{user_id}:{i}"))
    tags.sort(key=lambda g: (g.user_id, g.t1, g.t0, g.tag_id))
    return tags, issues


def write_tags(tags, path):
    from .timeutil import format_minutes

    rows = []
    for g in tags:
        start, end = format_minutes([g.t0, g.t1])
        rows.append([g.name, g.category, start, end, g.expected_effect or ""])
    pd.DataFrame(rows, columns=TAG_COLUMNS).to_csv(path, index=False)


def _interp_channel(t, v, minutes, max_gap):
    out = np.full(len(minutes), np.nan)
    ok = np.zeros(len(minutes), dtype=bool)
    if len(t) == 0:
        return out, ok
    nxt = np.searchsorted(t, minutes, side="left")
    exact = (nxt < len(t)) & (t[np.minimum(nxt, len(t) - 1)] == minutes)
    prev = nxt - 1
    inside = (prev >= 0) & (nxt < len(t))
    gap = np.where(inside, t[np.minimum(nxt, len(t) - 1)] - t[np.maximum(prev, 0)] - 1, np.inf)
    ok = exact | (inside & (gap <= max_gap))
    filled = np.interp(minutes, t, v)
    out[ok] = filled[ok]
    # exact observations are copied, not recomputed
    out[exact] = v[nxt[exact]]
    return out, ok


def _carry_channel(t, v, minutes, day_of, cap):
    out = np.full(len(minutes), np.nan)
    if len(t) == 0:
        return out, np.zeros(len(minutes), dtype=bool)
    prev = np.searchsorted(t, minutes, side="right") - 1
    has = prev >= 0
    src = t[np.maximum(prev, 0)]
    ok = has & (minutes - src <= cap) & (day_of(src) == day_of(minutes))
    out[ok] = v[prev[ok]]
    return out, ok


def align_minute_grid(bundle: StreamBundle, tz: str = "UTC", max_interp_gap: int = 10,
                      carry_cap: int = 6) -> MinuteGrid:
    """Map all minute-cadence streams onto one uniform 1-minute index.

    HR and steps are linearly interpolated across gaps of at most
    ``max_interp_gap`` missing minutes. Respiration and stress are carried
    forward at most ``carry_cap`` minutes and never across local midnight.
    """
    firsts, lasts = [], []
    for name in GRID_CHANNELS:
        t, _ = bundle.stream(name)
        if len(t):
            firsts.append(t[0])
            lasts.append(t[-1])
    if len(bundle.bbi_t):
        firsts.append(bundle.bbi_t[0] // 60_000)
        lasts.append(bundle.bbi_t[-1] // 60_000)
    if not firsts:
        raise EmptyGridError(f"user {bundle.user_id}: no observations in any channel")
    start, stop = int(min(firsts)), int(max(lasts)) + 1
    minutes = np.arange(start, stop, dtype=np.int64)
    day, _, _ = local_fields(minutes, tz)

    def day_of(m):
        return day[m - start]

    values, valid = {}, {}
    for name in INTERPOLATED:
        t, v = bundle.stream(name)
        values[name], valid[name] = _interp_channel(t, v, minutes, max_interp_gap)
    for name in CARRIED:
        t, v = bundle.stream(name)
        values[name], valid[name] = _carry_channel(t, v, minutes, day_of, carry_cap)
    return MinuteGrid(bundle.user_id, start, tz, values, valid, day)


def write_grid(grid: MinuteGrid, path):
    path = Path(path)
    cols = {"minute": grid.minutes, "day": grid.day}
    for name in GRID_CHANNELS:
        cols[name] = grid.values[name]
        cols[f"{name}_valid"] = grid.valid[name].astype(np.int8)
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")
    meta = {"user_id": grid.user_id, "start": grid.start, "tz": grid.tz,
            "channels": list(GRID_CHANNELS), "n_minutes": len(grid)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_grid(path) -> MinuteGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    df = pd.read_csv(path, float_precision="round_trip")
    values = {n: df[n].to_numpy(dtype=float) for n in meta["channels"]}
    valid = {n: df[f"{n}_valid"].to_numpy().astype(bool) for n in meta["channels"]}
    return MinuteGrid(meta["user_id"], meta["start"], meta["tz"], values, valid,
                      df["day"].to_numpy(dtype=np.int64))
