"""Epoch-minute helpers. All pipeline times are integer minutes since the UTC epoch."""

from __future__ import annotations

import numpy as np
import pandas as pd

MS_PER_MINUTE = 60_000


def parse_minutes(values) -> np.ndarray:
    """ISO-8601 strings (or integer epoch minutes) to int64 epoch minutes."""
    s = pd.Series(values)
    if pd.api.types.is_numeric_dtype(s):
        return s.to_numpy(dtype=np.int64)
    ts = pd.to_datetime(s, utc=True, format="ISO8601")
    return (ts.astype("int64") // 60_000_000_000).to_numpy(dtype=np.int64)


def format_minutes(minutes) -> list[str]:
    ts = pd.to_datetime(np.asarray(minutes, dtype=np.int64) * 60, unit="s", utc=True)
    return [t.strftime("%Y-%m-%dT%H:%MZ") for t in ts]


def local_fields(minutes, tz: str = "UTC"):
    """Return (local day number, minute of day, weekday with Monday=0)."""
    minutes = np.asarray(minutes, dtype=np.int64)
    if tz in ("UTC", "utc", "Z"):
        local = minutes
    else:
        idx = pd.to_datetime(minutes * 60, unit="s", utc=True).tz_convert(tz)
        local = idx.tz_localize(None).asi8 // 60_000_000_000
    day = np.floor_divide(local, 1440)
    minute_of_day = local - day * 1440
    # 1970-01-01 was a Thursday
    weekday = (day + 3) % 7
    return day, minute_of_day, weekday


def day_to_date(day: int):
    return (np.datetime64(0, "D") + np.timedelta64(int(day), "D")).astype(object)
