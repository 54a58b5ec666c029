"""Intervention-end anchored examples: baselines, percent-change targets, signs, splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import (BASELINE_MIN_VALID, BASELINE_MINUTES, CATEGORY_INDEX,
                        CONTEXT_MINUTES, EPSILON, HORIZON, HR_RANGE, MAX_WINDOW_GAP, METRICS,
                        RMSSD_RANGE, WINDOWS)
from .features import FeatureFrame
from .ingest import TagRecord

DENOM_FLOOR = 1e-6


@dataclass(frozen=True)
class WindowSet:
    windows: tuple = WINDOWS

    def __post_init__(self):
        edges = [a for a, _ in self.windows] + [self.windows[-1][1]]
        if edges[0] != 0 or any(b != c for (_, b), (c, _) in zip(self.windows, self.windows[1:])):
            raise ValueError("windows must partition [0, horizon) contiguously")

    @property
    def overall(self):
        return (0, self.windows[-1][1])

    @property
    def horizon(self):
        return self.windows[-1][1]

    def index_of(self, offset):
        for i, (a, b) in enumerate(self.windows):
            if a <= offset < b:
                return i
        raise ValueError(offset)


@dataclass
class AnchoredExample:
    user_id: str
    tag: TagRecord
    baselines: dict  # metric -> float
    context: np.ndarray  # (CONTEXT_MINUTES, F), NaN where invalid
    delta: np.ndarray  # (len(METRICS), HORIZON) percent change, NaN where invalid
    sign: np.ndarray  # (len(METRICS), HORIZON) int8, 0 where invalid
    metrics: tuple = METRICS

    @property
    def anchor(self):
        return self.tag.t1

    @property
    def category_index(self):
        return CATEGORY_INDEX[self.tag.category]

    @property
    def valid(self):
        return np.isfinite(self.delta)

    @property
    def key(self):
        return self.tag.tag_id


@dataclass
class Rejection:
    user_id: str
    tag_id: str
    reasons: list = field(default_factory=list)


def compute_baseline(values, t0_index: int, minutes: int = BASELINE_MINUTES,
                     min_valid: int = BASELINE_MIN_VALID):
    """Median of valid values in ``[t0 - minutes, t0)``; None if too few are usable.

    ``values`` is a 1-minute series with NaN for invalid minutes; indices
    before 0 or past the end count as invalid.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = t0_index - minutes, t0_index
    seg = values[max(lo, 0):max(min(hi, len(values)), 0)]
    seg = seg[np.isfinite(seg)]
    if len(seg) < min_valid:
        return None
    return float(np.median(seg))


def percent_change(x, base):
    return 100.0 * (np.asarray(x, dtype=float) - base) / max(abs(base), DENOM_FLOOR)


def actual_sign(delta, metric: str | float):
    eps = EPSILON[metric] if isinstance(metric, str) else float(metric)
    delta = np.asarray(delta, dtype=float)
    out = np.zeros(delta.shape, dtype=np.int8)
    out[delta >= eps] = 1
    out[delta <= -eps] = -1
    return out if out.ndim else int(out)


def screen_metric(values, metric):
    """Apply plausibility rules: HR outside range becomes invalid, RMSSD is clipped."""
    values = np.asarray(values, dtype=float).copy()
    if metric == "hr":
        bad = (values < HR_RANGE[0]) | (values > HR_RANGE[1])
        values[bad] = np.nan
    elif metric == "rmssd":
        fin = np.isfinite(values)
        values[fin] = np.clip(values[fin], *RMSSD_RANGE)
    return values


def _longest_run(mask):
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def window_problems(valid, observed, windows=WINDOWS, max_gap: int = MAX_WINDOW_GAP):
    """Coverage rules over one metric's 120 target minutes.

    ``observed`` flags offsets inside the data extent; windows lying wholly
    past the data end are not evaluated.
    """
    problems = []
    for a, b in windows:
        if not observed[a:b].any():
            continue
        v = valid[a:b]
        if 2 * int(v.sum()) < (b - a):
            problems.append(f"coverage_{a}_{b}")
        if _longest_run(~v) > max_gap:
            problems.append(f"gap_{a}_{b}")
    return problems


def inclusion_check(baselines: dict, delta: np.ndarray, observed: np.ndarray,
                    metrics=METRICS, windows=WINDOWS):
    """Return a list of machine-readable rejection reasons (empty means accept)."""
    reasons = []
    for i, m in enumerate(metrics):
        if baselines.get(m) is None:
            reasons.append(f"{m}:baseline")
            continue
        reasons.extend(f"{m}:{p}" for p in window_problems(np.isfinite(delta[i]), observed, windows))
    return reasons


def metric_panel(frame: FeatureFrame, bbi_minute) -> dict:
    """Per-minute RMSSD, HR and BBI series (NaN invalid) after plausibility screening."""
    names = list(frame.names)
    panel = {
        "rmssd": frame.values[:, names.index("rmssd")],
        "hr": frame.values[:, names.index("hr")],
        "bbi": np.asarray(bbi_minute, dtype=float),
    }
    return {m: screen_metric(v, m) for m, v in panel.items()}


def _slice(arr, lo, hi):
    """arr[lo:hi] with out-of-range positions filled with NaN."""
    n = len(arr)
    shape = (hi - lo,) + arr.shape[1:]
    out = np.full(shape, np.nan)
    a, b = max(lo, 0), min(hi, n)
    if a < b:
        out[a - lo:b - lo] = arr[a:b]
    return out


def build_example(frame: FeatureFrame, panel: dict, tag: TagRecord, windows=WINDOWS,
                  metrics=METRICS, epsilon=None):
    """Assemble one candidate; returns ``(example or None, reasons)``."""
    epsilon = epsilon or EPSILON
    horizon = windows[-1][1]
    i0 = tag.t0 - frame.start
    i1 = tag.t1 - frame.start
    baselines, deltas = {}, []
    for m in metrics:
        base = compute_baseline(panel[m], i0)
        baselines[m] = base
        x = _slice(panel[m], i1, i1 + horizon)
        deltas.append(percent_change(x, base) if base is not None else np.full(horizon, np.nan))
    delta = np.stack(deltas)
    observed = (np.arange(horizon) + i1) < len(frame)
    reasons = inclusion_check(baselines, delta, observed, metrics, windows)
    if reasons:
        return None, reasons
    sign = np.stack([np.where(np.isfinite(delta[i]), actual_sign(np.nan_to_num(delta[i]), epsilon[m]), 0)
                     for i, m in enumerate(metrics)]).astype(np.int8)
    context = _slice(frame.values, i1 - CONTEXT_MINUTES, i1)
    return AnchoredExample(tag.user_id, tag, baselines, context, delta, sign, tuple(metrics)), []


def make_examples(frames: dict, panels: dict, tags, windows=WINDOWS, metrics=METRICS, epsilon=None):
    """One candidate per tag; failing candidates are returned as rejections."""
    examples, rejections = [], []
    for tag in sorted(tags, key=lambda g: (g.user_id, g.t1, g.tag_id)):
        if tag.user_id not in frames:
            rejections.append(Rejection(tag.user_id, tag.tag_id, ["no_data"]))
            continue
        ex, reasons = build_example(frames[tag.user_id], panels[tag.user_id], tag, windows, metrics,
                                    epsilon)
        if ex is None:
            rejections.append(Rejection(tag.user_id, tag.tag_id, reasons))
        else:
            examples.append(ex)
    return examples, rejections


def split_leak_safe(examples, test_fraction: float = 0.20, val_fraction: float = 0.15,
                    min_examples: int = 3) -> dict:
    """Per-user chronological split; returns ``{example key: 'train'|'validation'|'test'}``.

    The latest ``ceil(test_fraction * n)`` examples by end time form the test
    block, the preceding ``ceil(val_fraction * n)`` the validation block.
    Examples tied in end time with an earlier block are moved into it so that
    test ends stay strictly after every train/validation end.
    """
    by_user = {}
    for ex in examples:
        by_user.setdefault(ex.user_id, []).append(ex)
    out = {}
    for user in sorted(by_user):
        exs = sorted(by_user[user], key=lambda e: (e.tag.t1, e.key))
        n = len(exs)
        if n < min_examples:
            out.update({e.key: "train" for e in exs})
            continue
        n_test = math.ceil(test_fraction * n)
        n_val = math.ceil(val_fraction * n)
        labels = ["train"] * max(n - n_test - n_val, 0) + ["validation"] * n_val + ["test"] * n_test
        labels = labels[-n:]
        for i in range(1, n):
            # never let a later block share an end time with an earlier one
            if labels[i] != labels[i - 1] and exs[i].tag.t1 == exs[i - 1].tag.t1:
                labels[i] = labels[i - 1]
        out.update({e.key: lab for e, lab in zip(exs, labels)})
    return out


def split_examples(examples, assignment: dict):
    parts = {"train": [], "validation": [], "test": []}
    for ex in examples:
        parts[assignment[ex.key]].append(ex)
    return parts


# persistence: JSON index + columnar .npy arrays

def write_examples(examples, rejections, directory, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = []
    for ex in examples:
        g = ex.tag
        index.append({"key": ex.key, "user_id": ex.user_id, "name": g.name, "category": g.category,
                      "t0": g.t0, "t1": g.t1, "expected_effect": g.expected_effect,
                      "baselines": ex.baselines})
    meta = {"metrics": list(METRICS), "context_minutes": CONTEXT_MINUTES, "horizon": HORIZON,
            "examples": index, **(extra or {})}
    (d / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    n = len(examples)
    ctx = np.stack([e.context for e in examples]) if n else np.zeros((0, CONTEXT_MINUTES, 0))
    np.save(d / "context.npy", ctx)
    np.save(d / "delta.npy", np.stack([e.delta for e in examples]) if n else np.zeros((0, 3, HORIZON)))
    np.save(d / "sign.npy", np.stack([e.sign for e in examples]) if n else np.zeros((0, 3, HORIZON), np.int8))
    with open(d / "rejections.jsonl", "w") as fh:
        for r in rejections:
            fh.write(json.dumps({"user_id": r.user_id, "tag_id": r.tag_id, "reasons": r.reasons},
                                sort_keys=True) + "\n")


def read_examples(directory):
    d = Path(directory)
    meta = json.loads((d / "index.json").read_text())
    ctx = np.load(d / "context.npy")
    delta = np.load(d / "delta.npy")
    sign = np.load(d / "sign.npy")
    out = []
    for i, rec in enumerate(meta["examples"]):
        tag = TagRecord(rec["user_id"], rec["name"], rec["category"], rec["t0"], rec["t1"],
                        rec["expected_effect"], rec["key"])
        out.append(AnchoredExample(rec["user_id"], tag, rec["baselines"], ctx[i], delta[i], sign[i],
                                   tuple(meta["metrics"])))
    return out, meta

