"""In-memory pipeline stages shared by the CLI, the scripts and the end-to-end tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationBundle, fit_calibration, predict_sign
from .constants import METRICS, WINDOWS
from .evaluation import SignRecord, aggregate_report
from .features import FEATURE_NAMES, build_feature_frame, compute_rmssd, minute_bbi
from .ingest import align_minute_grid
from .labeling import make_examples, metric_panel, split_examples, split_leak_safe
from .model import ModelConfig, predict, train
from .patterns import SignVector, sign_vector

log = logging.getLogger(__name__)


def prepare_user(bundle, tz="UTC"):
    """Align, compute RMSSD and featurize one user's streams; returns (frame, panel)."""
    grid = align_minute_grid(bundle, tz=tz)
    series = compute_rmssd(bundle.bbi_t, bundle.bbi, grid.start, len(grid))
    frame = build_feature_frame(grid, series, bundle.sleep, tz=tz)
    return frame, metric_panel(frame, minute_bbi(bundle.bbi_t, bundle.bbi, grid.start, len(grid)))


def build_dataset(bundles: dict, tags, tz="UTC", windows=WINDOWS):
    frames, panels = {}, {}
    for uid in sorted(bundles):
        frames[uid], panels[uid] = prepare_user(bundles[uid], tz)
    return make_examples(frames, panels, tags, windows)


@dataclass
class Splits:
    train: list
    validation: list
    test: list
    assignment: dict


def split(examples, test_fraction=0.2, val_fraction=0.15, min_examples=3) -> Splits:
    assignment = split_leak_safe(examples, test_fraction, val_fraction, min_examples)
    parts = split_examples(examples, assignment)
    return Splits(parts["train"], parts["validation"], parts["test"], assignment)


def calibrate(result, train_examples, windows=WINDOWS, **grids) -> CalibrationBundle:
    return fit_calibration(predict(result, train_examples), train_examples, windows, **grids)


def sign_records(result, bundle: CalibrationBundle, examples):
    """Per-intervention truth and calls for every forecast target."""
    if not examples:
        return []
    calls = predict_sign(predict(result, examples), bundle)
    out = []
    for i, e in enumerate(examples):
        for m, series in calls.items():
            row = e.metrics.index(m)
            valid = e.valid[row] & series.valid[i]
            out.append(SignRecord(e.key, e.user_id, e.tag.category, e.tag.t1, m,
                                  e.sign[row].copy(), series.sign[i].copy(), valid))
    return out


def evaluate(records, windows=WINDOWS, metrics=METRICS):
    return {g: aggregate_report(records, g, windows, metrics) for g in ("all", "user", "category")}


def sign_vectors(records, windows=WINDOWS):
    """Predicted and actual 4-window vectors, keyed by kind."""
    out = {"pred": [], "actual": []}
    for r in records:
        for kind, s in (("pred", r.s_p), ("actual", r.s_a)):
            out[kind].append(SignVector(r.key, r.user_id, r.category, r.end, r.metric,
                                        sign_vector(s, r.valid, windows)))
    return out


def run_in_memory(bundles, tags, model_cfg: ModelConfig | None = None, tz="UTC", windows=WINDOWS,
                  test_fraction=0.2, val_fraction=0.15):
    """Full chain without persistence; returns a dict of the intermediate objects."""
    model_cfg = model_cfg or ModelConfig()
    examples, rejections = build_dataset(bundles, tags, tz, windows)
    parts = split(examples, test_fraction, val_fraction)
    result = train(parts.train, parts.validation, model_cfg, FEATURE_NAMES)
    bundle = calibrate(result, parts.train, windows)
    records = sign_records(result, bundle, parts.test)
    return {"examples": examples, "rejections": rejections, "splits": parts, "result": result,
            "calibration": bundle, "records": records, "reports": evaluate(records, windows)}
