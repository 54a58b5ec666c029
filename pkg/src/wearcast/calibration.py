"""Train-only post-hoc calibration: onset shift, per-window isotonic maps, sign thresholds."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import EPSILON, WINDOWS, window_label

log = logging.getLogger(__name__)

ONSET_GRID = tuple(range(16))
TAU_GRID = tuple(round(0.1 * k, 1) for k in range(1, 101))


def pava(y, w=None):
    """Weighted least-squares non-decreasing fit (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    means, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            wt = weights[-1] + w2
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / wt
            weights[-1] = wt
            sizes[-1] += s2
    return np.repeat(means, sizes)


@dataclass
class IsotonicMap:
    """Monotone piecewise-linear map; ``x is None`` means identity."""

    x: np.ndarray | None = None
    y: np.ndarray | None = None
    n_pairs: int = 0

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.x is None:
            return v.copy()
        out = np.interp(v, self.x, self.y)
        # keep rounding inside the bracketing breakpoints so the map stays monotone
        hi = np.clip(np.searchsorted(self.x, v, side="left"), 0, len(self.x) - 1)
        lo = np.clip(hi - 1, 0, None)
        out = np.clip(out, self.y[lo], self.y[hi])
        return np.where(np.isfinite(v), out, np.nan)

    def to_dict(self):
        if self.x is None:
            return {"identity": True, "n_pairs": self.n_pairs}
        return {"x": self.x.tolist(), "y": self.y.tolist(), "n_pairs": self.n_pairs}

    @classmethod
    def from_dict(cls, d):
        if d.get("identity"):
            return cls(n_pairs=d.get("n_pairs", 0))
        return cls(np.array(d["x"]), np.array(d["y"]), d.get("n_pairs", 0))


def fit_isotonic(predicted, actual) -> IsotonicMap:
    """Isotonic map from predicted medians to actual percent change.

    Pairs with equal predictions are pooled first (weighted by count).
    Fewer than two usable pairs yield the identity map.
    """
    p = np.asarray(predicted, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    ok = np.isfinite(p) & np.isfinite(a)
    p, a = p[ok], a[ok]
    if len(p) < 2:
        log.warning("isotonic fit with %d pairs: using identity map", len(p))
        return IsotonicMap(n_pairs=len(p))
    order = np.argsort(p, kind="mergesort")
    p, a = p[order], a[order]
    xs, start, counts = np.unique(p, return_index=True, return_counts=True)
    sums = np.add.reduceat(a, start)
    fitted = pava(sums / counts, counts)
    return IsotonicMap(xs, fitted, len(p))


def shift_forecast(median, delta: int):
    """Forecast moved ``delta`` minutes later; offsets before ``delta`` become NaN."""
    median = np.asarray(median, dtype=float)
    out = np.full(median.shape, np.nan)
    H = median.shape[-1]
    if delta < H:
        out[..., delta:] = median[..., :H - delta]
    return out


def _close(a, b):
    return abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


def fit_onset_shift(forecast, actual, grid=ONSET_GRID) -> int:
    """Shift in minutes minimizing mean absolute error; ties go to the smaller shift."""
    if len(grid) == 0:
        raise ValueError("empty onset grid")
    actual = np.asarray(actual, dtype=float)
    best_d, best = None, np.inf
    for d in sorted(grid):
        err = np.abs(shift_forecast(forecast, d) - actual)
        err = err[np.isfinite(err)]
        if not len(err):
            continue
        mae = float(err.mean())
        if best_d is None or (mae < best and not _close(mae, best)):
            best_d, best = d, mae
    return int(sorted(grid)[0] if best_d is None else best_d)


def sign_calls(values, tau):
    values = np.asarray(values, dtype=float)
    out = np.zeros(values.shape, dtype=np.int8)
    out[values >= tau] = 1
    out[values <= -tau] = -1
    return out


def threshold_scores(values, s_a, tau):
    """(eligible accuracy, called-only accuracy or -1) of calls at ``tau`` on non-neutral truths."""
    s_p = sign_calls(values, tau)
    hit = int((s_p == s_a).sum())
    called = int((s_p != 0).sum())
    return hit / len(s_a), (hit / called if called else -1.0)


def fit_sign_thresholds(values, s_a, valid=None, grid=TAU_GRID, default: float = 1.0) -> float:
    """Threshold maximizing eligible accuracy over minutes with non-neutral truth.

    Ties are broken by higher called-only accuracy, then by the smaller
    threshold. Without eligible minutes ``default`` is returned.
    """
    values = np.asarray(values, dtype=float).ravel()
    s_a = np.asarray(s_a).ravel()
    keep = (s_a != 0) & np.isfinite(values)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool).ravel()
    values, s_a = values[keep], s_a[keep]
    if not len(values):
        log.warning("no non-neutral train minutes: threshold falls back to %s", default)
        return float(default)
    best_key, best_tau = None, None
    for tau in sorted(grid):
        elig, called = threshold_scores(values, s_a, tau)
        key = (elig, called)
        if best_key is None or key > best_key:
            best_key, best_tau = key, tau
    return float(best_tau)


@dataclass
class MetricCalibration:
    shift: int
    maps: dict  # window label -> IsotonicMap
    tau: float
    stats: dict = field(default_factory=dict)


@dataclass
class CalibrationBundle:
    metrics: dict  # metric -> MetricCalibration
    windows: tuple = WINDOWS
    fingerprint: str = ""

    def to_dict(self):
        return {
            "windows": [list(w) for w in self.windows],
            "fingerprint": self.fingerprint,
            "metrics": {m: {"shift": c.shift, "tau": c.tau, "stats": c.stats,
                            "maps": {k: v.to_dict() for k, v in c.maps.items()}}
                        for m, c in self.metrics.items()},
        }

    @classmethod
    def from_dict(cls, d):
        metrics = {m: MetricCalibration(c["shift"], {k: IsotonicMap.from_dict(v) for k, v in c["maps"].items()},
                                        c["tau"], c.get("stats", {}))
                   for m, c in d["metrics"].items()}
        return cls(metrics, tuple(tuple(w) for w in d["windows"]), d.get("fingerprint", ""))

    def save(self, path, extra: dict | None = None):
        Path(path).write_text(json.dumps({**self.to_dict(), **(extra or {})}, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def apply_maps(shifted, maps: dict, windows=WINDOWS):
    out = np.full(shifted.shape, np.nan)
    for w in windows:
        a, b = w
        iso = maps.get(window_label(w))
        if iso is None:
            log.warning("no calibration map for window %s: using identity", window_label(w))
            iso = IsotonicMap()
        out[..., a:b] = iso(shifted[..., a:b])
    return out


def fingerprint(examples) -> str:
    h = hashlib.sha256()
    for e in sorted(examples, key=lambda e: e.key):
        h.update(e.key.encode())
        h.update(np.ascontiguousarray(e.delta).tobytes())
    return h.hexdigest()[:16]


def fit_calibration(forecast, train_examples, windows=WINDOWS, onset_grid=ONSET_GRID,
                    tau_grid=TAU_GRID, epsilon=None) -> CalibrationBundle:
    """Fit shift, isotonic maps and threshold per target from train forecasts only.

    ``forecast`` is the model output on exactly ``train_examples`` (same order).
    """
    epsilon = epsilon or EPSILON
    metrics = {}
    for m in forecast.targets:
        row = train_examples[0].metrics.index(m) if train_examples else 0
        actual = np.stack([e.delta[row] for e in train_examples]) if train_examples else np.zeros((0, 0))
        s_a = np.stack([e.sign[row] for e in train_examples]) if train_examples else np.zeros((0, 0))
        med = forecast.median(m)
        shift = fit_onset_shift(med, actual, onset_grid)
        shifted = shift_forecast(med, shift)
        maps = {}
        for w in windows:
            a, b = w
            maps[window_label(w)] = fit_isotonic(shifted[:, a:b], actual[:, a:b])
        calibrated = apply_maps(shifted, maps, windows)
        valid = np.isfinite(actual)
        tau = fit_sign_thresholds(calibrated, s_a, valid, tau_grid, default=epsilon[m])
        err = np.abs(shifted - actual)
        stats = {"train_mae": float(np.nanmean(err)) if np.isfinite(err).any() else None,
                 "n_pairs": int(np.isfinite(err).sum()),
                 "n_nonneutral": int(((s_a != 0) & valid).sum())}
        metrics[m] = MetricCalibration(shift, maps, tau, stats)
    return CalibrationBundle(metrics, tuple(windows), fingerprint(train_examples))


@dataclass
class SignSeries:
    metric: str
    values: np.ndarray  # calibrated medians, NaN before the shift
    sign: np.ndarray  # int8
    valid: np.ndarray


def predict_sign(forecast, bundle: CalibrationBundle):
    """Shift, calibrate and threshold every target's median; returns metric -> SignSeries."""
    out = {}
    for m, cal in bundle.metrics.items():
        shifted = shift_forecast(forecast.median(m), cal.shift)
        values = apply_maps(shifted, cal.maps, bundle.windows)
        valid = np.isfinite(values)
        sign = np.where(valid, sign_calls(np.nan_to_num(values), cal.tau), 0).astype(np.int8)
        out[m] = SignSeries(m, values, sign, valid)
    return out
