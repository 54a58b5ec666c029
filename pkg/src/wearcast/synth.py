"""Synthetic cohort with known intervention effects.

Each user has a latent per-minute beat interval (baseline level, circadian
sinusoid, slow AR(1) drift) multiplied by the decaying effect bumps of past
interventions. Beats are drawn from that latent curve; the interval stamped
in minute ``k`` equals the latent value of minute ``k`` plus a respiratory
oscillation that is zero-mean within the minute plus optional jitter, so
noise-free cohorts reproduce the latent minute means exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .constants import BASELINE_MIN_VALID, BASELINE_MINUTES, CATEGORIES, EPSILON, HORIZON
from .ingest import STREAM_FILES, StreamBundle, TagRecord, write_tags
from .timeutil import MS_PER_MINUTE, day_to_date, format_minutes, local_fields


@dataclass(frozen=True)
class EffectTemplate:
    metric: str  # "bbi", "hr" or "rmssd"
    sign: int
    peak_pct: float
    onset_minutes: int = 0
    decay_minutes: float = 40.0

    def curve(self, n):
        """Percent effect for minute offsets ``0..n-1`` after the intervention end."""
        k = np.arange(n, dtype=float)
        ramp = np.minimum(1.0, (k + 1) / (self.onset_minutes + 1))
        decay = np.exp(-np.maximum(k - self.onset_minutes, 0) / self.decay_minutes)
        return self.sign * self.peak_pct * ramp * decay


def strong_templates(decay: float = 40.0) -> dict:
    """Per-category effects with peaks of at least three neutrality bands."""
    T = EffectTemplate
    return {
        "Physical Activity: Cardio": (T("bbi", -1, 8.0, 0, decay), T("rmssd", -1, 15.0, 0, decay)),
        "Physical Activity: Non-cardio": (T("bbi", -1, 5.0, 0, decay), T("rmssd", -1, 10.0, 0, decay)),
        "Rest & Recovery": (T("bbi", 1, 6.0, 0, decay), T("rmssd", 1, 15.0, 2, decay)),
        "Food/Drink/Nutrition": (T("bbi", -1, 4.0, 5, decay),),
        "Healthcare/Therapy": (T("bbi", 1, 4.0, 0, decay),),
        "Socializing/Social Interaction": (T("bbi", -1, 4.0, 0, decay),),
        "Spirituality/Mindful Activities": (T("bbi", 1, 5.0, 0, decay), T("rmssd", 1, 12.0, 0, decay)),
        "Academic & Educational": (T("bbi", -1, 4.0, 0, decay),),
        "Other": (T("bbi", 1, 4.0, 0, decay),),
    }


TAG_NAMES = {
    "Physical Activity: Cardio": ("run", "cycling", "swim"),
    "Physical Activity: Non-cardio": ("yoga", "stretching", "weights"),
    "Rest & Recovery": ("nap", "rest", "lie down"),
    "Food/Drink/Nutrition": ("lunch", "coffee", "snack"),
    "Healthcare/Therapy": ("therapy", "physio"),
    "Socializing/Social Interaction": ("friends", "call family"),
    "Spirituality/Mindful Activities": ("meditation", "breathing", "prayer"),
    "Academic & Educational": ("lecture", "study", "exam prep"),
    "Other": ("errands", "commute"),
}


@dataclass
class SynthSpec:
    n_users: int = 8
    days: int = 28
    start_date: str = "2024-03-04"
    tz: str = "UTC"
    bbi_mean: float = 900.0
    bbi_user_spread: float = 80.0
    circadian_amplitude: float = 25.0
    rsa_amplitude: float = 30.0
    rsa_period_beats: float = 4.5
    noise_scale: float = 1.0
    beat_noise_ms: float = 8.0
    drift_fraction: float = 0.004
    drift_phi: float = 0.97
    templates: dict = field(default_factory=strong_templates)
    user_effect_spread: float = 0.15
    interventions_per_day: int = 4
    min_spacing: int = 150
    duration_range: tuple = (15, 60)
    gap_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for cat, temps in self.templates.items():
            if cat not in CATEGORIES:
                raise ValueError(f"unknown category {cat!r}")
            for t in temps:
                if t.decay_minutes <= 0:
                    raise ValueError("decay constants must be positive")
                if t.metric not in EPSILON:
                    raise ValueError(f"unknown metric {t.metric!r}")


@dataclass
class Cohort:
    bundles: dict
    tags: list
    truth: pd.DataFrame
    latent: dict  # user -> latent per-minute arrays (start, bbi, hr, rmssd, rsa, off)


def _place_tags(rng, spec, user_id, start_minute, day_starts):
    tags = []
    lo_d, hi_d = spec.duration_range
    for d0 in day_starts:
        cur = d0 + 7 * 60 + int(rng.integers(0, 60))
        for _ in range(spec.interventions_per_day):
            dur = int(rng.integers(lo_d, hi_d + 1))
            t0, t1 = cur, cur + dur
            if t1 > d0 + 23 * 60:
                break
            cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            names = TAG_NAMES[cat]
            name = names[int(rng.integers(len(names)))]
            tags.append(TagRecord(user_id, name, cat, int(t0), int(t1), "unknown",
                                  f"{user_id}:{len(tags)}"))
            cur = t1 + spec.min_spacing + int(rng.integers(0, 60))
    return tags


def _user(spec: SynthSpec, u: int, start_minute: int):
    rng = np.random.default_rng([spec.seed, u])
    user_id = f"U{u + 1:02d}"
    n = spec.days * 1440
    minutes = start_minute + np.arange(n, dtype=np.int64)
    _, tod, _ = local_fields(minutes, spec.tz)
    noise = spec.noise_scale

    base = spec.bbi_mean + spec.bbi_user_spread * rng.uniform(-1, 1)
    circ = spec.circadian_amplitude * np.cos(2 * np.pi * (tod - 180) / 1440.0)
    sd = spec.drift_fraction * base * noise
    phi = spec.drift_phi
    drift = lfilter([np.sqrt(1 - phi ** 2) * sd], [1, -phi], rng.standard_normal(n))

    day_starts = start_minute + 1440 * np.arange(spec.days)
    tags = _place_tags(rng, spec, user_id, start_minute, day_starts)
    user_gain = 1.0 + spec.user_effect_spread * rng.uniform(-1, 1)

    bbi_factor = np.ones(n)
    rsa_factor = np.ones(n)
    effect_pct = {m: [] for m in ("bbi", "hr", "rmssd")}
    span = 8 * HORIZON
    for g in tags:
        i1 = g.t1 - start_minute
        e_bbi = np.zeros(span)
        e_rsa = np.zeros(span)
        for t in spec.templates.get(g.category, ()):
            c = user_gain * t.curve(span)
            if t.metric == "bbi":
                e_bbi = (1 + e_bbi / 100) * (1 + c / 100) * 100 - 100
            elif t.metric == "hr":
                e_bbi = (1 + e_bbi / 100) / (1 + c / 100) * 100 - 100
            else:
                e_rsa = (1 + e_rsa / 100) * (1 + c / 100) * 100 - 100
        hi = min(i1 + span, n)
        bbi_factor[i1:hi] *= 1 + e_bbi[:hi - i1] / 100
        rsa_factor[i1:hi] *= 1 + e_rsa[:hi - i1] / 100
        effect_pct["bbi"].append(e_bbi[:HORIZON])
        effect_pct["hr"].append((1 / (1 + e_bbi[:HORIZON] / 100) - 1) * 100)
        effect_pct["rmssd"].append(e_rsa[:HORIZON])

    bbi_lat = (base + circ + drift) * bbi_factor
    hr_lat = 60_000.0 / bbi_lat
    rsa_amp = spec.rsa_amplitude * (1 + 0.2 * rng.uniform(-1, 1)) * rsa_factor

    off = np.zeros(n, dtype=bool)
    for d in range(spec.days):
        if rng.random() < spec.gap_rate:
            s = int(rng.integers(0, 1440)) + d * 1440
            off[s:s + int(rng.integers(20, 91))] = True

    # beats: phase grows by 60000 / bbi per minute; beat j sits at phase j
    cum = np.concatenate([[0.0], np.cumsum(MS_PER_MINUTE / bbi_lat)])
    phase0 = rng.random()
    j = np.arange(int(np.floor(cum[-1] - phase0)))
    edges = (start_minute + np.arange(n + 1)) * float(MS_PER_MINUTE)
    bt = np.round(np.interp(j + phase0, cum, edges)).astype(np.int64)
    bm = np.clip(bt // MS_PER_MINUTE - start_minute, 0, n - 1)
    keep = (bt // MS_PER_MINUTE - start_minute < n) & ~off[bm]
    bt, bm, j = bt[keep], bm[keep], j[keep]
    osc = np.sin(2 * np.pi * j / spec.rsa_period_beats) * rsa_amp[bm]
    cnt = np.bincount(bm, minlength=n)
    osc_mean = np.bincount(bm, weights=osc, minlength=n) / np.maximum(cnt, 1)
    osc = osc - osc_mean[bm]
    clean = bbi_lat[bm] + osc
    bv = clean + noise * spec.beat_noise_ms * rng.standard_normal(len(bm))
    rmssd_lat = np.clip(_reference_rmssd(bt, clean, start_minute, n), 1.0, 300.0)

    on = ~off
    hr = hr_lat + noise * 0.5 * rng.standard_normal(n)
    steps = np.where((tod >= 7 * 60) & (tod < 23 * 60), rng.poisson(6, n), 0).astype(float)
    for g in tags:
        a, b = g.t0 - start_minute, g.t1 - start_minute
        if g.category == "Physical Activity: Cardio":
            steps[a:b] = rng.poisson(140, b - a)
        elif g.category == "Physical Activity: Non-cardio":
            steps[a:b] = rng.poisson(50, b - a)
    three = (np.arange(n) % 3 == 0) & on
    resp = 14.0 + 1.0 * np.cos(2 * np.pi * (tod - 180) / 1440.0) + noise * 0.4 * rng.standard_normal(n)
    stress = np.clip(25.0 + 1.5 * (hr_lat - 60_000.0 / base) + noise * 3.0 * rng.standard_normal(n), 0, 100)
    sleep = {day_to_date(d): float(rng.integers(55, 96))
             for d in np.unique(local_fields(minutes, spec.tz)[0])}

    bundle = StreamBundle(
        user_id=user_id,
        bbi_t=bt, bbi=bv,
        hr_t=minutes[on], hr=hr[on],
        steps_t=minutes[on], steps=steps[on],
        respiration_t=minutes[three], respiration=resp[three],
        stress_t=minutes[three], stress=np.round(stress[three]),
        sleep=sleep,
    )
    truth = _truth_rows(user_id, tags, start_minute, bbi_lat, hr_lat, rmssd_lat, off, effect_pct)
    latent = {"start": start_minute, "bbi": bbi_lat, "hr": hr_lat, "rmssd": rmssd_lat,
              "rsa": rsa_amp, "off": off}
    return bundle, tags, truth, latent


def _reference_rmssd(t, v, start, n, window_ms=15 * MS_PER_MINUTE, min_n=20,
                     adjacency_ms=5_000, max_gap_ms=30 * MS_PER_MINUTE):
    """Per-minute RMSSD of a beat series by cumulative sums over [T - 15 min, T).

    Kept separate from the feature code on purpose: it is the oracle the
    pipeline is checked against.
    """
    d2 = np.diff(v) ** 2
    dt = np.diff(t)
    tt = t[1:]
    adj = dt <= adjacency_ms
    cs = np.concatenate([[0.0], np.cumsum(np.where(adj, d2, 0.0))])
    cn = np.concatenate([[0], np.cumsum(adj)])
    gap_t = tt[dt > max_gap_ms]
    per_update = []
    for off in (30_000, 60_000):
        T = (start + np.arange(n)) * MS_PER_MINUTE + off
        lo = np.searchsorted(tt, T - window_ms, side="left")
        hi = np.searchsorted(tt, T, side="left")
        s = cs[hi] - cs[lo]
        k = cn[hi] - cn[lo]
        g = np.searchsorted(gap_t, T, side="left") - np.searchsorted(gap_t, T - window_ms, side="left")
        ok = (k >= min_n) & (g == 0)
        r = np.full(n, np.nan)
        r[ok] = np.sqrt(np.maximum(s[ok], 0.0) / k[ok])
        per_update.append(r)
    r = np.stack(per_update)
    k = np.isfinite(r).sum(0)
    return np.where(k > 0, np.nansum(r, axis=0) / np.maximum(k, 1), np.nan)


def _truth_rows(user_id, tags, start, bbi_lat, hr_lat, rmssd_lat, off, effect_pct):
    """True percent change of the latent signal against its recorded baseline minutes."""
    n = len(bbi_lat)
    rows = []
    latent = {"bbi": bbi_lat, "hr": hr_lat, "rmssd": rmssd_lat}
    for i, g in enumerate(tags):
        i0, i1 = g.t0 - start, g.t1 - start
        lo = max(i0 - BASELINE_MINUTES, 0)
        rec = ~off[lo:i0]
        idx = i1 + np.arange(HORIZON)
        inside = idx < n
        for m, series in latent.items():
            base_vals = series[lo:i0][rec]
            base_vals = base_vals[np.isfinite(base_vals)]
            true = np.full(HORIZON, np.nan)
            if len(base_vals) >= BASELINE_MIN_VALID:
                base = np.median(base_vals)
                true[inside] = 100.0 * (series[idx[inside]] - base) / max(abs(base), 1e-6)
            eps = EPSILON[m]
            sign = np.where(true >= eps, 1, np.where(true <= -eps, -1, 0))
            rows.append(pd.DataFrame({
                "user_id": user_id, "tag_id": g.tag_id, "offset": np.arange(HORIZON),
                "metric": m, "effect_pct": effect_pct[m][i], "true_pct": true,
                "true_sign": np.where(np.isfinite(true), sign, 0),
            }))
    return rows


def generate_cohort(spec: SynthSpec) -> Cohort:
    start_minute = int(np.datetime64(spec.start_date, "m").astype(np.int64))
    if spec.tz not in ("UTC", "utc"):
        # start at local midnight of start_date
        off = int(pd.Timestamp(spec.start_date, tz=spec.tz).utcoffset().total_seconds() // 60)
        start_minute -= off
    bundles, tags, truth, latent = {}, [], [], {}
    for u in range(spec.n_users):
        b, t, rows, lat = _user(spec, u, start_minute)
        bundles[b.user_id] = b
        tags.extend(t)
        truth.extend(rows)
        latent[b.user_id] = lat
    cols = ["user_id", "tag_id", "offset", "metric", "effect_pct", "true_pct", "true_sign"]
    table = pd.concat(truth, ignore_index=True) if truth else pd.DataFrame(columns=cols)
    return Cohort(bundles, tags, table, latent)


def write_cohort(cohort: Cohort, root):
    """Write the cohort in the ingest file layout plus ``ground_truth.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for user, b in cohort.bundles.items():
        d = root / user
        d.mkdir(exist_ok=True)
        for name, (fname, col, *_) in STREAM_FILES.items():
            t, v = b.stream(name)
            ts = t if name == "bbi" else format_minutes(t)
            pd.DataFrame({"timestamp": ts, col: v}).to_csv(d / fname, index=False, float_format="%.17g")
        dates = sorted(b.sleep)
        pd.DataFrame({"date": [x.isoformat() for x in dates],
                      "score": [b.sleep[x] for x in dates]}).to_csv(d / "sleep.csv", index=False)
        write_tags([g for g in cohort.tags if g.user_id == user], d / "tags.csv")
    cohort.truth.to_csv(root / "ground_truth.csv", index=False, float_format="%.17g")
