"""Windowed, decision-aware sign metrics and report emission."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .constants import METRICS, WINDOWS, window_label

log = logging.getLogger(__name__)


def _prep(s_a, s_p=None, valid=None, window=None):
    s_a = np.asarray(s_a)
    valid = np.ones(s_a.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if s_p is not None:
        s_p = np.asarray(s_p)
    if window is not None:
        a, b = window
        s_a, valid = s_a[..., a:b], valid[..., a:b]
        s_p = None if s_p is None else s_p[..., a:b]
    return s_a, s_p, valid


def eligible_accuracy(s_a, s_p, valid=None, window=None):
    """Share of valid minutes with non-neutral truth where the call matches (abstain = wrong).

    Returns None when no minute is eligible.
    """
    s_a, s_p, valid = _prep(s_a, s_p, valid, window)
    elig = valid & (s_a != 0)
    n = int(elig.sum())
    return int((elig & (s_p == s_a)).sum()) / n if n else None


def called_only_accuracy(s_a, s_p, valid=None, window=None):
    s_a, s_p, valid = _prep(s_a, s_p, valid, window)
    called = valid & (s_a != 0) & (s_p != 0)
    n = int(called.sum())
    return int((called & (s_p == s_a)).sum()) / n if n else None


def baseline_accuracy(s_a, direction: str, valid=None, window=None):
    """Eligible accuracy of the constant always-up or always-down predictor."""
    const = {"up": 1, "down": -1}[direction]
    s_a, _, valid = _prep(s_a, None, valid, window)
    return eligible_accuracy(s_a, np.full(s_a.shape, const), valid)


@dataclass
class Confusion:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fn + self.fp + self.tn

    def percentages(self):
        """Cells as percent of called minutes; None when nothing was called."""
        t = self.total
        if not t:
            return None
        return {k: 100.0 * getattr(self, k) / t for k in ("tp", "fn", "fp", "tn")}


def confusion_matrix(s_a, s_p, valid=None, window=None) -> Confusion:
    """Rows actual (+/-), columns predicted (+/-), over called minutes only."""
    s_a, s_p, valid = _prep(s_a, s_p, valid, window)
    called = valid & (s_a != 0) & (s_p != 0)
    a, p = s_a[called], s_p[called]
    return Confusion(tp=int(((a == 1) & (p == 1)).sum()), fn=int(((a == 1) & (p == -1)).sum()),
                     fp=int(((a == -1) & (p == 1)).sum()), tn=int(((a == -1) & (p == -1)).sum()))


@dataclass
class WindowReport:
    grouping: str
    group: str
    metric: str
    window: str
    n_minutes: int
    n_eligible: int
    n_called: int
    eligible_accuracy: float | None
    called_only_accuracy: float | None
    call_rate: float | None
    always_up: float | None
    always_down: float | None
    tp: int
    fn: int
    fp: int
    tn: int
    tp_pct: float | None
    fn_pct: float | None
    fp_pct: float | None
    tn_pct: float | None


def window_report(s_a, s_p, valid, window, grouping="all", group="all", metric="") -> WindowReport:
    sa, sp, v = _prep(s_a, s_p, valid, window)
    n_elig = int((v & (sa != 0)).sum())
    n_called = int((v & (sa != 0) & (sp != 0)).sum())
    cm = confusion_matrix(sa, sp, v)
    pct = cm.percentages() or dict.fromkeys(("tp", "fn", "fp", "tn"))
    return WindowReport(
        grouping, group, metric, window_label(window), int(v.sum()), n_elig, n_called,
        eligible_accuracy(sa, sp, v), called_only_accuracy(sa, sp, v),
        n_called / n_elig if n_elig else None,
        baseline_accuracy(sa, "up", v), baseline_accuracy(sa, "down", v),
        cm.tp, cm.fn, cm.fp, cm.tn, pct["tp"], pct["fn"], pct["fp"], pct["tn"],
    )


@dataclass
class SignRecord:
    """One intervention's truth and calls for one metric over the horizon."""

    key: str
    user_id: str
    category: str
    end: int
    metric: str
    s_a: np.ndarray
    s_p: np.ndarray
    valid: np.ndarray


def group_key(rec: SignRecord, grouping: str):
    return {"all": "all", "user": rec.user_id, "category": rec.category}[grouping]


def aggregate_report(records, grouping: str = "all", windows=WINDOWS, metrics=METRICS):
    """Pool minutes within each group and emit one report per (group, metric, window).

    The overall window is appended after the individual windows.
    """
    groups = {}
    for r in records:
        groups.setdefault(group_key(r, grouping), {}).setdefault(r.metric, []).append(r)
    reports = []
    overall = (windows[0][0], windows[-1][1])
    for g in sorted(groups):
        for m in metrics:
            recs = groups[g].get(m)
            if not recs:
                log.info("group %s=%s has no %s records: omitted", grouping, g, m)
                continue
            s_a = np.stack([r.s_a for r in recs])
            s_p = np.stack([r.s_p for r in recs])
            v = np.stack([r.valid for r in recs])
            for w in list(windows) + [overall]:
                reports.append(window_report(s_a, s_p, v, w, grouping, g, m))
    return reports


# emission

def round_half_away(x, places: int = 1):
    if x is None:
        return None
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


PCT_FIELDS = ("eligible_accuracy", "called_only_accuracy", "call_rate", "always_up", "always_down")


def write_reports_json(reports, path, extra: dict | None = None):
    payload = {"pooling": "minutes pooled within group", **(extra or {}),
               "reports": [asdict(r) for r in reports]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def write_reports_csv(reports, path):
    """Rounded view: accuracies and rates in percent with one decimal; blanks for undefined."""
    fields = list(WindowReport.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in reports:
            row = []
            for f in fields:
                v = getattr(r, f)
                if f in PCT_FIELDS:
                    v = None if v is None else round_half_away(100 * v)
                elif f.endswith("_pct"):
                    v = round_half_away(v)
                row.append("" if v is None else v)
            w.writerow(row)


BAR_COLUMNS = ("grouping", "group", "metric", "window_order", "window", "called_only_pct",
               "eligible_pct", "call_rate_pct", "n_called", "n_eligible")


def bar_rows(reports, windows=WINDOWS):
    """Bar-chart rows: the individual windows, a divider row, then the overall window."""
    labels = [window_label(w) for w in windows]
    overall = window_label((windows[0][0], windows[-1][1]))
    keyed = {}
    for r in reports:
        keyed.setdefault((r.grouping, r.group, r.metric), {})[r.window] = r
    rows = []
    for (grouping, group, metric), by_w in keyed.items():
        order = labels + ["divider", overall]
        for i, lab in enumerate(order):
            r = by_w.get(lab)
            if lab == "divider" or r is None:
                rows.append([grouping, group, metric, i, lab, "", "", "", "", ""])
                continue
            pct = [None if x is None else round_half_away(100 * x)
                   for x in (r.called_only_accuracy, r.eligible_accuracy, r.call_rate)]
            rows.append([grouping, group, metric, i, lab] + ["" if x is None else x for x in pct]
                        + [r.n_called, r.n_eligible])
    return rows


def write_bar_csv(reports, path, windows=WINDOWS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BAR_COLUMNS)
        w.writerows(bar_rows(reports, windows))


def render_bar_svg(reports, metric_order=METRICS, windows=WINDOWS, title=""):
    """Grouped bars of called-only accuracy per metric panel; undefined bars are omitted."""
    labels = [window_label(w) for w in windows] + [window_label((windows[0][0], windows[-1][1]))]
    by = {(r.metric, r.window): r for r in reports}
    pw, ph, bw, gap = 220, 160, 28, 6
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{pw * len(metric_order) + 20}" '
             f'height="{ph + 60}" font-family="sans-serif" font-size="10">',
             f'<text x="10" y="14">{title}</text>']
    for j, m in enumerate(metric_order):
        x0 = 10 + j * pw
        parts.append(f'<text x="{x0}" y="32">{m}</text>')
        for i, lab in enumerate(labels):
            x = x0 + 10 + i * (bw + gap) + (12 if i == len(labels) - 1 else 0)
            r = by.get((m, lab))
            acc = None if r is None else r.called_only_accuracy
            if i == len(labels) - 1:
                dx = x - 9
                parts.append(f'<line x1="{dx}" y1="40" x2="{dx}" y2="{ph + 40}" stroke="red" '
                             f'stroke-dasharray="4,3"/>')
            if acc is not None:
                h = acc * ph
                parts.append(f'<rect x="{x}" y="{ph + 40 - h:.2f}" width="{bw}" height="{h:.2f}" '
                             f'fill="#4c72b0" data-window="{lab}" data-value="{acc!r}"/>')
                parts.append(f'<text x="{x}" y="{ph + 36 - h:.2f}">{round_half_away(100 * acc):g}</text>')
            parts.append(f'<text x="{x}" y="{ph + 54}">{lab}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def render_confusion_svg(reports, metric_order=METRICS):
    """Grid of 2x2 called-normalized matrices: one row per metric, one column per window."""
    cell = 34
    wins = sorted({r.window for r in reports}, key=lambda s: tuple(int(x) for x in s.split("-")))
    by = {(r.metric, r.window): r for r in reports}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{len(wins) * (2 * cell + 20) + 60}" '
             f'height="{len(metric_order) * (2 * cell + 30) + 20}" font-family="sans-serif" font-size="9">']
    for i, m in enumerate(metric_order):
        y0 = 20 + i * (2 * cell + 30)
        parts.append(f'<text x="2" y="{y0 + cell}">{m}</text>')
        for j, wl in enumerate(wins):
            x0 = 50 + j * (2 * cell + 20)
            r = by.get((m, wl))
            parts.append(f'<text x="{x0}" y="{y0 - 4}">{wl}</text>')
            cells = (("tp", 0, 0), ("fn", 1, 0), ("fp", 0, 1), ("tn", 1, 1))
            for name, cx, cy in cells:
                v = None if r is None else getattr(r, f"{name}_pct")
                shade = 255 - int(2.2 * v) if v is not None else 240
                parts.append(f'<rect x="{x0 + cx * cell}" y="{y0 + cy * cell}" width="{cell}" '
                             f'height="{cell}" fill="rgb({shade},{shade},255)" stroke="#999" '
                             f'data-cell="{name}"/>')
                if v is not None:
                    parts.append(f'<text x="{x0 + cx * cell + 4}" y="{y0 + cy * cell + 20}">'
                                 f'{round_half_away(v):g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)

