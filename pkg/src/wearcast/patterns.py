"""Per-intervention window sign vectors, row clustering and heatmap emission."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage
from scipy.spatial.distance import squareform

from .constants import WINDOWS, window_label

COLORS = {1: "#d62728", -1: "#1f77b4", 0: "#7f7f7f", None: "#d9d9d9"}  # red, blue, gray, light gray
CLUSTER_METADATA = {"linkage": "average",
                    "distance": "mean per-window disagreement (0 equal, 1 differ, 0.5 one missing)"}


@dataclass
class SignVector:
    key: str
    user_id: str
    category: str
    end: int
    metric: str
    signs: np.ndarray  # four floats in {-1, 0, 1} or NaN for missing

    def cells(self):
        return [None if np.isnan(v) else int(v) for v in self.signs]


def window_sign(s_p, valid=None) -> float:
    """Majority vote of the non-neutral calls; 0 on ties or full abstention, NaN if no valid minute."""
    s_p = np.asarray(s_p)
    valid = np.ones(s_p.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    s = s_p[valid]
    if not len(s):
        return np.nan
    up, down = int((s == 1).sum()), int((s == -1).sum())
    return float(np.sign(up - down))


def window_sign_mean(values, tau: float, valid=None) -> float:
    """Alternative reduction: threshold the window mean of calibrated medians."""
    values = np.asarray(values, dtype=float)
    valid = np.isfinite(values) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(values)
    if not valid.any():
        return np.nan
    m = values[valid].mean()
    return 1.0 if m >= tau else (-1.0 if m <= -tau else 0.0)


def sign_vector(s_p, valid, windows=WINDOWS):
    return np.array([window_sign(s_p[a:b], valid[a:b]) for a, b in windows])


def vector_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    mu, mv = np.isnan(u), np.isnan(v)
    d = np.where(mu & mv, 0.0, np.where(mu ^ mv, 0.5, (u != v).astype(float)))
    return float(d.mean())


def distance_matrix(vectors):
    X = np.asarray(vectors, dtype=float)
    n = len(X)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = vector_distance(X[i], X[j])
    return D


def _sort_key(v: SignVector):
    return (v.end, tuple(-9.0 if np.isnan(x) else x for x in v.signs), v.key)


def cluster_rows(vectors) -> list:
    """Leaf order of an average-linkage clustering; inputs are pre-sorted by end time."""
    vectors = sorted(vectors, key=_sort_key)
    if len(vectors) <= 2:
        return vectors
    D = distance_matrix([v.signs for v in vectors])
    Z = linkage(squareform(D, checks=False), method="average")
    return [vectors[i] for i in leaves_list(Z)]


def _cell_text(c):
    return "NA" if c is None else str(c)


def heatmap_csv(ordered, windows=WINDOWS):
    rows = [["key", "user_id", "category"] + [window_label(w) for w in windows]]
    for v in ordered:
        rows.append([v.key, v.user_id, v.category] + [_cell_text(c) for c in v.cells()])
    return rows


def heatmap_svg(ordered, windows=WINDOWS, title=""):
    cw, ch, left, top = 40, 14, 170, 30
    n = len(ordered)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + cw * len(windows) + 10}" '
             f'height="{top + ch * n + 10}" font-family="sans-serif" font-size="9" '
             f'data-linkage="{CLUSTER_METADATA["linkage"]}">',
             f'<text x="4" y="12">{_esc(title)}</text>']
    for j, w in enumerate(windows):
        parts.append(f'<text x="{left + j * cw + 4}" y="{top - 4}">{window_label(w)}</text>')
    for i, v in enumerate(ordered):
        y = top + i * ch
        parts.append(f'<text x="4" y="{y + 10}">{_esc(v.key)}</text>')
        for j, c in enumerate(v.cells()):
            parts.append(f'<rect x="{left + j * cw}" y="{y}" width="{cw}" height="{ch}" '
                         f'fill="{COLORS[c]}" stroke="white" data-row="{i}" data-col="{j}" '
                         f'data-key="{_esc(v.key)}" data-sign="{_cell_text(c)}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def parse_svg_cells(text):
    """Recover (row, col, sign text) triples from an emitted heatmap SVG."""
    pat = re.compile(r'data-row="(\d+)" data-col="(\d+)" data-key="[^"]*" data-sign="([^"]+)"')
    return [(int(r), int(c), s) for r, c, s in pat.findall(text)]


def safe_name(s):
    return re.sub(r"[^A-Za-z0-9]+", "_", s).strip("_")


def render_heatmap(vectors, level: str, key: str, metric: str, kind: str, directory,
                   windows=WINDOWS):
    """Cluster, then write ``heatmap_<level>_<key>_<metric>_<kind>.csv`` and ``.svg``."""
    ordered = cluster_rows(vectors)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = f"heatmap_{level}_{safe_name(key)}_{metric}_{kind}"
    with open(d / f"{stem}.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(heatmap_csv(ordered, windows))
    (d / f"{stem}.svg").write_text(heatmap_svg(ordered, windows, f"{level} {key} {metric} ({kind})"))
    return d / f"{stem}.csv", d / f"{stem}.svg"


def render_all_levels(vectors, directory, windows=WINDOWS):
    """Heatmaps at the all / per-user / per-category levels for each metric and kind."""
    groups = {}
    for kind, vs in vectors.items():
        for v in vs:
            for level, key in (("all", "all"), ("user", v.user_id), ("category", v.category)):
                groups.setdefault((level, key, v.metric, kind), []).append(v)
    written = []
    for (level, key, metric, kind) in sorted(groups):
        written.append(render_heatmap(groups[(level, key, metric, kind)], level, key, metric, kind,
                                      directory, windows))
    return written
