"""Per-class pixel statistics and the Frechet segmentation distance.

Statistics are means and covariances of per-image, per-class pixel counts
(raw counts, not fractions). The distance between two statistics records is

    ||mu_g - mu_t||^2 + Tr(Sigma_g + Sigma_t - 2 (Sigma_g Sigma_t)^{1/2})

computed in the symmetrized form Tr((S_t Sigma_g S_t)^{1/2}) with
S_t = Sigma_t^{1/2}, which is equal for PSD inputs and keeps the matrix
square root argument symmetric. Everything in this module runs in float64;
trace differences cancel catastrophically in single precision.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SegStatsRecord:
    """Mean vector, covariance, and sample count of per-class pixel counts."""

    class_ids: list
    mu: np.ndarray  # [C], pixels per image
    sigma: np.ndarray  # [C,C], unbiased (N-1) covariance
    count: int


class StatsAccumulator:
    """Streaming (count, sum, outer-product sum) accumulator.

    Partial accumulators merge associatively, so shards computed in parallel
    combine to the same record as a single pass.
    """

    def __init__(self, class_ids):
        self.class_ids = list(class_ids)
        c = len(self.class_ids)
        self.n = 0
        self.s = np.zeros(c, dtype=np.float64)
        self.ss = np.zeros((c, c), dtype=np.float64)
        self._resolution = None
        self._lut = None

    def add(self, segmap: np.ndarray) -> None:
        segmap = np.asarray(segmap)
        if self._resolution is None:
            self._resolution = segmap.shape
        elif segmap.shape != self._resolution:
            raise ValueError(
                f"inconsistent segmap resolution {segmap.shape}, expected {self._resolution}"
            )
        counts = self._counts(segmap)
        self.n += 1
        self.s += counts
        self.ss += np.outer(counts, counts)

    def _counts(self, segmap: np.ndarray) -> np.ndarray:
        if self._lut is None:
            self._lut = {cid: i for i, cid in enumerate(self.class_ids)}
        flat = np.bincount(segmap.reshape(-1), minlength=max(self.class_ids) + 1)
        return np.array([flat[cid] for cid in self.class_ids], dtype=np.float64)

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if self.class_ids != other.class_ids:
            raise ValueError("cannot merge accumulators over different class inventories")
        out = StatsAccumulator(self.class_ids)
        out.n = self.n + other.n
        out.s = self.s + other.s
        out.ss = self.ss + other.ss
        out._resolution = self._resolution or other._resolution
        return out

    def finalize(self) -> SegStatsRecord:
        if self.n < 2:
            raise ValueError(f"need at least 2 samples for a covariance, got {self.n}")
        mu = self.s / self.n
        sigma = (self.ss - self.n * np.outer(mu, mu)) / (self.n - 1)
        sigma = 0.5 * (sigma + sigma.T)
        return SegStatsRecord(list(self.class_ids), mu, sigma, self.n)


def accumulate(segmaps, class_ids) -> SegStatsRecord:
    """Collect mean and covariance statistics over a stream of segmaps."""
    acc = StatsAccumulator(class_ids)
    for seg in segmaps:
        acc.add(seg)
    if acc.n == 0:
        raise ValueError("accumulate: empty segmap stream")
    return acc.finalize()


# ---------------------------------------------------------------------------
# matrix square root and the distance


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Requires symmetry to 1e-9 relative and eigenvalues above -1e-8 * trace;
    small negative eigenvalues (sampling noise) are clamped to zero.
    """
    m = np.asarray(m, dtype=np.float64)
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > 1e-9 * scale:
        raise ValueError("matrix_sqrt_psd: input is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    floor = -1e-8 * max(np.trace(m), np.finfo(np.float64).tiny)
    if vals.min() < floor:
        raise ValueError(
            f"matrix_sqrt_psd: input is indefinite (min eigenvalue {vals.min():.3e})"
        )
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return 0.5 * (root + root.T)


def fsd(stats_g: SegStatsRecord, stats_t: SegStatsRecord) -> float:
    """Frechet distance between the Gaussians fitted to two statistics records."""
    if stats_g.class_ids != stats_t.class_ids:
        raise ValueError("fsd: statistics cover different class inventories")
    dmu = stats_g.mu - stats_t.mu
    st = matrix_sqrt_psd(stats_t.sigma)
    inner = st @ stats_g.sigma @ st
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    value = float(dmu @ dmu + np.trace(stats_g.sigma) + np.trace(stats_t.sigma) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# histogram report


@dataclass
class HistogramEntry:
    class_id: int
    true_mean: float
    gen_mean: float
    clipped: bool


@dataclass
class HistogramReport:
    """Classes by descending true-distribution frequency, ties by class id."""

    entries: list
    clip_ceiling: float
    units: str = "pixels per image"


def histogram_report(stats_g: SegStatsRecord, stats_t: SegStatsRecord,
                     top_k: int, clip_ceiling: float) -> HistogramReport:
    if stats_g.class_ids != stats_t.class_ids:
        raise ValueError("histogram_report: statistics cover different class inventories")
    if top_k > len(stats_t.class_ids):
        warnings.warn(
            f"top_k={top_k} exceeds the {len(stats_t.class_ids)}-class inventory; truncating"
        )
        top_k = len(stats_t.class_ids)
    order = sorted(
        range(len(stats_t.class_ids)),
        key=lambda i: (-stats_t.mu[i], stats_t.class_ids[i]),
    )[:top_k]
    entries = [
        HistogramEntry(
            class_id=stats_t.class_ids[i],
            true_mean=float(stats_t.mu[i]),
            gen_mean=float(stats_g.mu[i]),
            clipped=bool(max(stats_t.mu[i], stats_g.mu[i]) > clip_ceiling),
        )
        for i in order
    ]
    return HistogramReport(entries=entries, clip_ceiling=clip_ceiling)


def report_to_csv(report: HistogramReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "true_mean", "gen_mean", "clipped"])
        for e in report.entries:
            writer.writerow([e.class_id, f"{e.true_mean:.6f}", f"{e.gen_mean:.6f}", int(e.clipped)])


def report_to_svg(report: HistogramReport, path, class_names=None,
                  title="per-class mean pixel count: true vs generated") -> None:
    """Paired-bar chart as a standalone SVG; clipped bars print their value."""
    names = class_names or {}
    width, height = 640, 320
    margin_l, margin_b, margin_t = 60, 58, 34
    plot_w, plot_h = width - margin_l - 20, height - margin_b - margin_t
    ceiling = report.clip_ceiling
    n = max(len(report.entries), 1)
    group_w = plot_w / n
    bar_w = group_w * 0.34

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{margin_l}" y="20" font-family="sans-serif" font-size="13">{title}</text>',
        f'<text x="12" y="{margin_t + plot_h / 2:.1f}" font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 12 {margin_t + plot_h / 2:.1f})">{report.units}</text>',
    ]
    # axis and ticks
    x0, y0 = margin_l, margin_t + plot_h
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{margin_t}" stroke="black"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = y0 - frac * plot_h
        parts.append(
            f'<text x="{x0 - 6}" y="{yv + 4:.1f}" font-family="sans-serif" font-size="10" '
            f'text-anchor="end">{frac * ceiling:.0f}</text>'
        )
        if frac > 0:
            parts.append(
                f'<line x1="{x0}" y1="{yv:.1f}" x2="{x0 + plot_w}" y2="{yv:.1f}" '
                f'stroke="#dddddd" stroke-width="0.5"/>'
            )

    def bar(x, value, color):
        h = min(value, ceiling) / ceiling * plot_h
        pieces = [
            f'<rect x="{x:.2f}" y="{y0 - h:.2f}" width="{bar_w:.2f}" height="{h:.2f}" fill="{color}"/>'
        ]
        if value > ceiling:
            pieces.append(
                f'<text x="{x + bar_w / 2:.2f}" y="{y0 - plot_h - 4:.1f}" font-family="sans-serif" '
                f'font-size="9" text-anchor="middle">{value:.0f}</text>'
            )
        return pieces

    for i, e in enumerate(report.entries):
        gx = x0 + i * group_w + group_w * 0.12
        parts += bar(gx, e.true_mean, "#4878a8")
        parts += bar(gx + bar_w + group_w * 0.06, e.gen_mean, "#d0803c")
        label = names.get(e.class_id, str(e.class_id))
        lx = x0 + i * group_w + group_w / 2
        parts.append(
            f'<text x="{lx:.1f}" y="{y0 + 12}" font-family="sans-serif" font-size="9" '
            f'text-anchor="end" transform="rotate(-35 {lx:.1f} {y0 + 12})">{label}</text>'
        )
    # legend
    ly = height - 12
    parts.append(f'<rect x="{margin_l}" y="{ly - 9}" width="10" height="10" fill="#4878a8"/>')
    parts.append(f'<text x="{margin_l + 14}" y="{ly}" font-family="sans-serif" font-size="10">true</text>')
    parts.append(f'<rect x="{margin_l + 60}" y="{ly - 9}" width="10" height="10" fill="#d0803c"/>')
    parts.append(f'<text x="{margin_l + 74}" y="{ly}" font-family="sans-serif" font-size="10">generated</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# sensitivity (noise floor)


def sensitivity_test(segmaps, n_per_split: int, seed: int):
    """Distance between two disjoint random subsamples of the same data.

    Returns (fsd_split, info). The value bounds the measurement noise of the
    statistics at this sample size; model-vs-truth distances below it are
    indistinguishable from sampling error.
    """
    maps = [m if isinstance(m, np.ndarray) else m[1] for m in segmaps]
    if len(maps) < 2 * n_per_split:
        raise ValueError(
            f"sensitivity_test: need {2 * n_per_split} segmaps, got {len(maps)}"
        )
    ids = sorted(int(v) for v in np.unique(np.concatenate([m.reshape(-1) for m in maps])))
    perm = np.random.default_rng(seed).permutation(len(maps))
    a = accumulate((maps[i] for i in perm[:n_per_split]), ids)
    b = accumulate((maps[i] for i in perm[n_per_split : 2 * n_per_split]), ids)
    value = fsd(a, b)
    info = {
        "n_per_split": n_per_split,
        "seed": seed,
        "class_ids": ids,
        "fsd_split": value,
    }
    return value, info


# ---------------------------------------------------------------------------
# serialization


def record_to_json(record: SegStatsRecord, path=None) -> str:
    payload = {
        "class_ids": [int(c) for c in record.class_ids],
        "mu": [float(v) for v in record.mu],
        "sigma": [float(v) for v in record.sigma.reshape(-1)],
        "count": int(record.count),
        "units": "pixels per image",
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def record_from_json(source) -> SegStatsRecord:
    if isinstance(source, (str, Path)) and Path(source).exists():
        payload = json.loads(Path(source).read_text())
    else:
        payload = json.loads(source)
    c = len(payload["class_ids"])
    return SegStatsRecord(
        class_ids=list(payload["class_ids"]),
        mu=np.array(payload["mu"], dtype=np.float64),
        sigma=np.array(payload["sigma"], dtype=np.float64).reshape(c, c),
        count=payload["count"],
    )
