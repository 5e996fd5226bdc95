"""SVG export of per-step covariance ellipses, sampled trajectories and the
ground truth, with a companion CSV of the plotted numbers."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .distribution import GaussianSeq

COLORS = {"plan": "#1f77b4", "denoised": "#d62728", "sample": "#7f7f7f", "truth": "#2ca02c", "past": "#000000"}
SIZE = 600
MARGIN = 30


def ellipse_axes(sigma, rho, scale: float = 1.0) -> tuple[float, float, float]:
    """(semi-major, semi-minor, angle in degrees) of the ``scale``-sigma contour."""
    sx, sy = float(sigma[0]), float(sigma[1])
    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    major = vecs[:, 1]
    angle = float(np.degrees(np.arctan2(major[1], major[0])))
    return scale * float(np.sqrt(vals[1])), scale * float(np.sqrt(vals[0])), angle


class _Frame:
    """Maps data coordinates to SVG pixels with equal aspect (y up)."""

    def __init__(self, points: np.ndarray):
        lo, hi = points.min(axis=0), points.max(axis=0)
        span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6))
        self.lo, self.center = lo, (lo + hi) / 2.0
        self.scale = (SIZE - 2 * MARGIN) / span

    def __call__(self, p) -> tuple[float, float]:
        x = SIZE / 2 + (p[0] - self.center[0]) * self.scale
        y = SIZE / 2 - (p[1] - self.center[1]) * self.scale
        return float(x), float(y)


def _polyline(frame: _Frame, pts: np.ndarray, color: str, width: float, opacity: float = 1.0, dash: str = "") -> str:
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in (frame(p) for p in pts))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}" '
            f'stroke-opacity="{opacity}"{extra}/>')


def export_plots(distributions: Sequence[tuple[str, GaussianSeq]], samples, truth, path,
                 past=None, title: str = "") -> tuple[Path, Path]:
    """Write ``path`` (.svg) and a sibling .csv.

    ``distributions`` is a list of (kind, GaussianSeq) with kind ``"plan"`` or
    ``"denoised"``; each step gets 1-sigma and 2-sigma ellipses in the kind's
    color. ``samples`` is (K, T, 2), ``truth`` (T, 2), ``past`` optional (P, 2).
    """
    path = Path(path)
    if not path.parent.exists() or not path.parent.is_dir():
        raise OSError(f"cannot write to {path}: directory does not exist")
    samples = np.asarray(samples, dtype=float).reshape(-1, *np.shape(truth))
    truth = np.asarray(truth, dtype=float)
    pts = [truth, samples.reshape(-1, 2)]
    for _, d in distributions:
        pts.append(d.mu - 2 * d.sigma)
        pts.append(d.mu + 2 * d.sigma)
    if past is not None:
        past = np.asarray(past, dtype=float)
        pts.append(past)
    frame = _Frame(np.concatenate(pts))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
             f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>']
    if title:
        parts.append(f'<text x="{MARGIN}" y="{MARGIN / 2 + 5}" font-size="12">{escape(title)}</text>')
    rows = []
    for label, (kind, d) in enumerate(distributions):
        color = COLORS.get(kind, "#9467bd")
        for t in range(len(d)):
            cx, cy = frame(d.mu[t])
            for scale, opacity in ((1.0, 0.35), (2.0, 0.15)):
                a, b, angle = ellipse_axes(d.sigma[t], d.rho[t], scale)
                # SVG y points down, so the rotation flips sign
                parts.append(f'<ellipse class="{kind}" cx="{cx:.2f}" cy="{cy:.2f}" rx="{a * frame.scale:.3f}" '
                             f'ry="{b * frame.scale:.3f}" transform="rotate({-angle:.3f} {cx:.2f} {cy:.2f})" '
                             f'fill="{color}" fill-opacity="{opacity}" stroke="{color}" stroke-width="0.5"/>')
            rows.append([f"{kind}{label}", kind, t + 1, *(repr(float(v)) for v in (
                d.mu[t, 0], d.mu[t, 1], d.sigma[t, 0], d.sigma[t, 1], d.rho[t]))])
    for s in samples:
        parts.append(_polyline(frame, s, COLORS["sample"], 1.0, 0.6))
    if past is not None:
        parts.append(_polyline(frame, past, COLORS["past"], 2.0))
    parts.append(_polyline(frame, truth, COLORS["truth"], 2.0, dash="4,2"))
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")

    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "kind", "t", "mux", "muy", "sigx", "sigy", "rho"])
        w.writerows(rows)
        for i, s in enumerate(samples):
            for t, p in enumerate(s):
                w.writerow([f"sample{i}", "sample", t + 1, repr(float(p[0])), repr(float(p[1])), "", "", ""])
        for t, p in enumerate(truth):
            w.writerow(["truth", "truth", t + 1, repr(float(p[0])), repr(float(p[1])), "", "", ""])
    return path, csv_path
