"""Evaluation: Frechet feature distance, depth error metrics, point profiles, report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")
PSD_TOL = 1e-6


# -- features ----------------------------------------------------------------------

class RandomConvEncoder(nn.Module):
    """Fixed random-weight conv stack with global average pooling (64-d output)."""

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            cin = w
        self.body = nn.Sequential(*layers).double()
        self.dim = cin

    @torch.no_grad()
    def forward(self, x):
        return self.body(x).mean(dim=(-2, -1))


_DEFAULT_ENCODERS: dict[int, RandomConvEncoder] = {}


def default_extractor(seed: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    if seed not in _DEFAULT_ENCODERS:
        _DEFAULT_ENCODERS[seed] = RandomConvEncoder(seed).eval()
    enc = _DEFAULT_ENCODERS[seed]

    def run(image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(image, dtype=np.float64) / 255.0).permute(2, 0, 1)[None]
        return enc(x)[0].numpy()

    return run


def extract_features(images, extractor: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """One feature row per H x W x 3 image; each image is processed on its own so rows
    never depend on batch composition or order."""
    if len(images) == 0:
        raise ValueError("no images to featurize")
    extractor = extractor or default_extractor()
    return np.stack([np.asarray(extractor(im), dtype=np.float64).ravel() for im in images])


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ValueError(f"covariance shape {self.sigma.shape} does not match mean length {d}")
        if self.n < 2:
            raise ValueError("need at least 2 samples")


def feature_stats(features) -> FeatureStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need an n x d feature matrix with n >= 2")
    return FeatureStats(f.mean(axis=0), np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1]),
                        f.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    if w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, mode: str = "paper_diag") -> float:
    """``full``: textbook Frechet distance between Gaussians.
    ``paper_diag``: sum over dimensions of squared mean and standard-deviation differences."""
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dimensions differ: {a.mu.shape[0]} vs {b.mu.shape[0]}")
    dmu = float(((a.mu - b.mu) ** 2).sum())
    if mode == "paper_diag":
        for s in (a.sigma, b.sigma):
            if np.diag(s).min() < -PSD_TOL:
                raise ValueError("negative variance")
        sa = np.sqrt(np.clip(np.diag(a.sigma), 0, None))
        sb = np.sqrt(np.clip(np.diag(b.sigma), 0, None))
        return dmu + float(((sa - sb) ** 2).sum())
    if mode == "full":
        ra = _psd_sqrt(a.sigma)
        _psd_sqrt(b.sigma)  # validity check
        # Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), the inner matrix is symmetric PSD
        cross = _psd_sqrt(ra @ b.sigma @ ra)
        tr = np.trace(a.sigma) + np.trace(b.sigma) - 2 * np.trace(cross)
        return dmu + max(float(tr), 0.0)
    raise ValueError(f"unknown mode {mode!r}")


# -- depth metrics -------------------------------------------------------------------

@dataclass
class DepthMetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    n_pixels: int

    def __post_init__(self):
        if not self.a1 <= self.a2 <= self.a3 <= 1:
            raise AssertionError("threshold accuracies must be ordered a1 <= a2 <= a3 <= 1")

    def row(self) -> list[float]:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def depth_metrics(pred, gt, valid=None) -> DepthMetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    mask = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    if not mask.any():
        raise ValueError("no valid pixels")
    p, g = pred[mask], gt[mask]
    if (g <= 0).any():
        raise ValueError("ground truth must be positive on valid pixels")
    if (p <= 0).any():
        raise ValueError("predictions must be positive on valid pixels")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25**2)),
        a3=float(np.mean(ratio < 1.25**3)),
        n_pixels=int(mask.sum()),
    )


def mean_report(reports: list[DepthMetricsReport]) -> DepthMetricsReport:
    """Per-image metrics averaged over images."""
    if not reports:
        raise ValueError("no reports to average")
    vals = {c: float(np.mean([getattr(r, c) for r in reports])) for c in METRIC_COLUMNS}
    return DepthMetricsReport(**vals, n_pixels=sum(r.n_pixels for r in reports))


# -- point profiles ---------------------------------------------------------------------

def bilinear_sample(field: np.ndarray, x: float, y: float) -> float:
    h, w = field.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise ValueError(f"point ({x}, {y}) outside the {w}x{h} image")
    x0, y0 = min(int(x), w - 2) if w > 1 else 0, min(int(y), h - 2) if h > 1 else 0
    fx, fy = x - x0, y - y0
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    return float(top * (1 - fy) + bot * fy)


def linear_r2(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    t = np.arange(len(v), dtype=np.float64)
    ss_tot = float(((v - v.mean()) ** 2).sum())
    if ss_tot == 0:
        return 0.0
    slope, icpt = np.polyfit(t, v, 1)
    ss_res = float(((v - (slope * t + icpt)) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def point_profile(depth, points, direction: str = "increasing") -> dict:
    """Sample ``depth`` at ordered (x, y) points; report R^2 of a line over the index
    and whether the values are (non-strictly) monotone in ``direction``."""
    if direction not in ("increasing", "decreasing"):
        raise ValueError("direction must be 'increasing' or 'decreasing'")
    if len(points) < 3:
        raise ValueError("need at least 3 points")
    depth = np.asarray(depth, dtype=np.float64)
    values = [bilinear_sample(depth, float(x), float(y)) for x, y in points]
    steps = np.diff(values)
    mono = bool((steps >= 0).all() if direction == "increasing" else (steps <= 0).all())
    return {"values": values, "linear_fit_r2": linear_r2(values), "monotonic": mono}


def read_points(path: str | Path) -> list[tuple[float, float]]:
    pts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            x, y = line.split(",")
            pts.append((float(x), float(y)))
    return pts


# -- reports ------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.6g}"


def report_rows(reports, names=None) -> list[list[str]]:
    if isinstance(reports, DepthMetricsReport):
        reports = [reports]
    if not reports:
        raise ValueError("no reports")
    names = names or [str(i) for i in range(len(reports))]
    return [[n] + [_fmt(v) for v in r.row()] for n, r in zip(names, reports)]


def format_table(reports, names=None) -> str:
    rows = [["name", *METRIC_COLUMNS]] + report_rows(reports, names)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def format_csv(reports, names=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", *METRIC_COLUMNS])
    w.writerows(report_rows(reports, names))
    return buf.getvalue()


def read_csv(path_or_text) -> dict[str, dict[str, float]]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames[1:]) != METRIC_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    return {r["name"]: {c: float(r[c]) for c in METRIC_COLUMNS} for r in reader}


def report(reports, out_dir: str | Path | None = None, names=None, stem: str = "metrics") -> str:
    """Text table (returned, and written with a CSV twin when ``out_dir`` is given)."""
    table = format_table(reports, names)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.txt").write_text(table)
        (out_dir / f"{stem}.csv").write_text(format_csv(reports, names))
    return table

