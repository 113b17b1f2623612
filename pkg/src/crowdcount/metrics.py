"""Counting error metrics: MAE, root-mean-square error (reported as MSE), NAE."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    nae: float
    n_images: int
    n_skipped_nae: int

    def line(self) -> str:
        return f"MAE={self.mae:.5f} MSE={self.mse:.5f} NAE={self.nae:.5f}"

    def table(self) -> str:
        rows = [("images", str(self.n_images)), ("MAE", f"{self.mae:.5f}"),
                ("MSE", f"{self.mse:.5f}"), ("NAE", f"{self.nae:.5f}"),
                ("NAE skipped (G=0)", str(self.n_skipped_nae))]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>12}" for k, v in rows)


_LINE = re.compile(r"MAE=(?P<mae>\S+) MSE=(?P<mse>\S+) NAE=(?P<nae>\S+)")


def parse_metrics_line(text: str) -> dict[str, float]:
    m = _LINE.search(text)
    if m is None:
        raise ValueError("no 'MAE=... MSE=... NAE=...' line found")
    return {k: float(v) for k, v in m.groupdict().items()}


def evaluate_metrics(preds, gts) -> MetricsReport:
    """NAE averages only over images with a nonzero ground-truth count."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.size == 0 or p.size != g.size:
        raise ValueError("preds and gts must be nonempty and of equal length")
    err = np.abs(p - g)
    nz = g != 0
    nae = float((err[nz] / g[nz]).mean()) if nz.any() else 0.0
    return MetricsReport(
        mae=float(err.mean()),
        mse=float(np.sqrt((err ** 2).mean())),
        nae=nae,
        n_images=int(p.size),
        n_skipped_nae=int((~nz).sum()),
    )
