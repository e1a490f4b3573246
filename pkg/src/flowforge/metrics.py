"""Flow evaluation metrics: endpoint error, outlier ratio, displacement histograms."""

from dataclasses import dataclass

import numpy as np

from .core import as_flow, as_grid
from .errors import BadBins, DimMismatch, EmptyMask


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray  # ascending, len B+1
    counts: np.ndarray     # len B, non-negative ints
    total: int


def _endpoint_errors(estimate, truth, mask):
    est = as_flow(estimate)
    tru = as_flow(truth)
    if est.shape != tru.shape:
        raise DimMismatch(f"estimate {est.shape} vs truth {tru.shape}")
    err = np.hypot((est[:, :, 0] - tru[:, :, 0]).astype(np.float64),
                   (est[:, :, 1] - tru[:, :, 1]).astype(np.float64))
    if mask is None:
        sel = np.ones(err.shape, bool)
    else:
        m = as_grid(mask, channels=1)
        if m.shape[:2] != err.shape:
            raise DimMismatch(f"mask {m.shape[:2]} vs flow {err.shape}")
        sel = m[:, :, 0] > 0.5
        if not sel.any():
            raise EmptyMask("mask selects zero pixels")
    return err, tru, sel


def epe(estimate, truth, mask=None):
    """Average endpoint error over (masked) pixels."""
    err, _, sel = _endpoint_errors(estimate, truth, mask)
    return float(err[sel].mean())


def fl_all(estimate, truth, mask=None):
    """Fraction of pixels wrong by both >= 3 px and >= 5% of the truth magnitude.

    For zero-magnitude truth the percentage test is vacuous, so such pixels
    are outliers iff the 3 px gate fires.
    """
    err, tru, sel = _endpoint_errors(estimate, truth, mask)
    mag = np.hypot(tru[:, :, 0].astype(np.float64), tru[:, :, 1].astype(np.float64))
    bad = (err >= 3.0) & (err >= 0.05 * mag)
    return float(bad[sel].mean())


def displacement_histogram(flows, bin_edges):
    """Histogram of per-pixel flow magnitudes across fields; out-of-range
    magnitudes are clamped into the end bins."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise BadBins(f"need >= 2 strictly ascending edges, got {bin_edges}")
    flows = list(flows)
    if not flows:
        raise BadBins("need at least one flow field")
    nbins = edges.size - 1
    counts = np.zeros(nbins, np.int64)
    total = 0
    for f in flows:
        ff = as_flow(f)
        mag = np.hypot(ff[:, :, 0].astype(np.float64), ff[:, :, 1].astype(np.float64))
        idx = np.searchsorted(edges, mag.ravel(), side="right") - 1
        idx = np.clip(idx, 0, nbins - 1)
        counts += np.bincount(idx, minlength=nbins)
        total += mag.size
    return Histogram(edges, counts, total)
