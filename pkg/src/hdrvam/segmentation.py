"""Otsu thresholds on luminance and the short/long visibility masks.

Luminance is quantised to 256 bins (``floor(255 y + 0.5)``).  A threshold
``t`` splits the bins into ``[0, t)`` and ``[t, 255]``; the short-exposure
mask keeps the upper class and the long-exposure mask the lower one, so the
two rules are exact complements at equal thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import LUMA_BT601, ExposureStack, luma

NBINS = 256


@dataclass
class Histogram256:
    counts: np.ndarray
    total: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (NBINS,) or (self.counts < 0).any():
            raise ValueError("histogram needs 256 non-negative counts")
        if int(self.counts.sum()) != self.total:
            raise ValueError("histogram counts do not sum to total")


@dataclass
class OtsuResult:
    threshold: int
    degenerate: bool = False


@dataclass
class MaskPair:
    mask_short: np.ndarray
    mask_long: np.ndarray
    thresh_short: int
    thresh_long: int
    degenerate_short: bool = False
    degenerate_long: bool = False

    @property
    def coverage_short(self) -> float:
        return float(self.mask_short.mean())

    @property
    def coverage_long(self) -> float:
        return float(self.mask_long.mean())


def bin_index(y: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(y, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.int64)


def histogram256(y: np.ndarray) -> Histogram256:
    counts = np.bincount(bin_index(y).ravel(), minlength=NBINS)
    return Histogram256(counts, int(counts.sum()))


def otsu(h: Histogram256) -> OtsuResult:
    """Maximise between-class variance over t in [1, 255].

    Scores are compared exactly in integer arithmetic: with counts ``n0, n1``
    and bin-index sums ``s0, s1`` the between-class variance is proportional
    to ``(s0*n1 - s1*n0)**2 / (n0*n1)``.  The smallest maximiser wins.
    """
    if h.total < 1:
        raise ValueError("empty histogram")
    counts = [int(c) for c in h.counts]
    weighted = [i * c for i, c in enumerate(counts)]
    n_total, s_total = h.total, sum(weighted)
    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(1, NBINS):
        n0 += counts[t - 1]
        s0 += weighted[t - 1]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * n1 - (s_total - s0) * n0) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None:
        # a single occupied bin: no split separates anything
        b = int(np.flatnonzero(h.counts)[0])
        return OtsuResult(min(max(b + 1, 1), 255), degenerate=True)
    return OtsuResult(best_t)


def otsu_threshold(h: Histogram256) -> int:
    return otsu(h).threshold


def short_mask(y: np.ndarray, t: int) -> np.ndarray:
    return (bin_index(y) >= t).astype(np.float32)


def long_mask(y: np.ndarray, t: int) -> np.ndarray:
    return (bin_index(y) < t).astype(np.float32)


def segment_stack(stack: ExposureStack, coeffs=LUMA_BT601) -> MaskPair:
    """Masks from the short and long frames; the reference frame is not segmented."""
    y_short = luma(stack.short, coeffs)
    y_long = luma(stack.long, coeffs)
    rs = otsu(histogram256(y_short))
    rl = otsu(histogram256(y_long))
    return MaskPair(
        mask_short=short_mask(y_short, rs.threshold),
        mask_long=long_mask(y_long, rl.threshold),
        thresh_short=rs.threshold,
        thresh_long=rl.threshold,
        degenerate_short=rs.degenerate,
        degenerate_long=rl.degenerate,
    )
