from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdrvam.imageio import ExposureStack, LdrImage
from hdrvam.segmentation import (
    Histogram256,
    bin_index,
    histogram256,
    long_mask,
    otsu,
    otsu_threshold,
    segment_stack,
    short_mask,
)


def sigma_b(counts, t) -> Fraction | None:
    """Between-class variance w0*w1*(mu0 - mu1)^2 in exact rationals."""
    n = sum(counts)
    n0 = sum(counts[:t])
    n1 = n - n0
    if n0 == 0 or n1 == 0:
        return None
    mu0 = Fraction(sum(i * c for i, c in enumerate(counts[:t])), n0)
    mu1 = Fraction(sum(i * c for i, c in enumerate(counts[t:], start=t)), n1)
    return Fraction(n0, n) * Fraction(n1, n) * (mu0 - mu1) ** 2


def brute_otsu(counts) -> int:
    best_t, best = None, None
    for t in range(1, 256):
        s = sigma_b(counts, t)
        if s is not None and (best is None or s > best):
            best_t, best = t, s
    return best_t


def hist(d: dict) -> Histogram256:
    counts = np.zeros(256, dtype=np.int64)
    for k, v in d.items():
        counts[k] = v
    return Histogram256(counts, int(counts.sum()))


def test_hand_cases():
    assert otsu_threshold(hist({0: 3, 255: 3})) == 1
    assert otsu_threshold(hist({10: 100, 200: 50})) == 11
    uniform = hist({i: 1 for i in range(256)})
    assert otsu_threshold(uniform) == brute_otsu(list(uniform.counts)) == 128


def test_random_histograms_match_brute_force():
    rng = np.random.default_rng(0)
    for k in range(60):
        counts = rng.integers(0, 50, 256) * (rng.uniform(size=256) < rng.uniform(0.05, 1))
        if counts.sum() == 0 or np.count_nonzero(counts) < 2:
            continue
        assert otsu_threshold(Histogram256(counts, int(counts.sum()))) == brute_otsu(counts.tolist())


def test_returned_threshold_is_global_max():
    rng = np.random.default_rng(5)
    counts = rng.integers(0, 9, 256)
    t = otsu_threshold(Histogram256(counts, int(counts.sum())))
    best = sigma_b(counts.tolist(), t)
    for c in range(1, 256):
        s = sigma_b(counts.tolist(), c)
        assert s is None or s <= best
        if s == best:
            assert c >= t


def test_degenerate_single_bin():
    r = otsu(hist({42: 10}))
    assert r.degenerate and r.threshold == 43
    assert otsu(hist({255: 4})).threshold == 255
    assert otsu(hist({0: 4})).threshold == 1
    assert not otsu(hist({0: 1, 1: 1})).degenerate
    with pytest.raises(ValueError):
        otsu(Histogram256(np.zeros(256, dtype=np.int64), 0))


def test_histogram_type_invariants():
    with pytest.raises(ValueError):
        Histogram256(np.ones(256, dtype=np.int64), 3)
    with pytest.raises(ValueError):
        Histogram256(np.ones(10, dtype=np.int64), 10)


def test_histogram_bins():
    h = histogram256(np.zeros((1, 4, 5)))
    assert h.counts[0] == 20 and h.total == 20
    assert histogram256(np.ones((1, 4, 5))).counts[255] == 20
    assert bin_index(np.array([0.5])).item() == 128
    # round half up at the bin edge
    assert bin_index(np.array([0.5 / 255, 0.49 / 255])).tolist() == [1, 0]


def test_mask_examples():
    ones = np.ones((1, 3, 3))
    zeros = np.zeros((1, 3, 3))
    assert np.all(short_mask(ones, 1) == 1)
    assert np.all(short_mask(zeros, 255) == 0)
    assert np.all(long_mask(zeros, 255) == 1)
    y = np.array([100, 150]).reshape(1, 1, 2) / 255.0
    assert short_mask(y, 128).ravel().tolist() == [0.0, 1.0]
    assert long_mask(y, 128).ravel().tolist() == [1.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 255))
def test_mask_properties(seed, t):
    y = np.random.default_rng(seed).uniform(0, 1, (1, 6, 7))
    s = short_mask(y, t)
    assert set(np.unique(s)) <= {0.0, 1.0}
    np.testing.assert_array_equal(long_mask(y, t), 1.0 - s)
    # re-thresholding a binary mask at 1 is idempotent
    np.testing.assert_array_equal(short_mask(s, 1), s)
    if t < 255:
        assert short_mask(y, t + 1).sum() <= s.sum()


def _frame(y, t):
    return LdrImage(np.repeat(y[None], 3, axis=0), t)


def test_segment_stack_patches():
    dark = np.full((16, 16), 0.02)
    dark[4:8, 6:12] = 0.9
    bright = np.full((16, 16), 1.0)
    bright[10:14, 2:5] = 0.1
    mid = np.full((16, 16), 0.5)
    m = segment_stack(ExposureStack(_frame(dark, 0.25), _frame(mid, 1.0), _frame(bright, 4.0)))
    want_short = np.zeros((1, 16, 16))
    want_short[0, 4:8, 6:12] = 1
    want_long = np.zeros((1, 16, 16))
    want_long[0, 10:14, 2:5] = 1
    np.testing.assert_array_equal(m.mask_short, want_short)
    np.testing.assert_array_equal(m.mask_long, want_long)
    assert m.mask_short.shape == (1, 16, 16)
    assert 1 <= m.thresh_short <= 255 and 1 <= m.thresh_long <= 255


def test_segment_same_frame_gives_complements(rng):
    y = rng.uniform(0, 1, (8, 8))
    m = segment_stack(ExposureStack(_frame(y, 0.5), _frame(y, 1.0), _frame(y, 2.0)))
    assert m.thresh_short == m.thresh_long
    np.testing.assert_array_equal(m.mask_long, 1.0 - m.mask_short)
