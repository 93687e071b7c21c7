import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from localedit.codec import Codec
from localedit.denoise import ProceduralDenoiser
from localedit.relevance import (
    compute_relevance,
    mask_to_pixel,
    normalize_relevance,
    raw_relevance,
    relevance_to_pixel,
    threshold_mask,
)
from localedit.schedule import make_schedule

from oracles import iqr_normalize

SCHED = make_schedule()


def _region_denoiser(region, delta, scale=1.0):
    def target(img, text):
        out = img.copy()
        out[region] += scale * delta
        return out

    return ProceduralDenoiser(SCHED, target)


def test_iqr_vector():
    got = normalize_relevance(np.array([0.0, 1.0, 2.0, 3.0, 100.0]))
    assert np.allclose(got, [0, 1 / 6, 1 / 3, 0.5, 1.0], atol=1e-4)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e3)))
def test_normalize_matches_reference(raw):
    got = normalize_relevance(raw)
    assert np.allclose(got, iqr_normalize(list(raw)), atol=1e-9)
    assert got.min() >= 0 and got.max() <= 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 30, elements=st.floats(0, 100)), st.floats(1e-3, 1e3))
def test_normalize_scale_invariant(raw, c):
    assert np.allclose(normalize_relevance(raw), normalize_relevance(c * raw), atol=1e-9)


def test_constant_map_is_zero():
    assert np.array_equal(normalize_relevance(np.full((3, 3), 2.0)), np.zeros((3, 3)))


def test_relevance_closed_form_in_region():
    rng = np.random.default_rng(0)
    img = rng.random((8, 8, 3))
    region = (slice(2, 5), slice(1, 6))
    delta = np.zeros((3, 5, 3))
    delta[..., 0] = rng.uniform(0.2, 0.6, (3, 5))
    den = _region_denoiser(region, delta)
    raw = raw_relevance(den, Codec(), img, "x", 0.8, 3)
    ab = SCHED.at(SCHED.timestep(0.8))
    expected = np.zeros((8, 8))
    expected[region] = math.sqrt(ab) / math.sqrt(1 - ab) * np.abs(delta).mean(axis=-1)
    assert np.allclose(raw, expected, rtol=1e-9, atol=1e-12)
    rel = compute_relevance(den, Codec(), img, "x", 0.8, 3)
    outside = np.ones((8, 8), bool)
    outside[region] = False
    assert np.all(rel[outside] == 0)
    assert np.allclose(rel, expected / expected.max(), atol=1e-12)


def test_support_equals_target_difference():
    rng = np.random.default_rng(1)
    img = rng.random((6, 6, 3))
    region = (slice(0, 3), slice(3, 6))
    den = _region_denoiser(region, 0.3)
    raw = raw_relevance(den, Codec(), img, "x", 0.5, 0)
    diff = np.zeros((6, 6), bool)
    diff[region] = True
    assert np.array_equal(raw > 0, diff)


def test_noop_instruction_zero_map():
    img = np.random.default_rng(2).random((4, 4, 3))
    den = ProceduralDenoiser(SCHED, lambda im, t: im)
    assert np.array_equal(compute_relevance(den, Codec(), img, "x"), np.zeros((4, 4)))


def test_rescaled_difference_same_map():
    img = np.random.default_rng(3).random((6, 6, 3))
    region = (slice(1, 4), slice(1, 4))
    delta = np.random.default_rng(4).random((3, 3, 3))
    a = compute_relevance(_region_denoiser(region, delta), Codec(), img, "x", 0.8, 0)
    b = compute_relevance(_region_denoiser(region, delta, 7.0), Codec(), img, "x", 0.8, 0)
    assert np.allclose(a, b, atol=1e-12)


def test_seed_determinism_and_samples():
    img = np.random.default_rng(5).random((4, 4, 3))
    den = _region_denoiser((slice(0, 2), slice(0, 2)), 0.4)
    a = raw_relevance(den, Codec(), img, "x", 0.8, 11, samples=3)
    b = raw_relevance(den, Codec(), img, "x", 0.8, 11, samples=3)
    assert np.array_equal(a, b)


def test_argument_validation():
    den = _region_denoiser((slice(0, 1), slice(0, 1)), 0.1)
    img = np.zeros((2, 2, 3))
    for kwargs in ({"instruction": ""}, {"t_rel": 0.0}, {"t_rel": 1.0}):
        args = {"instruction": "x", "t_rel": 0.8} | kwargs
        with pytest.raises(ValueError):
            raw_relevance(den, Codec(), img, args["instruction"], args["t_rel"])
    with pytest.raises(ValueError):
        raw_relevance(den, Codec(), img, "x", samples=0)


def test_threshold_examples():
    assert threshold_mask(np.array([0.2, 0.5, 0.9]), 0.5).tolist() == [False, True, True]
    r = np.array([0.0, 0.3, 1.0, 1.0])
    assert threshold_mask(r, 0.0).all()
    assert threshold_mask(r, 1.0).tolist() == [False, False, True, True]
    with pytest.raises(ValueError):
        threshold_mask(r, 1.2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone(r, a, b):
    lo, hi = min(a, b), max(a, b)
    assert np.all(threshold_mask(r, hi) <= threshold_mask(r, lo))


def test_mask_to_pixel():
    m = np.zeros((3, 3), bool)
    m[1, 2] = True
    assert np.array_equal(mask_to_pixel(m, Codec()), m)
    up = mask_to_pixel(m, Codec("avgpool", 2))
    assert up.shape == (6, 6) and up[2:4, 4:6].all() and up.sum() == 4
    big = np.random.default_rng(0).random((4, 5)) > 0.5
    assert mask_to_pixel(big, Codec("avgpool", 3)).sum() == 9 * big.sum()
    assert relevance_to_pixel(np.ones((2, 2)), Codec("avgpool", 2)).shape == (4, 4)
