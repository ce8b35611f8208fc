import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from corim.model import BackgroundParams, Emitter, PulseParams
from corim.synth import (
    PixelGrid,
    ScanImage,
    build_grid,
    corim_model,
    damped_model,
    linear_model,
    make_rng,
    pixels_per_axis,
    random_center,
    render_expected,
    sample_image,
)


@pytest.mark.parametrize("size, n", [(50, 22), (100, 12), (10, 102), (200, 8), (1000, 4), (5000, 4)])
def test_pixels_per_axis(size, n):
    assert pixels_per_axis(size) == n


@given(st.floats(1.0, 2000.0))
def test_grid_covers_region_and_is_even(size):
    g = build_grid(size, center=(17.0, -3.0))
    assert g.n_x == g.n_y and g.n_x % 2 == 0 and g.n_x >= 4
    assert (g.n_x - 2) * size >= 1000.0 - 1e-6
    assert g.center == pytest.approx((17.0, -3.0), abs=1e-9)


def test_grid_validation():
    with pytest.raises(ValueError):
        build_grid(0.0)
    with pytest.raises(ValueError):
        PixelGrid(10.0, 2, 5)


def test_coordinates_layout():
    g = PixelGrid(10.0, 4, 3, origin_x=100.0, origin_y=-5.0)
    X, Y = g.coordinates()
    assert X.shape == (3, 4)
    assert X[0, 0] == 100.0 and X[0, 3] == 130.0
    assert Y[2, 0] == 15.0


def test_make_rng_streams():
    a = make_rng(7, 3).random(5)
    b = make_rng(7, 3).random(5)
    c = make_rng(7, 4).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_random_center_uniform_in_central_block():
    g = build_grid(50.0)
    rng = make_rng(11)
    pts = np.array([random_center(g, rng) for _ in range(20000)])
    assert np.all(np.abs(pts) <= 50.0)
    for axis in range(2):
        assert stats.kstest(pts[:, axis], stats.uniform(loc=-50, scale=100).cdf).pvalue > 1e-3
        assert abs(pts[:, axis].mean()) < 4 * 100 / np.sqrt(12 * 20000)


def test_random_center_deterministic():
    g = build_grid(30.0, center=(5.0, 5.0))
    assert random_center(g, 42) == random_center(g, 42)


def test_expected_image_reflection_symmetric():
    g = build_grid(50.0)
    img = render_expected(corim_model([Emitter(0.0, 0.0)]), g)
    np.testing.assert_allclose(img.values, img.values[:, ::-1], rtol=0, atol=1e-15)
    np.testing.assert_allclose(img.values, img.values[::-1, :], rtol=0, atol=1e-15)
    np.testing.assert_allclose(img.values, img.values.T, rtol=0, atol=1e-15)


def test_three_maxima_per_side_on_center_row():
    g = PixelGrid(1.0, 1201, 3, origin_x=-600.0, origin_y=-1.0)
    row = render_expected(corim_model([Emitter()]), g).values[1]
    x = g.x_centers
    inner = row[1:-1]
    is_max = (inner > row[:-2]) & (inner > row[2:])
    xm = x[1:-1][is_max]
    assert np.sum(xm > 0) == 3
    assert np.sum(xm < 0) == 3


def test_linear_model_is_gaussian_squared_field():
    g = build_grid(50.0)
    img = render_expected(linear_model([Emitter(10.0, 20.0)], w0=120.0), g)
    X, Y = g.coordinates()
    np.testing.assert_allclose(img.values, np.exp(-((X - 10) ** 2 + (Y - 20) ** 2) / 120.0**2), rtol=1e-13)


def test_damped_ideal_matches_corim():
    g = build_grid(50.0)
    em = Emitter(7.0, -3.0)
    a = render_expected(damped_model(em, BackgroundParams(ideal=True)), g).values
    b = render_expected(corim_model([em]), g).values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_scan_image_validation():
    g = PixelGrid(10.0, 4, 4)
    with pytest.raises(ValueError):
        ScanImage(g, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        ScanImage(g, -np.ones((4, 4)))
    with pytest.raises(ValueError):
        ScanImage(g, np.ones((4, 4), dtype=int), "sampled", total_photons=3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5000), st.integers(0, 2**32 - 1))
def test_sampling_conserves_photons(n, seed):
    g = build_grid(100.0)
    img = render_expected(corim_model([Emitter(5.0, 5.0)]), g)
    s = sample_image(img, n, seed)
    assert s.values.dtype == np.int64
    assert s.values.sum() == n == s.total_photons
    assert np.all(s.values >= 0)
    assert np.all(s.values[img.values == 0] == 0)


def test_sampling_deterministic():
    img = render_expected(corim_model([Emitter()]), build_grid(50.0))
    np.testing.assert_array_equal(sample_image(img, 200, 3).values, sample_image(img, 200, 3).values)


def test_sampling_moments_and_chi_square():
    g = build_grid(100.0)
    img = render_expected(corim_model([Emitter(12.0, -20.0)]), g)
    p = (img.values / img.values.sum()).ravel()
    n, reps = 1000, 2000
    rng = make_rng(2024)
    counts = np.array([sample_image(img, n, rng).values.ravel() for _ in range(reps)])
    mean = counts.mean(axis=0)
    var = counts.var(axis=0, ddof=1)
    big = p * n > 5
    # mean within 5 standard errors, variance within 15%
    se = np.sqrt(n * p * (1 - p) / reps)
    assert np.all(np.abs(mean - n * p)[big] < 5 * se[big])
    np.testing.assert_allclose(var[big], (n * p * (1 - p))[big], rtol=0.15)
    # single-draw goodness of fit, pooling sparse pixels
    pvals = []
    for c in counts[:200]:
        obs = np.append(c[big], c[~big].sum())
        exp = np.append(n * p[big], n * p[~big].sum())
        pvals.append(stats.chisquare(obs, exp).pvalue)
    assert stats.kstest(pvals, "uniform").pvalue > 1e-3


def test_sampling_rejects_bad_input():
    g = PixelGrid(10.0, 4, 4)
    with pytest.raises(ValueError):
        sample_image(ScanImage(g, np.zeros((4, 4))), 10, 0)
    with pytest.raises(ValueError):
        sample_image(ScanImage(g, np.ones((4, 4))), 0, 0)


def test_pulse_area_changes_pattern():
    g = build_grid(50.0)
    low = render_expected(corim_model([Emitter()], PulseParams(rabi_parameter=1.0)), g).values
    high = render_expected(corim_model([Emitter()]), g).values
    assert np.argmax(low) != np.argmax(high) or low.max() < 0.01


def test_single_nonzero_pixel_takes_all_photons():
    g = build_grid(50.0)
    values = np.zeros(g.shape)
    values[3, 7] = 0.4
    s = sample_image(ScanImage(g, values), 200, 0)
    assert s.values[3, 7] == 200 and s.values.sum() == 200


def test_uniform_weights_mean():
    g = build_grid(100.0)
    img = ScanImage(g, np.ones(g.shape))
    n, reps = 1000, 500
    rng = make_rng(8)
    mean = np.mean([sample_image(img, n, rng).values for _ in range(reps)], axis=0)
    p = 1.0 / img.values.size
    se = np.sqrt(n * p * (1 - p) / reps)
    z = np.abs(mean - n * p) / se
    # 3 sigma holds for ~99.7% of pixels; none may be far out
    assert np.mean(z < 3) >= 0.98
    assert z.max() < 4.5


def test_chi_square_passes_at_one_percent_for_most_seeds():
    g = build_grid(50.0)
    img = render_expected(corim_model([Emitter(0.0, 0.0)]), g)
    p = (img.values / img.values.sum()).ravel()
    n = 1000
    big = p * n >= 5
    exp = np.append(n * p[big], n * p[~big].sum())
    passed = 0
    for seed in range(200):
        c = sample_image(img, n, seed).values.ravel()
        passed += stats.chisquare(np.append(c[big], c[~big].sum()), exp).pvalue > 0.01
    assert passed / 200 >= 0.95


def test_average_of_many_images_converges_to_expected():
    g = build_grid(50.0)
    img = render_expected(corim_model([Emitter(12.0, -8.0)]), g)
    p = img.values / img.values.sum()
    k, n = 10_000, 200
    rng = make_rng(99)
    total = np.zeros(g.shape)
    for _ in range(k):
        total += sample_image(img, n, rng).values
    est = total / (k * n)
    # per-pixel standard error sqrt(p (1 - p) / (k n)), plus one count for discreteness
    se = np.sqrt(p * (1 - p) / (k * n))
    assert np.all(np.abs(est - p) <= 5 * se + 1.0 / (k * n))
