import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares

from corim.fit import (
    FitOptions,
    FitResult,
    SingularFisherError,
    crlb_sigma,
    fisher_information,
    fit_image,
    initial_guess,
    levenberg_marquardt,
    predict,
    predict_and_jacobian,
)
from corim.model import DEFAULT_W0_NM, Emitter, PulseParams, peak_area
from corim.synth import PixelGrid, ScanImage, build_grid, corim_model, linear_model, render_expected, sample_image

from oracles import central_difference_jacobian, gaussian_crlb_analytic

W0 = DEFAULT_W0_NM
A100 = peak_area(100)
GRID = build_grid(50.0)


def _noiseless(kind, x0, y0, grid=GRID, amp=100.0, u=100.0):
    if kind == "corim":
        model = corim_model([Emitter(x0, y0)], PulseParams(rabi_parameter=u))
    else:
        model = linear_model([Emitter(x0, y0)])
    img = render_expected(model, grid)
    return ScanImage(grid, amp * img.values)


# --- model & jacobian -----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["linear_gaussian", "corim"]), st.floats(-60, 60), st.floats(-60, 60),
       st.floats(0.5, 50), st.floats(80, 200), st.floats(0.5, 25))
def test_jacobian_matches_finite_differences(kind, x0, y0, amp, w, area):
    X, Y = GRID.coordinates()
    p = np.array([x0, y0, amp, w] + ([area] if kind == "corim" else []))
    _, jac = predict_and_jacobian(kind, p, X, Y)
    num = central_difference_jacobian(lambda q: predict(kind, q, X.ravel(), Y.ravel()), p)
    scale = np.max(np.abs(num), axis=0) + 1e-12
    assert np.max(np.abs(jac - num) / scale) < 1e-5


def test_predict_rejects_unknown_kind():
    with pytest.raises(ValueError):
        predict("airy", [0, 0, 1, 1], 0.0, 0.0)


# --- solver -----------------------------------------------------------------------

def test_lm_matches_reference_solver_on_exponential_decay():
    t = np.linspace(0, 4, 40)
    data = 3.0 * np.exp(-1.3 * t) + 0.05 * np.sin(7 * t)

    def fun(p):
        e = np.exp(-p[1] * t)
        return p[0] * e - data, np.stack([e, -p[0] * t * e], axis=1)

    ours = levenberg_marquardt(fun, [1.0, 0.5])
    ref = least_squares(lambda p: fun(p)[0], [1.0, 0.5], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    assert ours.converged
    np.testing.assert_allclose(ours.x, ref.x, rtol=1e-6)


def test_lm_history_monotone():
    img = sample_image(_noiseless("corim", 13.0, -7.0), 200, 5)
    for kind in ("linear_gaussian", "corim"):
        res = fit_image(img, kind, initial_guess(img, kind, true_center=(13.0, -7.0)))
        h = np.array(res.history)
        assert len(h) >= 2
        assert np.all(np.diff(h) <= 0)


# --- recovery ---------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["linear_gaussian", "corim"])
@pytest.mark.parametrize("center", [(0.0, 0.0), (23.0, -41.0), (-12.5, 30.0)])
def test_noiseless_recovery(kind, center):
    img = _noiseless(kind, *center)
    init = initial_guess(img, kind, true_center=(center[0] + 8.0, center[1] - 6.0))
    res = fit_image(img, kind, init)
    assert res.converged
    assert res.x0 == pytest.approx(center[0], abs=1e-3)
    assert res.y0 == pytest.approx(center[1], abs=1e-3)
    assert res.params["w0"] == pytest.approx(W0, rel=1e-6)
    if kind == "corim":
        assert res.params["A_peak"] == pytest.approx(A100, rel=1e-6)
        assert res.params["amplitude"] == pytest.approx(100.0, rel=1e-6)


def test_noiseless_recovery_from_centroid_start():
    img = _noiseless("linear_gaussian", 31.0, 17.0)
    res = fit_image(img, "linear_gaussian")
    assert res.x0 == pytest.approx(31.0, abs=1e-3)


def test_translation_equivariance():
    img = sample_image(_noiseless("corim", 10.0, 5.0), 400, 9)
    shifted = ScanImage(GRID.shifted(50.0, -50.0), img.values, "sampled")
    for kind in ("linear_gaussian", "corim"):
        a = fit_image(img, kind, initial_guess(img, kind, true_center=(10.0, 5.0)))
        b = fit_image(shifted, kind, initial_guess(shifted, kind, true_center=(60.0, -45.0)))
        assert b.x0 - a.x0 == pytest.approx(50.0, abs=1e-6)
        assert b.y0 - a.y0 == pytest.approx(-50.0, abs=1e-6)


def test_degenerate_image_reports_failure():
    values = np.zeros(GRID.shape, dtype=np.int64)
    values[11, 11] = 5
    img = ScanImage(GRID, values, "sampled")
    res = fit_image(img, "corim", initial_guess(img, "corim"))
    assert not res.converged
    assert res.status == "degenerate"


def test_multistart_no_worse():
    img = sample_image(_noiseless("corim", 20.0, 20.0), 100, 3)
    init = initial_guess(img, "corim", true_center=(20.0, 20.0))
    one = fit_image(img, "corim", init)
    many = fit_image(img, "corim", init, FitOptions(multistart=True))
    assert many.rss <= one.rss + 1e-9


def test_fit_result_roundtrip():
    img = _noiseless("corim", 1.0, 2.0)
    res = fit_image(img, "corim", initial_guess(img, "corim", true_center=(1.0, 2.0)))
    assert FitResult.from_dict(res.to_dict()) == res
    row = res.csv_row(7)
    assert row[0] == 7 and row[1] == "corim" and row[8] == 1


# --- initial guess ----------------------------------------------------------------

def test_initial_guess_examples():
    g = PixelGrid(10.0, 4, 4, -15.0, -15.0)
    values = np.zeros((4, 4))
    values[1, 2] = 4.0  # x = 5, y = -5
    img = ScanImage(g, values)
    lin = initial_guess(img, "linear_gaussian")
    assert (lin["x0"], lin["y0"], lin["amplitude"]) == (5.0, -5.0, 4.0)
    assert lin["w0"] == pytest.approx(W0)
    cor = initial_guess(img, "corim", true_center=(1.0, 2.0), rabi_parameter=100 / 6.2)
    assert (cor["x0"], cor["y0"]) == (1.0, 2.0)
    assert cor["A_peak"] == pytest.approx(math.pi)
    assert cor["amplitude"] == pytest.approx(4.0)
    small = initial_guess(img, "corim", rabi_parameter=100 / 6.2 / 2)  # A/2 = pi/4
    assert small["amplitude"] == pytest.approx(8.0)
    with pytest.raises(ValueError):
        initial_guess(ScanImage(g, np.zeros((4, 4))))


# --- Cramer-Rao bound ---------------------------------------------------------------

def _params(kind, x0=0.0, y0=0.0):
    p = {"x0": x0, "y0": y0, "amplitude": 1.0, "w0": W0}
    if kind == "corim":
        p["A_peak"] = A100
    return p


def test_crlb_golden_values():
    # analytic-derivative Fisher matrices evaluated independently
    assert crlb_sigma("linear_gaussian", _params("linear_gaussian"), GRID, 200) == pytest.approx(6.36991358429626, rel=1e-6)
    assert crlb_sigma("corim", _params("corim"), GRID, 200) == pytest.approx(1.7298171202778825, rel=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(10, 5000))
def test_crlb_gaussian_matches_analytic_oracle(x0, y0, n):
    X, Y = GRID.coordinates()
    ref = gaussian_crlb_analytic(x0, y0, W0, X, Y, n)
    assert crlb_sigma("linear_gaussian", _params("linear_gaussian", x0, y0), GRID, n) == pytest.approx(ref, rel=1e-6)


@pytest.mark.parametrize("kind", ["linear_gaussian", "corim"])
def test_crlb_scales_as_inverse_sqrt_n(kind):
    a = crlb_sigma(kind, _params(kind, 11.0, -4.0), GRID, 200)
    b = crlb_sigma(kind, _params(kind, 11.0, -4.0), GRID, 800)
    assert b / a == pytest.approx(0.5, rel=1e-12)


def test_crlb_corim_below_gaussian():
    for c in [(0.0, 0.0), (25.0, 25.0), (-40.0, 10.0)]:
        assert crlb_sigma("corim", _params("corim", *c), GRID, 200) < crlb_sigma("linear_gaussian", _params("linear_gaussian", *c), GRID, 200)


def test_fisher_is_symmetric_positive_definite():
    F = fisher_information("corim", _params("corim", 5.0, 5.0), GRID, 200)
    np.testing.assert_allclose(F, F.T, rtol=1e-12)
    assert np.all(np.linalg.eigvalsh(F) > 0)


def test_crlb_singular_cases():
    p = _params("corim")
    p["amplitude"] = 0.0
    with pytest.raises(SingularFisherError):
        crlb_sigma("corim", p, GRID, 200)
    # vanishing area: the sin^2 model has no weight anywhere
    p = _params("corim")
    p["A_peak"] = 0.0
    with pytest.raises(SingularFisherError):
        crlb_sigma("corim", p, GRID, 200)
    with pytest.raises(ValueError):
        crlb_sigma("corim", _params("corim"), GRID, 0)
