"""Localization by unweighted nonlinear least squares and a Cramer-Rao bound.

Two point-spread-function models are fitted to pixel counts, both evaluated
at pixel centers:

``linear_gaussian``
    ``amplitude * exp(-r^2 / w0^2)`` (intensity of the Gaussian field)
``corim``
    ``amplitude * sin^2((A_peak / 2) * exp(-r^2 / (2 w0^2)))``

with ``r`` the distance between pixel center and ``(x0, y0)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .model import DEFAULT_FWHM_NM, DEFAULT_RABI_PARAMETER, peak_area, w0_from_fwhm
from .synth import PixelGrid, ScanImage

MODEL_KINDS = ("linear_gaussian", "corim")
PARAM_NAMES = {
    "linear_gaussian": ("x0", "y0", "amplitude", "w0"),
    "corim": ("x0", "y0", "amplitude", "w0", "A_peak"),
}
CSV_COLUMNS = ("seed", "model", "x0", "y0", "amplitude", "w0", "A_peak", "rss", "converged", "iters")


class SingularFisherError(ValueError):
    pass


def _check_kind(kind: str):
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def predict(kind: str, params, x, y) -> np.ndarray:
    """Model prediction at pixel centers ``(x, y)``; ``params`` in PARAM_NAMES order."""
    _check_kind(kind)
    x0, y0, amp, w = params[:4]
    r2 = (x - x0) ** 2 + (y - y0) ** 2
    if kind == "linear_gaussian":
        return amp * np.exp(-r2 / w**2)
    phase = 0.5 * params[4] * np.exp(-r2 / (2.0 * w**2))
    return amp * np.sin(phase) ** 2


def predict_and_jacobian(kind: str, params, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Prediction and analytic Jacobian (shape ``(n_pixels, n_params)``)."""
    _check_kind(kind)
    x = np.ravel(x)
    y = np.ravel(y)
    x0, y0, amp, w = params[:4]
    dx = x - x0
    dy = y - y0
    r2 = dx * dx + dy * dy
    jac = np.empty((x.size, len(PARAM_NAMES[kind])))
    if kind == "linear_gaussian":
        shape = np.exp(-r2 / w**2)
        mu = amp * shape
        jac[:, 0] = mu * 2.0 * dx / w**2
        jac[:, 1] = mu * 2.0 * dy / w**2
        jac[:, 2] = shape
        jac[:, 3] = mu * 2.0 * r2 / w**3
        return mu, jac
    g = np.exp(-r2 / (2.0 * w**2))
    phase = 0.5 * params[4] * g
    s = np.sin(phase)
    shape = s * s
    mu = amp * shape
    dmu_dphase = amp * np.sin(2.0 * phase)
    jac[:, 0] = dmu_dphase * phase * dx / w**2
    jac[:, 1] = dmu_dphase * phase * dy / w**2
    jac[:, 2] = shape
    jac[:, 3] = dmu_dphase * phase * r2 / w**3
    jac[:, 4] = dmu_dphase * 0.5 * g
    return mu, jac


@dataclass
class FitOptions:
    max_iter: int = 200
    ftol: float = 1e-10  # relative objective decrease
    xtol: float = 1e-6  # absolute parameter step
    lambda0: float = 1.0
    multistart: bool = False


@dataclass
class FitResult:
    kind: str
    params: dict
    rss: float
    converged: bool
    iterations: int
    uncertainties: dict
    status: str = "converged"
    history: list = field(default_factory=list)

    @property
    def x0(self) -> float:
        return self.params["x0"]

    @property
    def y0(self) -> float:
        return self.params["y0"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(**d)

    def csv_row(self, seed) -> list:
        p = self.params
        return [seed, self.kind, p["x0"], p["y0"], p["amplitude"], p["w0"],
                p.get("A_peak", float("nan")), self.rss, int(self.converged), self.iterations]


class LMResult:
    __slots__ = ("x", "cost", "converged", "iterations", "status", "history", "jac")

    def __init__(self, x, cost, converged, iterations, status, history, jac):
        self.x = x
        self.cost = cost
        self.converged = converged
        self.iterations = iterations
        self.status = status
        self.history = history
        self.jac = jac


def levenberg_marquardt(fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], p0,
                        options: FitOptions = FitOptions()) -> LMResult:
    """Minimize ``sum(res**2)`` where ``fun(p) -> (res, jac)``.

    The damping term is scaled by the running maximum of ``diag(J^T J)``
    (as in MINPACK), so parameters that are momentarily insensitive cannot
    take runaway steps. Only steps that lower the objective are accepted, so
    the recorded ``history`` of accepted costs is non-increasing.
    """
    p = np.array(p0, dtype=float)
    res, jac = fun(p)
    cost = float(res @ res)
    history = [cost]
    lam = options.lambda0
    if not np.isfinite(cost):
        return LMResult(p, cost, False, 0, "nonfinite", history, jac)
    scale = np.zeros(p.size)
    it = 0
    while it < options.max_iter:
        it += 1
        A = jac.T @ jac
        g = jac.T @ res
        diag = np.diag(A).copy()
        if not np.all(np.isfinite(A)) or diag.max() <= 0:
            return LMResult(p, cost, False, it, "singular", history, jac)
        scale = np.maximum(scale, diag)
        diag = np.maximum(scale, 1e-12 * scale.max())
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                return LMResult(p, cost, False, it, "singular", history, jac)
            p_new = p + step
            res_new, jac_new = fun(p_new)
            cost_new = float(res_new @ res_new)
            small_step = np.max(np.abs(step)) < options.xtol
            if np.isfinite(cost_new) and cost_new <= cost:
                break
            if small_step:
                # no representable improvement left
                return LMResult(p, cost, True, it, "converged", history, jac)
            lam *= 10.0
            if lam > 1e20:
                return LMResult(p, cost, False, it, "stalled", history, jac)
        decrease = cost - cost_new
        p, res, jac, cost = p_new, res_new, jac_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-15)
        if small_step or decrease <= options.ftol * max(cost + decrease, 1e-300):
            return LMResult(p, cost, True, it, "converged", history, jac)
    return LMResult(p, cost, False, it, "max_iter", history, jac)


def initial_guess(image: ScanImage, kind: str = "corim", true_center=None,
                  fwhm: float = DEFAULT_FWHM_NM,
                  rabi_parameter: float = DEFAULT_RABI_PARAMETER) -> dict:
    """Start parameters: true (or centroid) center, highest pixel, configured width."""
    _check_kind(kind)
    values = np.asarray(image.values, dtype=float)
    total = values.sum()
    if not total > 0:
        raise ValueError("image has no positive pixel")
    if true_center is not None:
        cx, cy = float(true_center[0]), float(true_center[1])
    else:
        X, Y = image.grid.coordinates()
        cx = float((X * values).sum() / total)
        cy = float((Y * values).sum() / total)
    guess = {"x0": cx, "y0": cy, "amplitude": float(values.max()), "w0": w0_from_fwhm(fwhm)}
    if kind == "corim":
        area = peak_area(rabi_parameter)
        guess["A_peak"] = area
        if area > 0:
            # model peak height, not the prefactor, matches the highest pixel
            guess["amplitude"] /= math.sin(min(0.5 * area, 0.5 * math.pi)) ** 2
    return guess


def _scaled_corim(params, x, y):
    """CORIM model in solver coordinates ``(x0, y0, B, w0, A_peak)``.

    ``B = amplitude * (A_peak / 2)^2`` keeps the model finite as the area
    goes to zero, where amplitude and area are otherwise only identifiable
    through their product and the fit runs off to infinity.
    """
    x0, y0, b, w, area = params
    dx = x - x0
    dy = y - y0
    r2 = dx * dx + dy * dy
    g = np.exp(-r2 / (2.0 * w**2))
    h = 0.5 * area
    phase = h * g
    jac = np.empty((x.size, 5))
    if abs(h) < 1e-4:
        # sin^2(h g) / h^2 = g^2 - h^2 g^4 / 3 + O(h^4)
        shape = g * g - (h * h / 3.0) * g**4
        dshape_dh = -(2.0 * h / 3.0) * g**4
        dshape_dg = 2.0 * g - (4.0 * h * h / 3.0) * g**3
    else:
        s = np.sin(phase)
        shape = s * s / (h * h)
        dshape_dh = (np.sin(2.0 * phase) * g * h - 2.0 * s * s) / h**3
        dshape_dg = np.sin(2.0 * phase) / h
    mu = b * shape
    dmu_dg = b * dshape_dg
    jac[:, 0] = dmu_dg * g * dx / w**2
    jac[:, 1] = dmu_dg * g * dy / w**2
    jac[:, 2] = shape
    jac[:, 3] = dmu_dg * g * r2 / w**3
    jac[:, 4] = 0.5 * b * dshape_dh
    return mu, jac


def _fit_once(kind, p0, x, y, data, options):
    if kind == "corim":
        q0 = p0.copy()
        q0[2] = p0[2] * (0.5 * p0[4]) ** 2

        def fun(q):
            mu, jac = _scaled_corim(q, x, y)
            return mu - data, jac

        lm = levenberg_marquardt(fun, q0, options)
        q = lm.x
        h = 0.5 * q[4]
        lm.x = q.copy()
        lm.x[2] = q[2] / (h * h) if h != 0 else math.copysign(math.inf, q[2])
        lm.x[4] = abs(q[4])
        if np.all(np.isfinite(lm.x)):
            lm.jac = predict_and_jacobian(kind, lm.x, x, y)[1]
        return lm

    def fun(p):
        mu, jac = predict_and_jacobian(kind, p, x, y)
        return mu - data, jac

    return levenberg_marquardt(fun, p0, options)


def _uncertainties(jac, cost, n_data):
    n_par = jac.shape[1]
    dof = max(n_data - n_par, 1)
    try:
        cov = np.linalg.inv(jac.T @ jac) * (cost / dof)
        return np.sqrt(np.abs(np.diag(cov)))
    except np.linalg.LinAlgError:
        return np.full(n_par, np.nan)


def fit_image(image: ScanImage, kind: str = "corim", init: dict | None = None,
              options: FitOptions = FitOptions()) -> FitResult:
    """Unweighted least-squares fit of ``kind`` to ``image``.

    Failures (degenerate images, singular normal equations, iteration cap)
    are reported through ``converged``/``status``; nothing is raised.
    """
    _check_kind(kind)
    names = PARAM_NAMES[kind]
    if init is None:
        init = initial_guess(image, kind)
    p0 = np.array([init[n] for n in names], dtype=float)
    values = np.asarray(image.values, dtype=float)
    nan = {n: float("nan") for n in names}
    if np.count_nonzero(values) <= 1:
        return FitResult(kind, dict(zip(names, p0.tolist())), float("nan"), False, 0, nan, "degenerate")

    X, Y = image.grid.coordinates()
    x, y, data = X.ravel(), Y.ravel(), values.ravel()

    starts = [p0]
    if options.multistart:
        h = 0.5 * image.grid.pixel_size
        cx, cy = image.grid.center
        for sx, sy in ((-h, -h), (h, -h), (-h, h), (h, h)):
            q = p0.copy()
            q[0], q[1] = cx + sx, cy + sy
            starts.append(q)

    best = None
    for q in starts:
        lm = _fit_once(kind, q, x, y, data, options)
        if best is None or (lm.converged, -lm.cost) > (best.converged, -best.cost):
            best = lm

    p = best.x.copy()
    p[3] = abs(p[3])  # w0 enters squared
    sigma = _uncertainties(best.jac, best.cost, data.size)
    return FitResult(
        kind,
        {n: float(v) for n, v in zip(names, p)},
        float(best.cost),
        bool(best.converged),
        int(best.iterations),
        {n: float(v) for n, v in zip(names, sigma)},
        best.status,
        [float(c) for c in best.history],
    )


def _pixel_probabilities(kind, theta, x, y):
    mu = predict(kind, np.concatenate([theta[:2], [1.0], theta[2:]]), x, y)
    total = mu.sum()
    if not total > 0:
        raise SingularFisherError("model has no positive pixel weight")
    return mu / total


def fisher_information(kind: str, params: dict, grid: PixelGrid, n_photons: int) -> np.ndarray:
    """Fisher information of the multinomial pixel-count model.

    Parameters are the shape parameters ``(x0, y0, w0[, A_peak])``; the
    amplitude cancels in the normalized pixel probabilities. Derivatives are
    central finite differences of the probabilities.
    """
    _check_kind(kind)
    if n_photons < 1:
        raise ValueError("n_photons must be at least 1")
    if params.get("amplitude", 1.0) == 0:
        raise SingularFisherError("zero-amplitude model carries no information")
    names = [n for n in PARAM_NAMES[kind] if n != "amplitude"]
    theta = np.array([params[n] for n in names], dtype=float)
    X, Y = grid.coordinates()
    x, y = X.ravel(), Y.ravel()
    p = _pixel_probabilities(kind, theta, x, y)
    grads = np.empty((len(theta), p.size))
    for j in range(len(theta)):
        h = 1e-4 * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        grads[j] = (_pixel_probabilities(kind, tp, x, y) - _pixel_probabilities(kind, tm, x, y)) / (2 * h)
    keep = p > 1e-300
    G = grads[:, keep]
    return n_photons * (G / p[keep]) @ G.T


def crlb_sigma(kind: str, params: dict, grid: PixelGrid, n_photons: int) -> float:
    """Cramer-Rao lower bound on the standard deviation of ``x0`` (nm)."""
    F = fisher_information(kind, params, grid, n_photons)
    eig = np.linalg.eigvalsh(F)
    if not eig.min() > 1e-12 * max(eig.max(), 1e-300):
        raise SingularFisherError("Fisher information matrix is singular")
    return float(math.sqrt(np.linalg.inv(F)[0, 0]))
