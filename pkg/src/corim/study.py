"""Monte Carlo accuracy studies and multi-emitter Rabi spectroscopy.

Every run is keyed by its run index only: run ``k`` of a study draws its
emitter position and photon image from ``make_rng(seed, k)``. Swept values
and the two model pipelines therefore share common random numbers, which
keeps comparisons between curves tight and makes any execution order give
identical statistics.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import signal, stats

from .fit import MODEL_KINDS, FitOptions, fit_image, initial_guess
from .model import (
    DEFAULT_FWHM_NM,
    DEFAULT_RABI_PARAMETER,
    PULSE_DURATION_NS,
    Emitter,
    PulseParams,
    detuned_probability_from_area,
    peak_area,
    w0_from_fwhm,
)
from .synth import build_grid, corim_model, linear_model, make_rng, random_center, render_expected, sample_image

DEFAULT_SEED = 20100915
PHOTON_VALUES = (50, 100, 200, 400, 800, 1600)
PIXEL_VALUES = (10, 20, 30, 50, 75, 100, 150, 200)
SWEEPABLE = ("n_photons", "rabi_parameter", "pixel_size")


@dataclass(frozen=True)
class StudyConfig:
    models: tuple = MODEL_KINDS
    fwhm: float = DEFAULT_FWHM_NM
    pixel_size: float = 50.0
    n_photons: int = 200
    rabi_parameter: float = DEFAULT_RABI_PARAMETER
    n_runs: int = 500
    seed: int = DEFAULT_SEED
    swept_param: str | None = None
    values: tuple = ()
    pulse_duration: float = PULSE_DURATION_NS
    multistart: bool = False
    jobs: int = 1

    def __post_init__(self):
        for m in self.models:
            if m not in MODEL_KINDS:
                raise ValueError(f"unknown model {m!r}")
        if self.fwhm <= 0 or self.pixel_size <= 0 or self.pulse_duration <= 0:
            raise ValueError("fwhm, pixel_size and pulse_duration must be positive")
        if self.n_photons < 1 or self.n_runs < 2:
            raise ValueError("need n_photons >= 1 and n_runs >= 2")
        if self.rabi_parameter < 0:
            raise ValueError("Rabi parameter must be non-negative")
        if self.swept_param is not None and self.swept_param not in SWEEPABLE:
            raise ValueError(f"cannot sweep {self.swept_param!r}; choose from {SWEEPABLE}")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    def point(self, value=None) -> "StudyConfig":
        """Configuration of a single swept value."""
        if self.swept_param is None or value is None:
            return self
        cast = int if self.swept_param == "n_photons" else float
        return replace(self, **{self.swept_param: cast(value)}, swept_param=None, values=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = list(self.models)
        d["values"] = list(self.values)
        return d

    def digest(self) -> str:
        """Hash of everything that determines the results (``jobs`` excluded)."""
        d = self.to_dict()
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SweepRow:
    value: float
    model: str
    sigma_x: float
    sigma_x_stderr: float
    sigma_y: float
    sigma_y_stderr: float
    n_converged: int
    n_failed: int
    errors_x: np.ndarray = field(repr=False, default=None)
    errors_y: np.ndarray = field(repr=False, default=None)


@dataclass
class SweepResult:
    swept_param: str
    rows: list
    seed: int
    config_hash: str
    config: dict

    @property
    def values(self) -> list:
        out = []
        for r in self.rows:
            if r.value not in out:
                out.append(r.value)
        return out

    def curve(self, model: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(values, sigma_x, stderr)`` for one model, in sweep order."""
        rows = [r for r in self.rows if r.model == model]
        return (np.array([r.value for r in rows], dtype=float),
                np.array([r.sigma_x for r in rows]),
                np.array([r.sigma_x_stderr for r in rows]))

    def row(self, value, model) -> SweepRow:
        for r in self.rows:
            if r.model == model and r.value == value:
                return r
        raise KeyError((value, model))


def _sigma(errors: np.ndarray) -> tuple[float, float]:
    n = errors.size
    if n < 2:
        return float("nan"), float("nan")
    s = float(np.std(errors, ddof=1))
    return s, s / math.sqrt(2.0 * (n - 1))


def simulate_run(model: str, cfg: StudyConfig, run_index: int) -> tuple[float, float, bool]:
    """One image + fit; returns the signed ``(dx, dy)`` error and convergence."""
    grid = build_grid(cfg.pixel_size)
    rng = make_rng(cfg.seed, run_index)
    cx, cy = random_center(grid, rng)
    w0 = w0_from_fwhm(cfg.fwhm)
    emitter = [Emitter(cx, cy)]
    if model == "corim":
        response = corim_model(emitter, PulseParams(cfg.pulse_duration, cfg.rabi_parameter), w0)
    else:
        response = linear_model(emitter, w0)
    image = sample_image(render_expected(response, grid), cfg.n_photons, rng)
    init = initial_guess(image, model, (cx, cy), cfg.fwhm, cfg.rabi_parameter)
    result = fit_image(image, model, init, FitOptions(multistart=cfg.multistart))
    return result.x0 - cx, result.y0 - cy, result.converged


def _run_block(args):
    model, cfg, start, stop = args
    return [simulate_run(model, cfg, k) for k in range(start, stop)]


def _pipeline_key(model: str, cfg: StudyConfig) -> tuple:
    # the linear pipeline does not depend on the drive strength
    u = cfg.rabi_parameter if model == "corim" else None
    return (model, cfg.fwhm, cfg.pixel_size, cfg.n_photons, u, cfg.pulse_duration, cfg.multistart)


def run_accuracy(config: StudyConfig) -> SweepResult:
    """Localization error statistics for every swept value and model."""
    values = list(config.values) if config.swept_param else [None]
    points = [(v, m, config.point(v)) for v in values for m in config.models]

    unique = {}
    for _, m, cfg in points:
        unique.setdefault(_pipeline_key(m, cfg), (m, cfg))

    chunk = max(1, math.ceil(config.n_runs / (4 * config.jobs)))
    tasks = []
    for key, (m, cfg) in unique.items():
        for start in range(0, config.n_runs, chunk):
            tasks.append((key, (m, cfg, start, min(start + chunk, config.n_runs))))

    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            outputs = list(pool.map(_run_block, [t[1] for t in tasks]))
    else:
        outputs = [_run_block(t[1]) for t in tasks]

    collected = {key: [] for key in unique}
    for (key, _), out in zip(tasks, outputs):
        collected[key].extend(out)

    rows = []
    for v, m, cfg in points:
        runs = collected[_pipeline_key(m, cfg)]
        ok = np.array([c for _, _, c in runs], dtype=bool)
        ex = np.array([dx for dx, _, _ in runs])[ok]
        ey = np.array([dy for _, dy, _ in runs])[ok]
        sx, sxe = _sigma(ex)
        sy, sye = _sigma(ey)
        value = float("nan") if v is None else float(v)
        rows.append(SweepRow(value, m, sx, sxe, sy, sye, int(ok.sum()), int((~ok).sum()), ex, ey))

    return SweepResult(config.swept_param or "none", rows, config.seed, config.digest(), config.to_dict())


def sweep_photons(config: StudyConfig = StudyConfig(), values: Sequence[int] = PHOTON_VALUES) -> SweepResult:
    return run_accuracy(replace(config, swept_param="n_photons", values=tuple(int(v) for v in values)))


def sweep_pulse_area(config: StudyConfig = StudyConfig(), values: Sequence[float] | None = None) -> SweepResult:
    """Sweep the Rabi parameter ``u``; by default full areas 0.25 pi ... 8 pi."""
    if values is None:
        values = default_area_values()
    return run_accuracy(replace(config, swept_param="rabi_parameter", values=tuple(float(v) for v in values)))


def sweep_pixel_size(config: StudyConfig = StudyConfig(), values: Sequence[float] = PIXEL_VALUES) -> SweepResult:
    return run_accuracy(replace(config, swept_param="pixel_size", values=tuple(float(v) for v in values)))


def default_area_values() -> list[float]:
    """Rabi parameters for full pulse areas 0.25 pi, 0.5 pi, ..., 8 pi."""
    return [round(100.0 * k / 4.0 / 6.2, 6) for k in range(1, 33)]


def scaling_exponent(x, y) -> tuple[float, float]:
    """Slope of ``log y`` against ``log x`` and its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise ValueError("need at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0) or not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("values must be positive and finite")
    fit = stats.linregress(np.log(x), np.log(y))
    return float(fit.slope), float(fit.stderr)


def sweep_exponent(sweep: SweepResult, model: str, lo: float = -np.inf, hi: float = np.inf) -> tuple[float, float]:
    """Power-law exponent of ``sigma_x`` against the swept value on ``[lo, hi]``."""
    v, s, _ = sweep.curve(model)
    keep = (v >= lo) & (v <= hi)
    return scaling_exponent(v[keep], s[keep])


def crossover_area(sweep: SweepResult) -> float:
    """Full pulse area beyond which CORIM stays more accurate than Gaussian fitting.

    Linearly interpolated between the last swept point where CORIM is worse
    and the next one. Returns ``nan`` if CORIM never wins at the end of the
    sweep.
    """
    u, s_c, _ = sweep.curve("corim")
    _, s_g, _ = sweep.curve("linear_gaussian")
    areas = np.array([peak_area(x) for x in u])
    diff = s_c - s_g
    if diff[-1] >= 0:
        return float("nan")
    worse = np.nonzero(diff >= 0)[0]
    if worse.size == 0:
        return float(areas[0])
    i = worse[-1]
    t = diff[i] / (diff[i] - diff[i + 1])
    return float(areas[i] + t * (areas[i + 1] - areas[i]))


def opening_areas(max_area: float) -> np.ndarray:
    """Full pulse areas where the central spot opens: odd multiples of pi."""
    k = np.arange(0, int(max_area / math.pi) + 1)
    odd = (2 * k + 1) * math.pi
    return odd[odd <= max_area * (1.0 + 1e-6)]


def undulation_intervals(sweep: SweepResult) -> list[tuple[float, float, bool]]:
    """For each pair of consecutive openings inside the sweep, whether the
    CORIM ``sigma_x`` curve is non-monotone between them (inclusive)."""
    u, s, _ = sweep.curve("corim")
    areas = np.array([peak_area(x) for x in u])
    openings = opening_areas(areas.max())
    out = []
    for a, b in zip(openings[:-1], openings[1:]):
        # swept u values are rounded, so match the openings relatively
        tol = 1e-6 * b
        sel = (areas >= a - tol) & (areas <= b + tol)
        d = np.diff(s[sel])
        nonmono = bool(np.any(d > 0) and np.any(d < 0))
        out.append((float(a), float(b), nonmono))
    return out


# --- multi-emitter Rabi spectroscopy ---------------------------------------

#: four resonant emitters at distinct distances from the probe pixel at (0, 0)
FOUR_EMITTER_FIXTURE = tuple(
    Emitter(d * math.cos(math.radians(phi)), d * math.sin(math.radians(phi)))
    for d, phi in ((40.0, 0.0), (75.0, 100.0), (110.0, 200.0), (145.0, 290.0))
)


@dataclass
class SpectrumResult:
    amplitudes: np.ndarray
    signal: np.ndarray
    frequencies: np.ndarray = None
    magnitudes: np.ndarray = None
    peak_frequencies: np.ndarray = None
    peak_magnitudes: np.ndarray = None
    peak_bins: np.ndarray = None


def reference_frequency(pulse: PulseParams = PulseParams(), coupling_f: float = 1.0) -> float:
    """Line frequency (cycles per unit drive amplitude) of an emitter on the probe pixel.

    ``sin^2(k E) = 1/2 - cos(2 k E)/2`` with ``k = coupling * A_peak / 2``.
    """
    return coupling_f * pulse.peak_area / (2.0 * math.pi)


def field_sweep_at_pixel(emitters: Sequence[Emitter], pixel: tuple[float, float], amplitudes,
                         pulse: PulseParams = PulseParams(), w0: float = w0_from_fwhm(DEFAULT_FWHM_NM)
                         ) -> SpectrumResult:
    """Summed emitter response at a fixed focus position versus drive amplitude."""
    amplitudes = np.asarray(amplitudes, dtype=float)
    if len(emitters) == 0:
        raise ValueError("at least one emitter is required")
    if amplitudes.ndim != 1 or amplitudes.size < 2:
        raise ValueError("amplitude axis must be a 1-d array")
    steps = np.diff(amplitudes)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
        raise ValueError("amplitude axis must be uniform")
    total = np.zeros_like(amplitudes)
    for em in emitters:
        d2 = (em.x0 - pixel[0]) ** 2 + (em.y0 - pixel[1]) ** 2
        kappa = em.coupling_f * pulse.peak_area * math.exp(-d2 / (2.0 * w0**2))
        total += detuned_probability_from_area(kappa * amplitudes, em.detuning, pulse.duration_tp)
    return SpectrumResult(amplitudes, total)


def _parabolic_vertex(y, i) -> tuple[float, float]:
    a, b, c = y[i - 1], y[i], y[i + 1]
    denom = a - 2.0 * b + c
    if denom == 0:
        return float(i), float(b)
    offset = 0.5 * (a - c) / denom
    return i + offset, b - 0.25 * (a - c) * offset


def rabi_spectrum(trace: SpectrumResult, prominence: float = 0.05, zero_pad: int = 8) -> SpectrumResult:
    """Hann-windowed magnitude spectrum of a field sweep with peak detection.

    Peaks need a prominence of at least ``prominence`` times the largest
    magnitude; their frequencies are refined by a parabola through the log
    magnitudes of the three bins around each maximum.
    """
    amp = np.asarray(trace.amplitudes, dtype=float)
    y = np.asarray(trace.signal, dtype=float)
    if y.size < 8:
        raise ValueError("need at least 8 samples")
    step = amp[1] - amp[0]
    windowed = (y - y.mean()) * np.hanning(y.size)
    n_fft = int(zero_pad) * y.size
    mags = np.abs(np.fft.rfft(windowed, n_fft))
    freqs = np.fft.rfftfreq(n_fft, d=step)
    bins, _ = signal.find_peaks(mags, prominence=prominence * mags.max())
    bins = bins[(bins > 0) & (bins < mags.size - 1)]
    logm = np.log(np.maximum(mags, 1e-300))
    pf, pm = [], []
    for b in bins:
        pos, peak_log = _parabolic_vertex(logm, b)
        pf.append(pos * (freqs[1] - freqs[0]))
        pm.append(math.exp(peak_log))
    order = np.argsort(pf)
    return SpectrumResult(amp, y, freqs, mags, np.array(pf)[order], np.array(pm)[order], bins[order])


def frequencies_to_distances(frequencies, reference: float, w0: float = w0_from_fwhm(DEFAULT_FWHM_NM)) -> np.ndarray:
    """Radial emitter-to-pixel distances from resonant line frequencies."""
    f = np.asarray(frequencies, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequencies must be positive")
    if np.any(f > reference):
        raise ValueError("line frequency above the on-pixel reference implies a negative squared distance")
    return w0 * np.sqrt(2.0 * np.log(reference / f))


def spectrum_distances(emitters: Sequence[Emitter] = FOUR_EMITTER_FIXTURE, pixel=(0.0, 0.0),
                       amplitude_max: float = 40.0, n_samples: int = 2048,
                       pulse: PulseParams = PulseParams(), fwhm: float = DEFAULT_FWHM_NM,
                       prominence: float = 0.05) -> tuple[SpectrumResult, np.ndarray]:
    """Field sweep, spectrum and inverted distances (largest distance first)."""
    w0 = w0_from_fwhm(fwhm)
    amplitudes = np.arange(n_samples) * (amplitude_max / n_samples)
    spec = rabi_spectrum(field_sweep_at_pixel(emitters, pixel, amplitudes, pulse, w0), prominence)
    ref = reference_frequency(pulse)
    usable = spec.peak_frequencies[spec.peak_frequencies <= ref]
    return spec, frequencies_to_distances(usable, ref, w0)
