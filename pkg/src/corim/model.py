"""Response model of a coherently driven two-level emitter under a scanned focus.

Conventions used throughout the package:

* lengths are in nanometres, pulse areas in radians, times in nanoseconds;
* the focal *field* is Gaussian, ``E = E0 exp(-r^2 / (2 w0^2))``, and the
  quoted FWHM is that of the field envelope, so ``w0 = FWHM / (2 sqrt(2 ln 2))``;
* the drive strength is given by the dimensionless Rabi parameter ``u``; the
  full pulse area at the reference field is ``6.2 pi * u / 100``;
* the emission probability is ``sin^2(A / 2)``, i.e. the sine argument is the
  half-area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_FWHM_NM = 300.0
DEFAULT_RABI_PARAMETER = 100.0
#: full pulse area at the reference field for ``u = 100``
REFERENCE_PEAK_AREA = 6.2 * math.pi

# DBATT constants; documented defaults only, not used by the idealized model
FLUORESCENCE_LIFETIME_NS = 9.5
LINEWIDTH_HZ = 17e6  # Gamma_1 / 2pi
PULSE_DURATION_NS = 4.0
REPETITION_RATE_HZ = 700e3

#: below this sine argument the damped term is evaluated by its series limit
SERIES_THRESHOLD = 1e-4


def w0_from_fwhm(fwhm: float) -> float:
    """Gaussian width parameter of a field envelope with the given FWHM."""
    if fwhm <= 0:
        raise ValueError(f"FWHM must be positive, got {fwhm}")
    return 0.5 * fwhm / math.sqrt(2.0 * math.log(2.0))


DEFAULT_W0_NM = w0_from_fwhm(DEFAULT_FWHM_NM)


def peak_area(rabi_parameter: float) -> float:
    """Full pulse area (rad) at the reference field for Rabi parameter ``u``."""
    if rabi_parameter < 0:
        raise ValueError(f"Rabi parameter must be non-negative, got {rabi_parameter}")
    return REFERENCE_PEAK_AREA * rabi_parameter / 100.0


def rabi_parameter_for_area(area: float) -> float:
    """Inverse of :func:`peak_area`."""
    return 100.0 * area / REFERENCE_PEAK_AREA


@dataclass(frozen=True)
class FocusField:
    """Gaussian focal field.

    ``center_x``/``center_y`` is the focus position. They may be numpy arrays
    of scan positions, in which case every derived quantity broadcasts.
    """

    center_x: float | np.ndarray = 0.0
    center_y: float | np.ndarray = 0.0
    peak_amplitude: float = 1.0
    w0: float = DEFAULT_W0_NM

    def __post_init__(self):
        if not self.w0 > 0:
            raise ValueError(f"w0 must be positive, got {self.w0}")
        if self.peak_amplitude < 0:
            raise ValueError(f"peak amplitude must be non-negative, got {self.peak_amplitude}")

    @classmethod
    def from_fwhm(cls, fwhm: float = DEFAULT_FWHM_NM, **kwargs) -> "FocusField":
        return cls(w0=w0_from_fwhm(fwhm), **kwargs)

    def moved_to(self, x, y) -> "FocusField":
        return FocusField(x, y, self.peak_amplitude, self.w0)


@dataclass(frozen=True)
class Emitter:
    """A point emitter.

    ``coupling_f`` scales the pulse area relative to the reference emitter
    (dipole strength times orientation factor). ``detuning`` is an angular
    frequency in rad/ns.
    """

    x0: float = 0.0
    y0: float = 0.0
    coupling_f: float = 1.0
    detuning: float = 0.0
    damping_a: float = 0.0

    def __post_init__(self):
        if self.coupling_f < 0:
            raise ValueError("coupling_f must be non-negative")
        if self.damping_a < 0:
            raise ValueError("damping_a must be non-negative")


@dataclass(frozen=True)
class PulseParams:
    duration_tp: float = PULSE_DURATION_NS
    rabi_parameter: float = DEFAULT_RABI_PARAMETER

    def __post_init__(self):
        if not self.duration_tp > 0:
            raise ValueError("pulse duration must be positive")
        if self.rabi_parameter < 0:
            raise ValueError("Rabi parameter must be non-negative")

    @property
    def peak_area(self) -> float:
        return peak_area(self.rabi_parameter)


@dataclass(frozen=True)
class BackgroundParams:
    """Coefficients of the damped response with backgrounds.

    With ``ideal=True`` the ``a * sqrt(I)`` divisor is replaced by 1, so that
    ``eta=1, b=c=r=0`` gives back the undamped ``sin^2`` law.
    """

    eta: float = 1.0
    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    r: float = 0.0
    ideal: bool = False

    def __post_init__(self):
        for name in ("eta", "a", "b", "c", "r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def field_at(focus: FocusField, x, y):
    """Field amplitude at point ``(x, y)`` for the focus centred at its center."""
    r2 = (np.subtract(x, focus.center_x)) ** 2 + (np.subtract(y, focus.center_y)) ** 2
    return focus.peak_amplitude * np.exp(-r2 / (2.0 * focus.w0**2))


def pulse_area(field, pulse: PulseParams, coupling_f: float = 1.0, reference_field: float = 1.0):
    """Pulse area (rad); linear in the field and in the Rabi parameter."""
    if np.any(np.asarray(field) < 0):
        raise ValueError("field amplitude must be non-negative")
    return coupling_f * pulse.peak_area * np.divide(field, reference_field)


def emission_probability(area):
    """Photon emission probability per pulse, ``sin^2(A/2)``."""
    return np.sin(0.5 * np.asarray(area, dtype=float)) ** 2


def _local_area(emitter: Emitter, focus: FocusField, pulse: PulseParams):
    return pulse_area(field_at(focus, emitter.x0, emitter.y0), pulse, emitter.coupling_f)


def psf_value(emitter: Emitter, focus: FocusField, pulse: PulseParams):
    """Resonant emission probability with the focus at ``focus.center``."""
    return emission_probability(_local_area(emitter, focus, pulse))


def detuned_probability(emitter: Emitter, focus: FocusField, pulse: PulseParams):
    """Generalized Rabi formula ``(W^2/W_eff^2) sin^2(W_eff t_p / 2)``.

    The resonant Rabi frequency is ``W = A / t_p`` from the local pulse area.
    """
    return detuned_probability_from_area(_local_area(emitter, focus, pulse),
                                         emitter.detuning, pulse.duration_tp)


def detuned_probability_from_area(area, detuning: float, duration_tp: float):
    """Excited-state population after a rectangular pulse of resonant area ``area``."""
    if detuning == 0:
        return emission_probability(area)
    omega = np.asarray(area, dtype=float) / duration_tp
    omega_eff2 = omega**2 + detuning**2
    # omega_eff2 can underflow to zero for subnormal inputs; no drive, no excitation
    weight = np.divide(omega**2, omega_eff2, out=np.zeros_like(omega_eff2), where=omega_eff2 > 0)
    return weight * np.sin(0.5 * np.sqrt(omega_eff2) * duration_tp) ** 2


def linear_response(emitter: Emitter, focus: FocusField):
    """Normalized linear (intensity-proportional) response, ``(E/E0)^2``."""
    if focus.peak_amplitude == 0:
        return np.zeros_like(np.asarray(focus.center_x, dtype=float))
    return (field_at(focus, emitter.x0, emitter.y0) / focus.peak_amplitude) ** 2


def damped_response(intensity, f: float, bg: BackgroundParams = BackgroundParams()):
    """Detected rate ``eta sin^2(f sqrt I)/(a sqrt I) + b sqrt I + c I + r``.

    The oscillating term uses its series limit ``f^2 sqrt(I) / a`` when
    ``f sqrt(I) < SERIES_THRESHOLD``; with ``bg.ideal`` the divisor is 1.
    """
    intensity = np.asarray(intensity, dtype=float)
    if np.any(intensity < 0):
        raise ValueError("intensity must be non-negative")
    root = np.sqrt(intensity)
    arg = f * root
    if bg.ideal:
        osc = np.sin(arg) ** 2
    else:
        if bg.a == 0:
            raise ValueError("damping a must be positive for the literal damped form")
        small = arg < SERIES_THRESHOLD
        safe_root = np.where(small, 1.0, root)
        osc = np.where(small, f * f * root / bg.a, np.sin(arg) ** 2 / (bg.a * safe_root))
    out = bg.eta * osc + bg.b * root + bg.c * intensity + bg.r
    return out if out.ndim else float(out)


def multi_emitter_response(emitters: Sequence[Emitter], focus: FocusField, pulse: PulseParams):
    """Incoherent sum of per-emitter emission probabilities."""
    if len(emitters) == 0:
        raise ValueError("at least one emitter is required")
    total = 0.0
    for em in emitters:
        total = total + detuned_probability(em, focus, pulse)
    return total


def ring_radii(full_area: float, w0: float = DEFAULT_W0_NM) -> np.ndarray:
    """Radii (nm) at which the resonant PSF reaches 1, innermost first.

    These are the radii where the local half-area equals an odd multiple of
    pi/2: ``r_k = w0 sqrt(2 ln(A / ((2k+1) pi)))``.
    """
    half = 0.5 * full_area
    k = np.arange(0, int(half / (0.5 * math.pi)) + 1)
    odd = (2 * k + 1) * 0.5 * math.pi
    odd = odd[odd <= half]
    return np.sort(w0 * np.sqrt(2.0 * np.log(half / odd)))
