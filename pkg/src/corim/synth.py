"""Pixel grids, noise-free scan images and shot-noise photon sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import (
    DEFAULT_W0_NM,
    BackgroundParams,
    Emitter,
    FocusField,
    PulseParams,
    damped_response,
    field_at,
    linear_response,
    multi_emitter_response,
)

#: extent of the region of interest around the emitter (nm)
REGION_SPAN_NM = 1000.0
MIN_PIXELS = 3

ResponseModel = Callable[[np.ndarray, np.ndarray], np.ndarray]


def make_rng(seed, *key: int) -> np.random.Generator:
    """Generator for the stream ``key`` under master ``seed``.

    Child streams are derived with :class:`numpy.random.SeedSequence` using
    ``spawn_key=key``, so e.g. ``make_rng(seed, run_index)`` is
    reproducible and independent of how runs are scheduled.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    else:
        ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class PixelGrid:
    """Square-pixel grid; ``origin`` is the center of pixel ``(0, 0)``.

    Images on this grid are indexed ``values[iy, ix]``.
    """

    pixel_size: float
    n_x: int
    n_y: int
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError(f"pixel size must be positive, got {self.pixel_size}")
        if self.n_x < MIN_PIXELS or self.n_y < MIN_PIXELS:
            raise ValueError(f"grid needs at least {MIN_PIXELS} pixels per axis")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def x_centers(self) -> np.ndarray:
        return self.origin_x + self.pixel_size * np.arange(self.n_x)

    @property
    def y_centers(self) -> np.ndarray:
        return self.origin_y + self.pixel_size * np.arange(self.n_y)

    @property
    def center(self) -> tuple[float, float]:
        return (
            self.origin_x + 0.5 * (self.n_x - 1) * self.pixel_size,
            self.origin_y + 0.5 * (self.n_y - 1) * self.pixel_size,
        )

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinate arrays ``(X, Y)`` of shape ``(n_y, n_x)``."""
        return np.meshgrid(self.x_centers, self.y_centers)

    def shifted(self, dx: float, dy: float) -> "PixelGrid":
        return PixelGrid(self.pixel_size, self.n_x, self.n_y, self.origin_x + dx, self.origin_y + dy)


def pixels_per_axis(pixel_size: float, span: float = REGION_SPAN_NM) -> int:
    n = max(math.ceil(span / pixel_size - 1e-9) + 2, MIN_PIXELS)
    return n + (n % 2)


def build_grid(pixel_size: float, center: tuple[float, float] = (0.0, 0.0),
               span: float = REGION_SPAN_NM) -> PixelGrid:
    """Smallest even grid covering ``span`` plus one pixel per side.

    The grid is centered on ``center``, which therefore lies on the common
    corner of the central 2x2 pixel block.
    """
    if not pixel_size > 0:
        raise ValueError(f"pixel size must be positive, got {pixel_size}")
    n = pixels_per_axis(pixel_size, span)
    half = 0.5 * (n - 1) * pixel_size
    return PixelGrid(pixel_size, n, n, center[0] - half, center[1] - half)


def random_center(grid: PixelGrid, rng_seed) -> tuple[float, float]:
    """Uniform position inside the central 2x2 pixel block."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed)
    cx, cy = grid.center
    dx, dy = rng.uniform(-grid.pixel_size, grid.pixel_size, size=2)
    return (float(cx + dx), float(cy + dy))


@dataclass
class ScanImage:
    grid: PixelGrid
    values: np.ndarray
    kind: str = "expected"
    total_photons: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("expected", "sampled"):
            raise ValueError(f"unknown image kind {self.kind!r}")
        self.values = np.asarray(self.values)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")
        if np.any(self.values < 0):
            raise ValueError("pixel values must be non-negative")
        if self.kind == "sampled":
            total = int(self.values.sum())
            if self.total_photons is None:
                self.total_photons = total
            elif total != self.total_photons:
                raise ValueError("sampled image counts do not sum to total_photons")


def corim_model(emitters: Sequence[Emitter], pulse: PulseParams = PulseParams(),
                w0: float = DEFAULT_W0_NM, peak_amplitude: float = 1.0) -> ResponseModel:
    """Scan-position response of one or several coherently driven emitters."""
    emitters = list(emitters)

    def model(x, y):
        return multi_emitter_response(emitters, FocusField(x, y, peak_amplitude, w0), pulse)

    return model


def linear_model(emitters: Sequence[Emitter], w0: float = DEFAULT_W0_NM) -> ResponseModel:
    """Conventional linear response: intensity ``(E/E0)^2`` summed over emitters."""
    emitters = list(emitters)

    def model(x, y):
        focus = FocusField(x, y, 1.0, w0)
        return sum(linear_response(em, focus) for em in emitters)

    return model


def damped_model(emitter: Emitter, bg: BackgroundParams = BackgroundParams(),
                 pulse: PulseParams = PulseParams(), w0: float = DEFAULT_W0_NM) -> ResponseModel:
    """Damped response with backgrounds for one emitter.

    The local intensity is the squared field (reference peak 1) and the sine
    argument at the reference peak is the half-area, so the ideal setting
    reproduces :func:`corim_model`. A positive ``emitter.damping_a`` takes
    precedence over ``bg.a``.
    """
    f = 0.5 * emitter.coupling_f * pulse.peak_area
    if emitter.damping_a > 0:
        bg = BackgroundParams(bg.eta, emitter.damping_a, bg.b, bg.c, bg.r, bg.ideal)

    def model(x, y):
        intensity = field_at(FocusField(x, y, 1.0, w0), emitter.x0, emitter.y0) ** 2
        return damped_response(intensity, f, bg)

    return model


def render_expected(model: ResponseModel, grid: PixelGrid) -> ScanImage:
    """Evaluate ``model`` at every pixel center."""
    X, Y = grid.coordinates()
    values = np.broadcast_to(np.asarray(model(X, Y), dtype=float), grid.shape).copy()
    return ScanImage(grid, values, "expected")


def sample_image(expected: ScanImage, n_photons: int, rng_seed) -> ScanImage:
    """Distribute ``n_photons`` over the pixels, multinomially by weight."""
    if n_photons < 1:
        raise ValueError("n_photons must be at least 1")
    weights = np.asarray(expected.values, dtype=float).ravel()
    total = weights.sum()
    if not total > 0:
        raise ValueError("expected image has no positive weight")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed)
    p = weights / total
    counts = rng.multinomial(int(n_photons), p)
    return ScanImage(expected.grid, counts.reshape(expected.grid.shape).astype(np.int64),
                     "sampled", int(n_photons))
