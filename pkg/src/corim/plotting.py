"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import peak_area  # noqa: E402

COLORS = {"linear_gaussian": "tab:red", "corim": "tab:blue"}
LABELS = {"linear_gaussian": "Gaussian fit", "corim": "CORIM fit"}

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.linewidth": 0.8,
    "lines.linewidth": 1.4,
    "savefig.dpi": 150,
}

# keep PNGs byte-stable across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_image(image, path, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        g = image.grid
        half = 0.5 * g.pixel_size
        extent = (g.x_centers[0] - half, g.x_centers[-1] + half,
                  g.y_centers[0] - half, g.y_centers[-1] + half)
        im = ax.imshow(image.values, origin="lower", extent=extent, cmap="magma", interpolation="nearest")
        fig.colorbar(im, ax=ax, label="counts" if image.kind == "sampled" else "emission probability")
        ax.set_xlabel("x (nm)")
        ax.set_ylabel("y (nm)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_line_cut(image, path):
    """Row through the image center, as a line scan."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        row = image.values[image.grid.n_y // 2]
        ax.plot(image.grid.x_centers, row, drawstyle="steps-mid", color="k")
        ax.set_xlabel("x (nm)")
        ax.set_ylabel("signal")
        return _save(fig, path)


def plot_sweep(sweep, path, xlabel=None, logx=True, logy=True):
    """sigma_x with +-1 standard error per model against the swept value."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.4))
        for model in sweep.config["models"]:
            v, s, e = sweep.curve(model)
            if sweep.swept_param == "rabi_parameter":
                v = np.array([peak_area(u) for u in v]) / math.pi
            ax.errorbar(v, s, yerr=e, color=COLORS.get(model), label=LABELS.get(model, model),
                        marker="o", ms=3, capsize=2)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        default = {"n_photons": "detected photons", "pixel_size": "pixel size (nm)",
                   "rabi_parameter": "full pulse area (units of pi)"}
        ax.set_xlabel(xlabel or default.get(sweep.swept_param, sweep.swept_param))
        ax.set_ylabel(r"$\sigma_x$ (nm)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_spectrum(spec, path):
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(4.8, 5.0))
        ax1.plot(spec.amplitudes, spec.signal, color="k", lw=0.8)
        ax1.set_xlabel("drive amplitude (reference field units)")
        ax1.set_ylabel("signal")
        ax2.plot(spec.frequencies, spec.magnitudes, color="tab:blue")
        ax2.plot(spec.peak_frequencies, spec.peak_magnitudes, "v", color="tab:red")
        top = spec.peak_frequencies.max() * 1.5 if spec.peak_frequencies.size else spec.frequencies[-1]
        ax2.set_xlim(0, top)
        ax2.set_xlabel("frequency (cycles per unit amplitude)")
        ax2.set_ylabel("|DFT|")
        fig.tight_layout()
        return _save(fig, path)
