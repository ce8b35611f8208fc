"""CSV/JSON serialization of images, fits, sweeps and spectra.

Floats are written with ``repr`` so that every value round-trips exactly.
All writers go through :func:`atomic_write_text`.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .fit import CSV_COLUMNS, FitResult
from .synth import PixelGrid, ScanImage

SWEEP_COLUMNS = ("swept_param", "value", "model", "sigma_x_nm", "sigma_x_stderr_nm",
                 "n_converged", "n_failed", "seed")


def atomic_write_text(path, text: str) -> Path:
    """Write ``text`` to a temporary file next to ``path``, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# --- images -----------------------------------------------------------------

def image_to_csv(image: ScanImage) -> str:
    g = image.grid
    head = {
        "pixel_size": g.pixel_size, "origin_x": g.origin_x, "origin_y": g.origin_y,
        "n_x": g.n_x, "n_y": g.n_y, "kind": image.kind,
        "total_photons": "" if image.total_photons is None else image.total_photons,
        "units": "nm",
    }
    lines = [f"# {k}={_fmt(v)}" for k, v in head.items()]
    integer = image.kind == "sampled"
    for row in image.values:
        lines.append(",".join(str(int(v)) if integer else repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def image_from_csv(text: str) -> ScanImage:
    meta = {}
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        else:
            rows.append(line.split(","))
    try:
        grid = PixelGrid(float(meta["pixel_size"]), int(meta["n_x"]), int(meta["n_y"]),
                         float(meta["origin_x"]), float(meta["origin_y"]))
        kind = meta["kind"]
    except KeyError as exc:
        raise ValueError(f"image CSV header lacks {exc.args[0]!r}") from None
    if kind == "sampled":
        values = np.array([[int(v) for v in r] for r in rows], dtype=np.int64)
    else:
        values = np.array([[float(v) for v in r] for r in rows], dtype=float)
    total = meta.get("total_photons", "")
    return ScanImage(grid, values, kind, int(total) if total else None)


def image_to_json(image: ScanImage) -> str:
    g = image.grid
    d = {
        "grid": {"pixel_size": g.pixel_size, "n_x": g.n_x, "n_y": g.n_y,
                 "origin_x": g.origin_x, "origin_y": g.origin_y},
        "kind": image.kind,
        "total_photons": image.total_photons,
        "units": "nm",
        "values": image.values.tolist(),
        "meta": image.meta,
    }
    return json.dumps(d, indent=1) + "\n"


def image_from_json(text: str) -> ScanImage:
    d = json.loads(text)
    grid = PixelGrid(**d["grid"])
    dtype = np.int64 if d["kind"] == "sampled" else float
    return ScanImage(grid, np.array(d["values"], dtype=dtype), d["kind"], d.get("total_photons"),
                     d.get("meta") or {})


def load_image(path) -> ScanImage:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return image_from_json(text)
    return image_from_csv(text)


# --- fits -------------------------------------------------------------------

def fit_to_json(result: FitResult) -> str:
    return json.dumps(result.to_dict(), indent=1) + "\n"


def fit_from_json(text: str) -> FitResult:
    return FitResult.from_dict(json.loads(text))


def fits_to_csv(results, seeds) -> str:
    return _csv(CSV_COLUMNS, [r.csv_row(s) for r, s in zip(results, seeds)])


# --- sweeps -----------------------------------------------------------------

def sweep_to_csv(sweep) -> str:
    rows = [(sweep.swept_param, r.value, r.model, r.sigma_x, r.sigma_x_stderr,
             r.n_converged, r.n_failed, sweep.seed) for r in sweep.rows]
    return _csv(SWEEP_COLUMNS, rows)


def sweep_to_json(sweep) -> str:
    d = {
        "swept_param": sweep.swept_param,
        "seed": sweep.seed,
        "config_hash": sweep.config_hash,
        "config": sweep.config,
        "rows": [
            {"value": r.value, "model": r.model, "sigma_x_nm": r.sigma_x,
             "sigma_x_stderr_nm": r.sigma_x_stderr, "sigma_y_nm": r.sigma_y,
             "sigma_y_stderr_nm": r.sigma_y_stderr, "n_converged": r.n_converged,
             "n_failed": r.n_failed}
            for r in sweep.rows
        ],
    }
    return json.dumps(d, indent=1, allow_nan=True) + "\n"


# --- spectra ----------------------------------------------------------------

def trace_to_csv(spec) -> str:
    return _csv(("amplitude", "signal"), zip(spec.amplitudes, spec.signal))


def spectrum_to_csv(spec) -> str:
    is_peak = np.zeros(spec.frequencies.size, dtype=int)
    is_peak[spec.peak_bins] = 1
    return _csv(("frequency", "magnitude", "is_peak"), zip(spec.frequencies, spec.magnitudes, is_peak))


def peaks_to_csv(spec, distances=None) -> str:
    if distances is None:
        distances = [float("nan")] * len(spec.peak_frequencies)
    return _csv(("frequency", "magnitude", "distance_nm"),
                zip(spec.peak_frequencies, spec.peak_magnitudes, distances))


def spectrum_to_json(spec, distances=None) -> str:
    d = {
        "units": {"amplitude": "reference field", "frequency": "cycles per unit amplitude",
                  "distance": "nm"},
        "amplitudes": spec.amplitudes.tolist(),
        "signal": spec.signal.tolist(),
        "frequencies": spec.frequencies.tolist(),
        "magnitudes": spec.magnitudes.tolist(),
        "peaks": [{"frequency": float(f), "magnitude": float(m)}
                  for f, m in zip(spec.peak_frequencies, spec.peak_magnitudes)],
        "distances_nm": None if distances is None else [float(x) for x in distances],
    }
    return json.dumps(d) + "\n"


# --- gnuplot ----------------------------------------------------------------

def gnuplot_script(csv_name: str, title: str, xlabel: str, ylabel: str, series: list[str],
                   logscale: bool = False) -> str:
    """Plain-text gnuplot script plotting columns of ``csv_name``.

    ``series`` holds gnuplot ``using`` clauses such as ``"1:2 with lines"``.
    """
    out = [
        "set datafile separator ','",
        "set datafile commentschars '#'",
        f"set title '{title}'",
        f"set xlabel '{xlabel}'",
        f"set ylabel '{ylabel}'",
    ]
    if logscale:
        out.append("set logscale xy")
    plots = ", ".join(f"'{csv_name}' every ::1 using {s}" for s in series)
    out.append(f"plot {plots}")
    return "\n".join(out) + "\n"
