"""Command-line front end.

Units: lengths in nm, pulse areas in rad, spectral frequencies in cycles per
unit drive amplitude (drive amplitude 1 = reference field).

Exit status: 0 success, 1 computational failure, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fit import MODEL_KINDS, FitOptions, SingularFisherError, crlb_sigma, fit_image, initial_guess
from .io import (
    atomic_write_text,
    fit_to_json,
    fits_to_csv,
    gnuplot_script,
    image_to_csv,
    image_to_json,
    load_image,
    peaks_to_csv,
    spectrum_to_csv,
    spectrum_to_json,
    sweep_to_csv,
    sweep_to_json,
    trace_to_csv,
)
from .model import Emitter, PulseParams, peak_area, w0_from_fwhm
from .study import (
    DEFAULT_SEED,
    FOUR_EMITTER_FIXTURE,
    PHOTON_VALUES,
    PIXEL_VALUES,
    StudyConfig,
    crossover_area,
    default_area_values,
    run_accuracy,
    spectrum_distances,
    sweep_exponent,
    undulation_intervals,
)
from .synth import build_grid, corim_model, linear_model, random_center, render_expected, sample_image

log = logging.getLogger("corim")

OUTPUT_ENV = "CORIM_OUTPUT_DIR"
COMMANDS = ("render", "sample", "fit", "crlb", "study-photons", "study-area", "study-pixel", "spectrum")


class ConfigError(Exception):
    pass


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _point(v):
    return isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(c, (int, float)) for c in v)


def _emitters(v):
    return isinstance(v, list) and len(v) > 0 and all(
        isinstance(e, (list, tuple)) and len(e) in (2, 3) and all(isinstance(c, (int, float)) for c in e)
        for e in v)


# key -> (type, default, check, description)
CONFIG_KEYS = {
    "fwhm_nm": (float, 300.0, _positive, "FWHM of the focal field envelope (nm)"),
    "pixel_size_nm": (float, 50.0, _positive, "pixel size (nm)"),
    "n_photons": (int, 200, lambda v: v >= 1, "detected photons per image"),
    "rabi_parameter": (float, 100.0, _nonneg, "Rabi parameter u; u=100 gives peak area 6.2 pi"),
    "n_runs": (int, 500, lambda v: v >= 2, "Monte Carlo runs per swept value"),
    "seed": (int, DEFAULT_SEED, _nonneg, "master random seed"),
    "jobs": (int, 1, lambda v: v >= 1, "worker processes for studies"),
    "pulse_duration_ns": (float, 4.0, _positive, "pulse duration (ns)"),
    "values": (list, None, lambda v: len(v) > 0 and all(isinstance(x, (int, float)) for x in v),
               "swept values (default depends on the study)"),
    "models": (list, list(MODEL_KINDS), lambda v: len(v) > 0 and all(m in MODEL_KINDS for m in v),
               "models to compare"),
    "multistart": (bool, False, None, "also start fits from the four central pixel centers"),
    "model": (str, "corim", lambda v: v in MODEL_KINDS, "model for render/sample/fit/crlb"),
    "emitters": (list, None, _emitters, "emitters as [x, y] or [x, y, detuning]"),
    "center": (list, None, _point, "emitter/start center [x, y] (nm)"),
    "image": (str, None, None, "image file (CSV or JSON) to fit"),
    "pixel": (list, [0.0, 0.0], _point, "probe pixel [x, y] for the spectrum (nm)"),
    "amplitude_max": (float, 40.0, _positive, "largest drive amplitude of the field sweep"),
    "n_samples": (int, 2048, lambda v: v >= 8, "samples of the field sweep"),
    "prominence": (float, 0.05, lambda v: 0 < v < 1, "peak prominence, fraction of largest line"),
    "figures": (bool, True, None, "render PNG figures next to the CSV files"),
}


def _coerce(key, value):
    typ, _, check, _ = CONFIG_KEYS[key]
    if value is None:
        return None
    try:
        if typ is float:
            if isinstance(value, bool):
                raise TypeError
            value = float(value)
        elif typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            value = int(value)
        elif typ is bool:
            if not isinstance(value, bool):
                raise TypeError
        elif typ is str:
            if not isinstance(value, str):
                raise TypeError
        elif typ is list:
            if not isinstance(value, (list, tuple)):
                raise TypeError
            value = [list(v) if isinstance(v, tuple) else v for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"bad type for {key!r}: {value!r} (expected {typ.__name__})") from None
    if check is not None and not check(value):
        raise ConfigError(f"value out of range for {key!r}: {value!r}")
    return value


def parse_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve defaults, then the JSON file at ``path``, then ``overrides``."""
    cfg = {k: v[1] for k, v in CONFIG_KEYS.items()}
    layers = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config file {p}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"malformed config file {p}: top level must be an object")
        layers.append(data)
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, "config": cfg}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# --- commands -----------------------------------------------------------------

class Outputs:
    def __init__(self, out_dir: Path, figures: bool):
        self.dir = out_dir
        self.figures = figures
        self.files: list[str] = []

    def text(self, name, text):
        atomic_write_text(self.dir / name, text)
        self.files.append(name)

    def figure(self, name, func, *args, **kwargs):
        if not self.figures:
            return
        tmp = self.dir / f".{name}.tmp.png"
        func(*args, tmp, **kwargs)
        os.replace(tmp, self.dir / name)
        self.files.append(name)


def _study_config(cfg, swept, values) -> StudyConfig:
    return StudyConfig(
        models=tuple(cfg["models"]), fwhm=cfg["fwhm_nm"], pixel_size=cfg["pixel_size_nm"],
        n_photons=cfg["n_photons"], rabi_parameter=cfg["rabi_parameter"], n_runs=cfg["n_runs"],
        seed=cfg["seed"], swept_param=swept, values=tuple(values),
        pulse_duration=cfg["pulse_duration_ns"], multistart=cfg["multistart"], jobs=cfg["jobs"])


def _emitter_list(cfg, default):
    if cfg["emitters"] is None:
        return list(default)
    return [Emitter(e[0], e[1], detuning=e[2] if len(e) == 3 else 0.0) for e in cfg["emitters"]]


def _single_emitter_image(cfg):
    grid = build_grid(cfg["pixel_size_nm"])
    if cfg["center"] is not None:
        default = [Emitter(*cfg["center"])]
    else:
        default = [Emitter(*random_center(grid, cfg["seed"]))]
    emitters = _emitter_list(cfg, default)
    w0 = w0_from_fwhm(cfg["fwhm_nm"])
    if cfg["model"] == "corim":
        model = corim_model(emitters, PulseParams(cfg["pulse_duration_ns"], cfg["rabi_parameter"]), w0)
    else:
        model = linear_model(emitters, w0)
    image = render_expected(model, grid)
    image.meta = {"model": cfg["model"], "emitters": [[e.x0, e.y0, e.detuning] for e in emitters]}
    return image


def _write_image(out: Outputs, stem, image):
    from .plotting import plot_image, plot_line_cut

    out.text(f"{stem}.csv", image_to_csv(image))
    out.text(f"{stem}.json", image_to_json(image))
    out.text(f"{stem}.gp", "set datafile separator ','\nset datafile commentschars '#'\n"
             f"plot '{stem}.csv' matrix with image\n")
    out.figure(f"{stem}.png", plot_image, image)
    out.figure(f"{stem}_cut.png", plot_line_cut, image)


def cmd_render(cfg, out: Outputs) -> int:
    _write_image(out, "render", _single_emitter_image(cfg))
    return 0


def cmd_sample(cfg, out: Outputs) -> int:
    expected = _single_emitter_image(cfg)
    image = sample_image(expected, cfg["n_photons"], cfg["seed"])
    image.meta = expected.meta
    _write_image(out, "sample", image)
    return 0


def cmd_fit(cfg, out: Outputs) -> int:
    if cfg["image"] is None:
        raise ConfigError("fit needs an image (--image or config key 'image')")
    path = Path(cfg["image"])
    if not path.is_file():
        raise ConfigError(f"image file not found: {path}")
    try:
        image = load_image(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from None
    kind = cfg["model"]
    init = initial_guess(image, kind, cfg["center"], cfg["fwhm_nm"], cfg["rabi_parameter"])
    result = fit_image(image, kind, init, FitOptions(multistart=cfg["multistart"]))
    out.text("fit.json", fit_to_json(result))
    out.text("fit.csv", fits_to_csv([result], [cfg["seed"]]))
    print(f"{kind}: x0={result.x0:.3f} nm y0={result.y0:.3f} nm converged={result.converged} "
          f"({result.status}, {result.iterations} iterations)")
    return 0 if result.converged else 1


def cmd_crlb(cfg, out: Outputs) -> int:
    grid = build_grid(cfg["pixel_size_nm"])
    cx, cy = cfg["center"] if cfg["center"] is not None else grid.center
    rows = []
    for kind in cfg["models"]:
        params = {"x0": cx, "y0": cy, "amplitude": 1.0, "w0": w0_from_fwhm(cfg["fwhm_nm"]),
                  "A_peak": peak_area(cfg["rabi_parameter"])}
        try:
            sigma = crlb_sigma(kind, params, grid, cfg["n_photons"])
        except SingularFisherError as exc:
            log.error("%s: %s", kind, exc)
            return 1
        rows.append({"model": kind, "crlb_sigma_x_nm": sigma})
        print(f"{kind}: CRLB sigma_x = {sigma:.4f} nm")
    out.text("crlb.csv", "model,crlb_sigma_x_nm\n" + "".join(f"{r['model']},{r['crlb_sigma_x_nm']!r}\n" for r in rows))
    out.text("crlb.json", json.dumps(rows, indent=1) + "\n")
    return 0


def _write_sweep(out: Outputs, sweep, summary, logx=True):
    from .plotting import plot_sweep

    out.text("sweep.csv", sweep_to_csv(sweep))
    out.text("sweep.json", sweep_to_json(sweep))
    series = [f"2:(strcol(3) eq '{m}' ? $4 : 1/0):5 with yerrorbars title '{m}'" for m in sweep.config["models"]]
    out.text("sweep.gp", gnuplot_script("sweep.csv", f"sigma_x vs {sweep.swept_param}", sweep.swept_param,
                                        "sigma_x (nm)", series, logscale=logx))
    out.text("summary.json", json.dumps(summary, indent=1) + "\n")
    out.figure("sweep.png", plot_sweep, sweep, logx=logx)
    for r in sweep.rows:
        print(f"{sweep.swept_param}={r.value:g} {r.model:16s} sigma_x={r.sigma_x:.3f} "
              f"+- {r.sigma_x_stderr:.3f} nm  ({r.n_converged} ok, {r.n_failed} failed)")
    return 0 if any(r.n_converged for r in sweep.rows) else 1


def _exponents(sweep, lo=-np.inf, hi=np.inf):
    out = {}
    for m in sweep.config["models"]:
        try:
            slope, err = sweep_exponent(sweep, m, lo, hi)
            out[m] = {"exponent": slope, "stderr": err}
        except ValueError:
            out[m] = None
    return out


def cmd_study_photons(cfg, out: Outputs) -> int:
    sweep = run_accuracy(_study_config(cfg, "n_photons", cfg["values"] or PHOTON_VALUES))
    return _write_sweep(out, sweep, {"exponents": _exponents(sweep)})


def cmd_study_area(cfg, out: Outputs) -> int:
    sweep = run_accuracy(_study_config(cfg, "rabi_parameter", cfg["values"] or default_area_values()))
    summary = {"exponents_u_ge_100": _exponents(sweep, lo=100.0)}
    if set(MODEL_KINDS) <= set(sweep.config["models"]):
        summary["crossover_area_rad"] = crossover_area(sweep)
        summary["undulations"] = [{"from_rad": a, "to_rad": b, "non_monotone": n}
                                  for a, b, n in undulation_intervals(sweep)]
    return _write_sweep(out, sweep, summary, logx=False)


def cmd_study_pixel(cfg, out: Outputs) -> int:
    sweep = run_accuracy(_study_config(cfg, "pixel_size", cfg["values"] or PIXEL_VALUES))
    return _write_sweep(out, sweep, {"exponents": _exponents(sweep)})


def cmd_spectrum(cfg, out: Outputs) -> int:
    from .plotting import plot_spectrum

    emitters = _emitter_list(cfg, FOUR_EMITTER_FIXTURE)
    pulse = PulseParams(cfg["pulse_duration_ns"], cfg["rabi_parameter"])
    spec, distances = spectrum_distances(emitters, tuple(cfg["pixel"]), cfg["amplitude_max"],
                                         cfg["n_samples"], pulse, cfg["fwhm_nm"], cfg["prominence"])
    # distances are ordered like the frequencies that were invertible
    dist_by_peak = [float("nan")] * len(spec.peak_frequencies)
    usable = [i for i, f in enumerate(spec.peak_frequencies) if f <= pulse.peak_area / (2 * np.pi)]
    for i, d in zip(usable, distances):
        dist_by_peak[i] = float(d)
    out.text("trace.csv", trace_to_csv(spec))
    out.text("spectrum.csv", spectrum_to_csv(spec))
    out.text("peaks.csv", peaks_to_csv(spec, dist_by_peak))
    out.text("spectrum.json", spectrum_to_json(spec, dist_by_peak))
    out.text("trace.gp", gnuplot_script("trace.csv", "field sweep at probe pixel", "drive amplitude",
                                        "signal", ["1:2 with lines notitle"]))
    out.text("spectrum.gp", gnuplot_script("spectrum.csv", "Rabi spectrum", "frequency (cycles/amplitude)",
                                           "|DFT|", ["1:2 with lines notitle"]))
    out.figure("spectrum.png", plot_spectrum, spec)
    for f, d in zip(spec.peak_frequencies, dist_by_peak):
        print(f"line at {f:.5f} cycles/amplitude -> distance {d:.2f} nm")
    return 0 if len(spec.peak_frequencies) else 1


HANDLERS = {
    "render": cmd_render,
    "sample": cmd_sample,
    "fit": cmd_fit,
    "crlb": cmd_crlb,
    "study-photons": cmd_study_photons,
    "study-area": cmd_study_area,
    "study-pixel": cmd_study_pixel,
    "spectrum": cmd_spectrum,
}


def write_manifest(out: Outputs, command: str, cfg: dict):
    artifacts = [{"file": f, "sha256": hashlib.sha256((out.dir / f).read_bytes()).hexdigest()}
                 for f in out.files]
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "artifacts": artifacts,
        "version": __version__,
        "config_hash": config_hash(command, cfg),
    }
    atomic_write_text(out.dir / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    return manifest


def dispatch(command: str, cfg: dict, out_dir) -> int:
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    out = Outputs(Path(out_dir), cfg["figures"])
    out.dir.mkdir(parents=True, exist_ok=True)
    status = HANDLERS[command](cfg, out)
    write_manifest(out, command, cfg)
    return status


def replay(manifest_path, out_dir) -> int:
    """Re-run a manifest and compare the regenerated artifacts' hashes."""
    p = Path(manifest_path)
    if not p.is_file():
        raise ConfigError(f"manifest not found: {p}")
    try:
        manifest = json.loads(p.read_text())
        command, raw = manifest["command"], manifest["config"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise ConfigError(f"malformed manifest {p}") from None
    cfg = parse_config(overrides=raw)
    status = dispatch(command, cfg, out_dir)
    new = json.loads((Path(out_dir) / "manifest.json").read_text())
    old_hashes = {a["file"]: a["sha256"] for a in manifest.get("artifacts", [])}
    new_hashes = {a["file"]: a["sha256"] for a in new["artifacts"]}
    mismatched = [f for f, h in old_hashes.items() if f.endswith(".csv") and new_hashes.get(f) != h]
    for f in mismatched:
        print(f"MISMATCH {f}")
    if not mismatched:
        print(f"reproduced {sum(f.endswith('.csv') for f in old_hashes)} CSV artifacts bit-identically")
    return status if not mismatched else 1


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corim",
        description="Coherent Rabi imaging microscopy: simulation, localization and accuracy studies. "
                    "Lengths in nm, pulse areas in rad, spectral frequencies in cycles per unit drive "
                    "amplitude. Exit status 0 ok, 1 computational failure, 2 usage error.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with flat keys; flags override it")
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./corim-output/<command>)")
    common.add_argument("--seed", type=int, help=f"master seed (default {DEFAULT_SEED})")
    common.add_argument("--fwhm", type=float, dest="fwhm_nm", help="field FWHM in nm (default 300)")
    common.add_argument("--pixel-size", type=float, dest="pixel_size_nm", help="pixel size in nm (default 50)")
    common.add_argument("--photons", type=int, dest="n_photons", help="detected photons (default 200)")
    common.add_argument("--rabi", type=float, dest="rabi_parameter",
                        help="Rabi parameter u, u=100 <-> peak area 6.2 pi (default 100)")
    common.add_argument("--duration", type=float, dest="pulse_duration_ns", help="pulse duration in ns (default 4)")
    common.add_argument("--runs", type=int, dest="n_runs", help="Monte Carlo runs per value (default 500)")
    common.add_argument("--jobs", type=int, help="worker processes for studies (default 1)")
    common.add_argument("--values", type=_floats,
                        help="comma-separated swept values (default: 50..1600 photons, "
                             "0.25..8 pi areas, 10..200 nm pixels)")
    common.add_argument("--models", type=lambda s: s.split(","),
                        help="comma-separated models (default linear_gaussian,corim)")
    common.add_argument("--model", choices=MODEL_KINDS, help="model for render/sample/fit/crlb (default corim)")
    common.add_argument("--emitter", action="append", type=_floats, dest="emitters", metavar="X,Y[,DETUNING]",
                        help="emitter position in nm, repeatable (default: random center / four-emitter fixture)")
    common.add_argument("--center", type=_floats, help="emitter or fit start center X,Y in nm (default: random/centroid)")
    common.add_argument("--image", help="image file to fit (CSV or JSON)")
    common.add_argument("--pixel", type=_floats, help="probe pixel X,Y for the spectrum (default 0,0)")
    common.add_argument("--amplitude-max", type=float, dest="amplitude_max",
                        help="field sweep end, in reference-field units (default 40)")
    common.add_argument("--samples", type=int, dest="n_samples", help="field sweep samples (default 2048)")
    common.add_argument("--prominence", type=float, help="spectral peak prominence fraction (default 0.05)")
    common.add_argument("--multistart", action="store_true", default=None,
                        help="multi-start fits from the central pixel centers (default off)")
    common.add_argument("--no-figures", action="store_false", dest="figures", default=None,
                        help="skip PNG figures (default: figures on)")

    helps = {
        "render": "noise-free expected image",
        "sample": "shot-noise photon image",
        "fit": "localize an emitter in an image",
        "crlb": "Cramer-Rao bound on sigma_x",
        "study-photons": "accuracy vs detected photons",
        "study-area": "accuracy vs pulse area",
        "study-pixel": "accuracy vs pixel size",
        "spectrum": "multi-emitter Rabi spectrum at one pixel",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    rp = sub.add_parser("replay", help="re-run a manifest and check the CSV artifacts")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="output directory for the re-run")
    return parser


def _overrides(args) -> dict:
    keys = [k for k in CONFIG_KEYS if hasattr(args, k)]
    ov = {k: getattr(args, k) for k in keys}
    for k in ("center", "pixel"):
        if ov.get(k) is not None and len(ov[k]) != 2:
            raise ConfigError(f"--{k} needs exactly two numbers")
    return ov


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    default_out = Path(os.environ.get(OUTPUT_ENV, "corim-output")) / args.command
    out_dir = Path(args.out) if args.out else default_out
    try:
        if args.command == "replay":
            return replay(args.manifest, out_dir)
        cfg = parse_config(args.config, _overrides(args))
        return dispatch(args.command, cfg, out_dir)
    except ConfigError as exc:
        print(f"corim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
