"""Command-line entry point.

Every command writes into a run directory named after a hash of its inputs
and flags, so rerunning a command reproduces the same directory and the
same bytes. Exit codes: 0 ok, 2 invalid input, 3 training failure,
4 unreadable or incompatible artifact.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import eval as ev
from . import interpret as it
from . import svi
from .errors import ArtifactError, DataValidationError, DegenerateDataError, EvpoiError, ParameterError, TrainingError
from .geodata import (DEFAULT_TAG_MAP, StationSchema, build_dataset, dataset_json, load_dataset,
                      load_stations, load_tag_map)
from .gpmodel import ModelSpec, load_model, predict, save_model
from .synth import SynthConfig, synth_generate, truth_json, write_raw_inputs

EXIT_INPUT = 2
EXIT_TRAINING = 3
EXIT_ARTIFACT = 4


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# plumbing


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_dir(out: str, command: str, inputs: dict, flags: dict) -> Path:
    """``<out>/<command>-<hash>``; the hash covers input file contents and flags."""
    h = hashlib.sha256()
    h.update(command.encode())
    for k in sorted(inputs):
        if inputs[k] is not None:
            h.update(f"{k}={_file_digest(inputs[k])}\n".encode())
    h.update(json.dumps(flags, sort_keys=True, default=str).encode())
    d = Path(out) / f"{command}-{h.hexdigest()[:12]}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag names with underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataValidationError([f"config line {n}: expected 'key = value', got {raw!r}"])
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise DataValidationError([f"not a boolean: {value!r}"])
    if isinstance(like, int) and not isinstance(like, bool):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if value.lower() == "none":
        return None
    if like is None:
        # flags without a typed default, such as --m, are numeric when they parse
        for cast in (int, float):
            try:
                return cast(value)
            except ValueError:
                pass
    return value


def apply_config(params: dict, config_path) -> dict:
    """Config-file values override flag values; unknown keys are errors."""
    if not config_path:
        return params
    conf = read_config(config_path)
    out = dict(params)
    for k, v in conf.items():
        if k not in params or k == "config":
            raise DataValidationError([f"unknown config key {k!r}"])
        try:
            out[k] = _coerce(v, params[k])
        except ValueError as exc:
            raise DataValidationError([f"config key {k!r}: {exc}"])
    return out


def _fail(exc: Exception) -> int:
    if isinstance(exc, DataValidationError):
        click.echo("input validation failed:", err=True)
        for e in exc.errors:
            click.echo(f"  {e}", err=True)
        return EXIT_INPUT
    if isinstance(exc, (DegenerateDataError, ParameterError)):
        click.echo(f"invalid input: {exc}", err=True)
        return EXIT_INPUT
    if isinstance(exc, TrainingError):
        click.echo(f"training aborted: {exc}", err=True)
        return EXIT_TRAINING
    if isinstance(exc, ArtifactError):
        click.echo(f"artifact error: {exc}", err=True)
        return EXIT_ARTIFACT
    if isinstance(exc, CommandError):
        click.echo(str(exc), err=True)
        return exc.code
    click.echo(f"error: {exc}", err=True)
    return EXIT_TRAINING


def _guard(fn):
    """Map package errors to the exit-code contract."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (EvpoiError, CommandError) as exc:
            sys.exit(_fail(exc))
        except FileNotFoundError as exc:
            click.echo(f"file not found: {exc.filename}", err=True)
            sys.exit(EXIT_INPUT)
    return wrapper


def _model_spec(p: dict) -> ModelSpec:
    return ModelSpec(
        charger_kind=p["charger"], kernel_family=p["kernel"], inducing_count=p["m"], seed=p["seed"],
        step_size=p["step_size"], iterations=p["iterations"], cosine_decay=p["cosine_decay"],
        factorization=p["factorization"], variational_step=p["variational_step"],
        init_search=p["init_search"], restarts=p["restarts"], restart_iterations=p["restart_iterations"],
        hidden=tuple(int(h) for h in str(p["hidden"]).split(",") if h.strip()),
    )


def model_options(f):
    opts = [
        click.option("--seed", type=int, default=0, show_default=True, help="Seed for inducing points and initialization."),
        click.option("--kernel", type=click.Choice(["relu", "gaussian"]), default="relu", show_default=True,
                     help="Point-influence kernel."),
        click.option("--charger", type=click.Choice(["neural", "linear"]), default="neural", show_default=True,
                     help="Form of the charger influence."),
        click.option("--hidden", default="8,8", show_default=True, help="Hidden widths of the neural charger."),
        click.option("--m", "m", type=int, default=None, help="Number of inducing points (default min(N, 100))."),
        click.option("--iterations", type=int, default=5000, show_default=True, help="Optimizer iterations."),
        click.option("--step-size", type=float, default=0.01, show_default=True, help="Adam step size."),
        click.option("--cosine-decay/--no-cosine-decay", default=False, show_default=True,
                     help="Cosine learning-rate decay."),
        click.option("--factorization", type=click.Choice(["joint", "mean_field"]), default="joint",
                     show_default=True, help="Posterior factorization across processes."),
        click.option("--variational-step", type=click.Choice(["optimal", "adam"]), default="optimal",
                     show_default=True, help="Closed-form optimal q per step, or Adam on q too."),
        click.option("--init-search/--no-init-search", default=True, show_default=True,
                     help="Grid search over each type's cut-off and variance before optimizing."),
        click.option("--restarts", type=int, default=4, show_default=True,
                     help="Starting points screened before the full run (1 = no restarts)."),
        click.option("--restart-iterations", type=int, default=150, show_default=True,
                     help="Iterations of the short screening run per start."),
        click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="key = value file whose entries override the flags."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


# --------------------------------------------------------------------------
# commands


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact")
def main():
    """POI-driven utilization model for EV charging stations."""


@main.command()
@click.option("--stations", type=click.Path(exists=True, dir_okay=False), required=True, help="Station CSV.")
@click.option("--pois", type=click.Path(exists=True, dir_okay=False), required=True,
              help="POI GeoJSON FeatureCollection or CSV (id, lon, lat, type).")
@click.option("--tag-map", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Tag map file with 'key=value -> Type' lines (default: built-in map).")
@click.option("--utilization-scale", type=click.Choice(["auto", "fraction", "percent"]), default="auto",
              show_default=True, help="Unit of the utilization column.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Base output directory.")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="key = value file whose entries override the flags.")
@_guard
def ingest(**params):
    """Validate station and POI files and write a dataset bundle."""
    p = apply_config(params, params["config"])
    tag_map = load_tag_map(p["tag_map"]) if p["tag_map"] else DEFAULT_TAG_MAP
    ds, table = build_dataset(p["stations"], p["pois"], tag_map,
                              StationSchema(utilization_scale=p["utilization_scale"]))
    if not ds.pois:
        raise DataValidationError([f"{p['pois']}: no usable POIs"])
    run = _run_dir(p["out"], "ingest", {"stations": p["stations"], "pois": p["pois"], "tag_map": p["tag_map"]},
                   {"utilization_scale": p["utilization_scale"]})
    bundle = dataset_json(ds)
    _write(run / "dataset.json", bundle)
    counts = table.counts()
    lines = [f"stations: {len(ds.stations)}", f"pois: {len(ds.pois)}",
             f"skipped_non_point: {table.non_point}", f"unmapped_features: {table.unmapped}",
             f"reference: {ds.reference[0]!r},{ds.reference[1]!r}",
             f"bundle_sha256: {hashlib.sha256(bundle.encode()).hexdigest()}", "poi_types:"]
    lines += [f"  {t}: {counts.get(t, 0)}" for t in ds.poi_types]
    _write(run / "ingest_report.txt", "\n".join(lines) + "\n")
    click.echo(run)


def _trace_csv(model) -> str:
    blocks = sorted(model.grad_norms)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "elbo"] + [f"grad_{b}" for b in blocks])
    for i, v in enumerate(model.trace):
        g = [repr(float(model.grad_norms[b][i])) if i < len(model.grad_norms[b]) else "" for b in blocks]
        w.writerow([i, repr(float(v))] + g)
    return buf.getvalue()


def _summary(model) -> str:
    lines = [f"final_elbo: {model.trace[-1]!r}", f"initial_elbo: {model.trace[0]!r}",
             f"noise_sd: {model.noise_sd!r}", f"matern_variance: {model.matern_variance!r}",
             f"matern_lengthscale: {model.matern_lengthscale!r}", f"inducing_points: {len(model.inducing.locations)}",
             f"kernel: {model.spec.kernel_family}", f"charger: {model.spec.charger_kind}"]
    lines += [f"theta_{g}: {model.theta[g]!r}" for g in model.poi_types]
    lines += [f"alpha_variance_{g}: {model.alpha_variance[g]!r}" for g in model.poi_types]
    return "\n".join(lines) + "\n"


@main.command()
@click.option("--bundle", type=click.Path(exists=True, dir_okay=False), required=True, help="Dataset bundle.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Base output directory.")
@model_options
@_guard
def train(**params):
    """Fit the POI model on every station in the bundle."""
    p = apply_config(params, params["config"])
    spec = _model_spec(p)
    ds = load_dataset(p["bundle"])
    run = _run_dir(p["out"], "train", {"bundle": p["bundle"]}, spec.to_dict())
    try:
        model = svi.train(spec, ds)
    except TrainingError as exc:
        _write(run / "trace.csv", "iteration,elbo\n" + "".join(
            f"{i},{float(v)!r}\n" for i, v in enumerate(exc.trace)))
        raise
    digest = save_model(model, run / "model.json")
    _write(run / "trace.csv", _trace_csv(model))
    _write(run / "summary.txt", _summary(model) + f"model_sha256: {digest}\n")
    click.echo(run)


def _parse_bbox(text):
    if text is None:
        return None
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ParameterError("--bbox needs x0,y0,x1,y1 in km")
    return tuple(parts)


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Model file written by train.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Base output directory.")
@click.option("--component", "components", multiple=True,
              help="Process to rasterize (h0 or a POI type); repeatable. Default: none.")
@click.option("--cell", type=float, default=0.1, show_default=True, help="Raster cell size in km.")
@click.option("--bbox", default=None, help="Raster extent x0,y0,x1,y1 in planar km (default: data extent).")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="key = value file whose entries override the flags.")
@_guard
def interpret(**params):
    """Cut-off distances, per-POI effects and latent-surface rasters."""
    p = apply_config(params, params["config"])
    model = load_model(p["model_path"])
    comps = tuple(p["components"]) if not isinstance(p["components"], str) else tuple(
        c.strip() for c in p["components"].split(",") if c.strip())
    flags = {"components": comps, "cell": p["cell"], "bbox": p["bbox"]}
    run = _run_dir(p["out"], "interpret", {"model": p["model_path"]}, flags)
    effects = it.recover_alphas(model)
    _write(run / "type_summary.csv", it.type_summary_csv(it.type_summaries(model, effects)))
    _write(run / "poi_effects.csv", it.poi_effects_csv(effects))
    bbox = _parse_bbox(p["bbox"]) or it.default_bbox(model)
    for c in comps:
        raster = it.spatial_grid(model, c, bbox, p["cell"])
        _write(run / f"raster_{c}.csv", it.raster_csv(raster))
        if model.reference is not None:
            it.write_geojson(run / f"raster_{c}.geojson", it.raster_geojson(raster, model.reference))
    click.echo(run)


@main.command(name="predict")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Model file written by train.")
@click.option("--bundle", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset bundle whose stations are predicted.")
@click.option("--stations", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Station CSV to predict (utilization column may be any valid value).")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Base output directory.")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="key = value file whose entries override the flags.")
@_guard
def predict_cmd(**params):
    """Predictive mean, variance and utilization at new stations."""
    p = apply_config(params, params["config"])
    if (p["bundle"] is None) == (p["stations"] is None):
        raise CommandError("give exactly one of --bundle or --stations", EXIT_INPUT)
    model = load_model(p["model_path"])
    if p["bundle"]:
        ds = load_dataset(p["bundle"])
        ids = [s.id for s in ds.stations]
        X, locs = ds.covariates, ds.locations
    else:
        if model.reference is None:
            raise ArtifactError("model has no projection reference; predict from a bundle instead")
        table = load_stations(p["stations"], reference=model.reference)
        ids = [s.id for s in table.stations]
        X = table.covariates
        locs = np.array([s.location for s in table.stations]).reshape(-1, 2)
    run = _run_dir(p["out"], "predict", {"model": p["model_path"], "bundle": p["bundle"],
                                         "stations": p["stations"]}, {})
    pred = predict(model, X, locs)
    comps = ["g"] + list(model.processes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "mean", "variance", "utilization"] + comps)
    for i, sid in enumerate(ids):
        w.writerow([sid, repr(float(pred.mean[i])), repr(float(pred.variance[i])),
                    repr(float(pred.utilization[i]))] + [repr(float(pred.components[c][i])) for c in comps])
    _write(run / "predictions.csv", buf.getvalue())
    click.echo(run)


def bench_options(f):
    opts = [
        click.option("--bundle", type=click.Path(exists=True, dir_okay=False), required=True, help="Dataset bundle."),
        click.option("--out", type=click.Path(file_okay=False), required=True, help="Base output directory."),
        click.option("--split-seed", type=int, default=0, show_default=True, help="Seed of the 80:20 split."),
        click.option("--split-ratio", type=float, default=0.8, show_default=True, help="Training fraction."),
        click.option("--repeats", type=int, default=0, show_default=True,
                     help="Also run this many split seeds and report mean and sd (benchmark only)."),
        click.option("--timings/--no-timings", default=False, show_default=True,
                     help="Write wall-clock seconds per row (not reproducible)."),
    ]
    for o in reversed(opts):
        f = o(f)
    return model_options(f)


def _bench_config(p: dict) -> ev.BenchmarkConfig:
    return ev.BenchmarkConfig(split=ev.SplitConfig(p["split_ratio"], p["split_seed"]),
                              model=_model_spec(p), seed=p["seed"])


def _emit_report(run: Path, report: ev.EvalReport, config: ev.BenchmarkConfig, timings: bool) -> None:
    _write(run / "report.csv", report.to_csv())
    _write(run / "report.txt", report.to_text())
    _write(run / "config.txt", config.to_kv() + f"hash = {config.hash()}\n")
    if timings:
        _write(run / "timings.csv", report.timings_csv())
    click.echo(report.to_text(), nl=False)
    if not any(r.ok for r in report.rows):
        raise CommandError("every row failed", EXIT_TRAINING)


@main.command()
@bench_options
@_guard
def benchmark(**params):
    """Baselines with and without POI features against the POI model."""
    p = apply_config(params, params["config"])
    config = _bench_config(p)
    ds = load_dataset(p["bundle"])
    run = _run_dir(p["out"], "benchmark", {"bundle": p["bundle"]}, {"config": config.to_kv(),
                                                                    "repeats": p["repeats"]})
    report = ev.run_benchmark(ds, config)
    if p["repeats"] > 0:
        rows = ev.run_repeated(ds, config, range(p["repeats"]))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
        _write(run / "repeated.csv", buf.getvalue())
    _emit_report(run, report, config, p["timings"])
    click.echo(run)


@main.command(name="sensitivity")
@bench_options
@_guard
def sensitivity_cmd(**params):
    """The POI model under both charger forms and both point kernels."""
    p = apply_config(params, params["config"])
    config = _bench_config(p)
    ds = load_dataset(p["bundle"])
    run = _run_dir(p["out"], "sensitivity", {"bundle": p["bundle"]}, {"config": config.to_kv()})
    _emit_report(run, ev.sensitivity(ds, config), config, p["timings"])
    click.echo(run)


@main.command()
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Base output directory.")
@click.option("--seed", type=int, default=0, show_default=True, help="Generator seed.")
@click.option("--n-stations", type=int, default=SynthConfig.n_stations, show_default=True,
              help="Number of stations.")
@click.option("--kernel", type=click.Choice(["relu", "gaussian"]), default="relu", show_default=True,
              help="Point-influence kernel of the generator.")
@click.option("--noise-sd", type=float, default=SynthConfig.noise_sd, show_default=True,
              help="Observation noise sd on the raw scale.")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="key = value file whose entries override the flags.")
@_guard
def synth(**params):
    """Generate a synthetic city from the model with full ground truth."""
    p = apply_config(params, params["config"])
    cfg = SynthConfig(n_stations=p["n_stations"], kernel_family=p["kernel"], noise_sd=p["noise_sd"],
                      seed=p["seed"])
    run = _run_dir(p["out"], "synth", {}, {k: v for k, v in p.items() if k not in ("out", "config")})
    ds, truth = synth_generate(cfg)
    _write(run / "dataset.json", dataset_json(ds))
    _write(run / "truth.json", truth_json(truth))
    write_raw_inputs(ds, run / "stations.csv", run / "pois.csv")
    click.echo(run)


if __name__ == "__main__":
    main()
