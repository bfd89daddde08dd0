"""Operator surface.

Subcommands: ``gen-synth`` writes a synthetic dataset, ``train`` fits a model
and optionally sweeps the ablation variants, ``forecast`` emits horizon
predictions from a checkpoint, ``evaluate`` scores predictions against
labels and renders report figures. Every run writes a manifest with input
and output checksums. Exit codes: 0 success, 2 usage or input error,
3 numeric failure.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import data as D
from . import graph as G
from . import metrics as MT
from . import model as M
from . import plots
from . import training as T
from .errors import DataError, DglrError, DimensionError, DivergenceError, NumericError

EXIT_INPUT = 2
EXIT_NUMERIC = 3

ABLATION_CHOICES = {"full": "full", "shared": "shared", "no-sl": "no_sl", "no-sm": "no_sm"}


def _fail_input(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_INPUT)


def _fail_numeric(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_NUMERIC)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir: Path, command: str, config: dict, inputs, outputs,
                   started: str, seed=None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(Path(p).name): _sha256(Path(p)) for p in outputs},
        "started_at": started,
        "finished_at": _utcnow(),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _load_dataset(data_dir: Path, *, train_end=None, planar=None) -> D.SensorDataset:
    locations = data_dir / "locations.csv"
    observations = data_dir / "observations.csv"
    for p in (locations, observations):
        if not p.exists():
            _fail_input(f"missing input file: {p}")
    return D.load_csv(locations, observations, train_end=train_end, planar=planar)


@click.group()
@click.version_option()
def main():
    """Forecast a per-location scalar over a learned dynamic graph."""


# -- gen-synth ------------------------------------------------------------------


@main.command("gen-synth")
@click.option("--n", "num_locations", type=int, required=True, help="Number of locations.")
@click.option("--t", "num_steps", type=int, required=True, help="Total time steps.")
@click.option("--clusters", type=int, required=True, help="Latent cluster count.")
@click.option("--d", "num_features", type=int, default=6, show_default=True)
@click.option("--noise", type=float, default=0.05, show_default=True,
              help="Std of the per-site AR(1) label noise.")
@click.option("--feature-noise", type=float, default=0.05, show_default=True)
@click.option("--misspecified", is_flag=True,
              help="Cluster membership independent of position (distance graph is wrong).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--train-end", type=int, default=None, help="Training steps (default ~80%).")
@click.option("--mask-fraction", type=float, default=0.0, show_default=True,
              help="Hide this fraction of training labels in the written files.")
@click.option("--mask-seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("."),
              show_default=True)
def cmd_gen_synth(num_locations, num_steps, clusters, num_features, noise, feature_noise,
                  misspecified, seed, train_end, mask_fraction, mask_seed, out_dir):
    """Write locations.csv and observations.csv for a synthetic dataset."""
    started = _utcnow()
    try:
        spec = D.SyntheticSpec(
            num_locations=num_locations,
            num_steps=num_steps,
            num_clusters=clusters,
            num_features=num_features,
            noise=noise,
            feature_noise=feature_noise,
            misspecified=misspecified,
            train_end=train_end,
        )
        dataset = D.generate_synthetic(spec, seed=seed)
        if mask_fraction > 0:
            dataset = D.mask_labels(dataset, mask_fraction, seed=mask_seed)
    except DataError as err:
        _fail_input(str(err))
    out_dir.mkdir(parents=True, exist_ok=True)
    locations = out_dir / "locations.csv"
    observations = out_dir / "observations.csv"
    D.save_csv(dataset, locations, observations)
    config = {
        "num_locations": num_locations,
        "num_steps": num_steps,
        "clusters": clusters,
        "num_features": num_features,
        "noise": noise,
        "feature_noise": feature_noise,
        "misspecified": misspecified,
        "train_end": dataset.train_end,
        "mask_fraction": mask_fraction,
        "mask_seed": mask_seed,
    }
    write_manifest(out_dir, "gen-synth", config, [], [locations, observations],
                   started, seed=seed)
    click.echo(f"wrote {locations} and {observations}")


# -- train ----------------------------------------------------------------------


def _effective(ctx, name, flag_value, config_file: dict):
    """Flag > config file > default."""
    source = ctx.get_parameter_source(name)
    if source is not None and source.name != "DEFAULT":
        return flag_value
    if name in config_file:
        return config_file[name]
    return flag_value


def _train_once(dataset, config: T.TrainConfig, out_dir: Path, *, stats, threshold_echo,
                seed: int, dump_graph: Path | None, extra_meta: dict):
    """Run training and write the full artifact set into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_extra_base = {
        "normalization": stats.to_dict() if stats is not None else None,
        "train_end": dataset.train_end,
        "config": config.to_dict(),
    }
    t0 = time.monotonic()
    status = "ok"
    try:
        result = T.train(dataset, config, run_dir=out_dir, checkpoint_extra=checkpoint_extra_base)
        params, final_graph, log = result.params, result.graph, result.log
        weights, best_epoch = result.weights, result.best_epoch
    except DivergenceError as err:
        status = "diverged"
        log = err.log
        best_epoch = None
        weights = None
        rng = np.random.default_rng(config.seed)
        params = M.init_params(
            dataset.num_locations, dataset.num_features, config.embedding_dim,
            config.window, rng=rng, shared_gru=config.ablation == "shared",
            activation=config.activation,
        )
        if err.last_good is not None:
            params.load_data(err.last_good)
        final_graph = G.build_initial_graph(
            dataset.distances,
            config.threshold_km or G.suggest_threshold(dataset.distances),
            cutoff_multiplier=config.cutoff_multiplier,
        )
        result = None
    wall = time.monotonic() - t0

    log_path = out_dir / "training_log.csv"
    T.write_training_log(log_path, log)
    ckpt_path = out_dir / "checkpoint.json"
    extra = dict(checkpoint_extra_base)
    extra["graph"] = G.graph_to_dict(final_graph)
    extra["weights"] = list(weights) if weights is not None else None
    M.save_checkpoint(ckpt_path, params, seed=seed, extra=extra)
    outputs = [log_path, ckpt_path]

    if log:
        curves_path = out_dir / "loss_curves.png"
        plots.render_loss_curves(log, curves_path)
        outputs.append(curves_path)
    if dump_graph is not None:
        outputs.extend(G.save_graph_csvs(final_graph, dataset.train_end, dump_graph))

    meta = {
        "command": "train",
        "status": status,
        "seed": seed,
        "config": config.to_dict(),
        "threshold_km": threshold_echo,
        "weights": list(weights) if weights is not None else None,
        "best_epoch": best_epoch,
        "epochs_run": len(log),
        "dataset": {
            "num_locations": dataset.num_locations,
            "num_time_steps": dataset.num_time_steps,
            "num_features": dataset.num_features,
            "train_end": dataset.train_end,
        },
        "wall_time_s": wall,
        **extra_meta,
    }
    meta_path = out_dir / "meta.json"
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    outputs.append(meta_path)
    return result, status, outputs


@main.command("train")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True,
              help="Directory with locations.csv and observations.csv.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--k", "embedding_dim", type=int, default=10, show_default=True)
@click.option("--w", "window", type=int, default=1, show_default=True)
@click.option("--lr", "learning_rate", type=float, default=1e-4, show_default=True)
@click.option("--epochs", type=int, default=2000, show_default=True,
              help="Total epochs, split evenly across outer iterations.")
@click.option("--outer-iters", type=int, default=2, show_default=True)
@click.option("--threshold-km", type=float, default=None,
              help="Edge distance threshold (default: mean degree ~4).")
@click.option("--cutoff-mult", type=float, default=3.0, show_default=True,
              help="Reconstruction distance cutoff, as a multiple of the threshold.")
@click.option("--no-cutoff", is_flag=True, help="Disable the reconstruction distance cutoff.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ablation", type=click.Choice(sorted(ABLATION_CHOICES)), default="full",
              show_default=True)
@click.option("--alpha", default="auto", show_default=True,
              help="'auto' or four comma-separated loss weights.")
@click.option("--activation", type=click.Choice(sorted(M.ACTIVATIONS)), default="elu",
              show_default=True)
@click.option("--train-end", type=int, default=None, help="Training steps (default ~80%).")
@click.option("--no-normalize", is_flag=True, help="Skip feature standardization.")
@click.option("--mask-labels", "mask_fraction", type=float, default=0.0, show_default=True,
              help="Hide this fraction of training labels before fitting.")
@click.option("--mask-seed", type=int, default=0, show_default=True)
@click.option("--holdout", is_flag=True,
              help="Hold out the last 10% of training steps to select the best epoch.")
@click.option("--rebalance-each-iter", is_flag=True,
              help="Recompute auto loss weights at the start of every outer iteration.")
@click.option("--dump-graph", type=click.Path(path_type=Path), default=None,
              help="Write each per-step adjacency as CSV into this directory.")
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
              help="JSON file with defaults for any of the above options.")
@click.option("--sweep-ablation", is_flag=True,
              help="Train all four ablation variants with a shared seed and compare.")
@click.option("--planar", is_flag=True, help="Expect planar x,y coordinates.")
@click.pass_context
def cmd_train(ctx, data_dir, out_dir, embedding_dim, window, learning_rate, epochs,
              outer_iters, threshold_km, cutoff_mult, no_cutoff, seed, ablation, alpha,
              activation, train_end, no_normalize, mask_fraction, mask_seed, holdout,
              rebalance_each_iter, dump_graph, config_path, sweep_ablation, planar):
    """Fit the model; artifacts go to --out (checkpoint, log, figures, manifest)."""
    started = _utcnow()
    config_file = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                config_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            _fail_input(f"cannot read config file {config_path}: {err}")

    scalars = dict(
        embedding_dim=embedding_dim, window=window, learning_rate=learning_rate,
        epochs=epochs, outer_iters=outer_iters, threshold_km=threshold_km,
        cutoff_mult=cutoff_mult, no_cutoff=no_cutoff, seed=seed, ablation=ablation,
        alpha=alpha, activation=activation, train_end=train_end,
        no_normalize=no_normalize, mask_fraction=mask_fraction, mask_seed=mask_seed,
        holdout=holdout, rebalance_each_iter=rebalance_each_iter,
    )
    eff = {k: _effective(ctx, k if k != "mask_fraction" else "mask_fraction", v, config_file)
           for k, v in scalars.items()}

    alpha_value = eff["alpha"]
    if isinstance(alpha_value, str) and alpha_value != "auto":
        try:
            parts = [float(p) for p in alpha_value.split(",")]
        except ValueError:
            parts = []
        if len(parts) != 4:
            _fail_input(f"--alpha must be 'auto' or four comma-separated numbers, got {alpha_value!r}")
        alpha_tuple = tuple(parts)
    elif isinstance(alpha_value, (list, tuple)):
        alpha_tuple = tuple(float(v) for v in alpha_value)
    else:
        alpha_tuple = None

    per_iter = max(1, math.ceil(eff["epochs"] / eff["outer_iters"]))
    config = T.TrainConfig(
        embedding_dim=eff["embedding_dim"],
        window=eff["window"],
        learning_rate=eff["learning_rate"],
        epochs_per_outer_iter=per_iter,
        outer_iters=eff["outer_iters"],
        alpha=alpha_tuple,
        threshold_km=eff["threshold_km"],
        cutoff_multiplier=None if eff["no_cutoff"] else eff["cutoff_mult"],
        seed=eff["seed"],
        ablation=ABLATION_CHOICES[eff["ablation"]] if eff["ablation"] in ABLATION_CHOICES else eff["ablation"],
        activation=eff["activation"],
        rebalance_each_iter=eff["rebalance_each_iter"],
        holdout_fraction=0.1 if eff["holdout"] else 0.0,
    )

    try:
        config.validate()
        dataset = _load_dataset(data_dir, train_end=eff["train_end"],
                                planar=True if planar else None)
        stats = None
        if not eff["no_normalize"]:
            dataset, stats = D.normalize_features(dataset)
        if eff["mask_fraction"] > 0:
            dataset = D.mask_labels(dataset, eff["mask_fraction"], seed=eff["mask_seed"])
    except (DataError, DimensionError) as err:
        _fail_input(str(err))

    threshold_echo = (
        config.threshold_km
        if config.threshold_km is not None
        else G.suggest_threshold(dataset.distances)
    )
    inputs = [data_dir / "locations.csv", data_dir / "observations.csv"]
    if config_path is not None:
        inputs.append(config_path)
    extra_meta = {
        "normalized": not eff["no_normalize"],
        "mask_fraction": eff["mask_fraction"],
        "effective_epochs": per_iter * eff["outer_iters"],
    }

    if eff["no_normalize"]:
        stats = None

    if sweep_ablation:
        _run_sweep(dataset, config, out_dir, stats=stats, threshold_echo=threshold_echo,
                   inputs=inputs, started=started, extra_meta=extra_meta)
        return

    try:
        _, status, outputs = _train_once(
            dataset, config, out_dir, stats=stats, threshold_echo=threshold_echo,
            seed=config.seed, dump_graph=eff_dump(dump_graph, config_file, ctx),
            extra_meta=extra_meta,
        )
    except (DataError, DimensionError) as err:
        _fail_input(str(err))
    write_manifest(out_dir, "train", config.to_dict(), inputs, outputs, started,
                   seed=config.seed)
    if status == "diverged":
        _fail_numeric("training diverged; partial artifacts written (last finite checkpoint)")
    click.echo(f"training complete; artifacts in {out_dir}")


def eff_dump(dump_graph, config_file, ctx):
    if dump_graph is not None:
        return Path(dump_graph)
    value = config_file.get("dump_graph")
    return Path(value) if value else None


def _run_sweep(dataset, config, out_dir: Path, *, stats, threshold_echo, inputs,
               started, extra_meta):
    """Train every ablation variant with the shared seed and compare on the
    test interval."""
    out_dir.mkdir(parents=True, exist_ok=True)
    horizon = dataset.num_time_steps - dataset.train_end
    table = []
    outputs = []
    for variant in ("full", "shared", "no_sl", "no_sm"):
        sub = out_dir / variant
        vconfig = T.TrainConfig(**{**config.to_dict(), "ablation": variant,
                                   "alpha": config.alpha})
        try:
            result, status, sub_outputs = _train_once(
                dataset, vconfig, sub, stats=stats, threshold_echo=threshold_echo,
                seed=vconfig.seed, dump_graph=None, extra_meta=extra_meta,
            )
        except (DataError, DimensionError) as err:
            _fail_input(str(err))
        if status != "ok":
            _fail_numeric(f"ablation variant {variant} diverged")
        preds = T.forecast(result.params, result.graph, dataset, horizon)
        report = MT.evaluate(
            preds,
            dataset.labels[dataset.train_end :],
            dataset.label_mask[dataset.train_end :],
        )
        table.append((variant, report.rmse_mean, report.smape_mean, report.pearson_mean))

    comparison = out_dir / "ablation_comparison.csv"
    with open(comparison, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ablation", "rmse", "smape_percent", "pearson"])
        for variant, rmse, smape, pearson in table:
            writer.writerow([
                variant,
                repr(rmse) if rmse is not None else "NA",
                repr(smape) if smape is not None else "NA",
                repr(pearson) if pearson is not None else "NA",
            ])
    chart = out_dir / "ablation_comparison.png"
    plots.render_ablation_chart(table, chart)
    outputs.extend([comparison, chart])
    write_manifest(out_dir, "train --sweep-ablation", config.to_dict(), inputs,
                   outputs, started, seed=config.seed)
    click.echo(f"{'ablation':<10} {'rmse':>10} {'smape%':>10} {'pearson':>10}")
    for variant, rmse, smape, pearson in table:
        click.echo(
            f"{variant:<10} {rmse:>10.4f} {smape:>10.2f} "
            f"{(f'{pearson:,.3f}' if pearson is not None else 'NA'):>10}"
        )


# -- forecast -------------------------------------------------------------------


@main.command("forecast")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--horizon", type=int, default=None,
              help="Steps to forecast past the training interval (default: all remaining).")
@click.option("--planar", is_flag=True, help="Expect planar x,y coordinates.")
def cmd_forecast(data_dir, checkpoint_path, out_dir, horizon, planar):
    """Emit long-format predictions for the forecast interval."""
    started = _utcnow()
    if not Path(checkpoint_path).exists():
        _fail_input(f"missing checkpoint: {checkpoint_path}")
    try:
        params, payload = M.load_checkpoint(checkpoint_path)
        train_end = payload.get("train_end")
        dataset = _load_dataset(data_dir, train_end=train_end, planar=True if planar else None)
        norm = payload.get("normalization")
        if norm is not None:
            dataset = D.apply_normalization(dataset, D.NormalizationStats.from_dict(norm))
        graph_payload = payload.get("graph")
        if graph_payload is None:
            _fail_input("checkpoint does not carry a trained graph")
        graph = G.graph_from_dict(graph_payload)
        if horizon is None:
            horizon = dataset.num_time_steps - dataset.train_end
        preds = T.forecast(params, graph, dataset, horizon)
    except (DataError, DimensionError) as err:
        _fail_input(str(err))
    except NumericError as err:
        _fail_numeric(str(err))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / "predictions.csv"
    with open(pred_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "location_id", "prediction"])
        for row, step in enumerate(range(dataset.train_end, dataset.train_end + horizon)):
            for i in range(dataset.num_locations):
                writer.writerow([step, i, repr(float(preds[row, i]))])
    write_manifest(
        out_dir, "forecast",
        {"horizon": horizon, "checkpoint": str(checkpoint_path)},
        [data_dir / "locations.csv", data_dir / "observations.csv", checkpoint_path],
        [pred_path], started, seed=payload.get("seed"),
    )
    click.echo(f"wrote {pred_path} ({horizon * dataset.num_locations} rows)")


# -- evaluate -------------------------------------------------------------------


def _read_predictions(path: Path, num_locations: int, num_steps: int):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["time", "location_id", "prediction"]:
        raise DataError(f"{path}: expected header time,location_id,prediction")
    by_cell = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{line_no}: expected 3 columns")
        try:
            t, loc, value = int(row[0]), int(row[1]), float(row[2])
        except ValueError:
            raise DataError(f"{path}:{line_no}: malformed row") from None
        if not (0 <= loc < num_locations):
            raise DataError(f"{path}:{line_no}: unknown location_id {loc}")
        if not (0 <= t < num_steps):
            raise DataError(f"{path}:{line_no}: time {t} outside the dataset range")
        if (t, loc) in by_cell:
            raise DataError(f"{path}:{line_no}: duplicate (time, location) = ({t}, {loc})")
        by_cell[(t, loc)] = value
    if not by_cell:
        raise DataError(f"{path}: no prediction rows")
    times = sorted({t for t, _ in by_cell})
    preds = np.full((len(times), num_locations), np.nan)
    have = np.zeros((len(times), num_locations), dtype=bool)
    for (t, loc), value in by_cell.items():
        r = times.index(t)
        preds[r, loc] = value
        have[r, loc] = True
    return np.asarray(times), preds, have


@main.command("evaluate")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), required=True)
@click.option("--predictions", "pred_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--interval", default=None, help="Half-open step range a:b to score.")
@click.option("--plot-data", is_flag=True,
              help="Also write per-location actual-vs-predicted series CSVs.")
@click.option("--train-end", type=int, default=None)
@click.option("--planar", is_flag=True, help="Expect planar x,y coordinates.")
def cmd_evaluate(data_dir, pred_path, out_dir, interval, plot_data, train_end, planar):
    """Score predictions against labels; write report files and figures."""
    started = _utcnow()
    if not Path(pred_path).exists():
        _fail_input(f"missing predictions file: {pred_path}")
    try:
        dataset = _load_dataset(data_dir, train_end=train_end, planar=True if planar else None)
        times, preds, have = _read_predictions(
            Path(pred_path), dataset.num_locations, dataset.num_time_steps
        )
        if interval is not None:
            try:
                start, end = (int(p) for p in interval.split(":"))
            except ValueError:
                raise DataError(f"--interval must look like a:b, got {interval!r}") from None
            keep = (times >= start) & (times < end)
            times, preds, have = times[keep], preds[keep], have[keep]
            if times.size == 0:
                raise DataError(f"no predictions inside interval {interval}")
        labels = dataset.labels[times]
        mask = dataset.label_mask[times] & have
        report = MT.evaluate(np.where(have, preds, 0.0), labels, mask)
    except (DataError, DimensionError) as err:
        _fail_input(str(err))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_csv = out_dir / "report.csv"
    with open(report_csv, "w", newline="") as fh:
        csv.writer(fh).writerows(MT.report_csv_rows(report))
    report_json = out_dir / "report.json"
    with open(report_json, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    figure = out_dir / "actual_vs_predicted.png"
    plots.render_series_panels(times, labels, dataset.label_mask[times], preds, figure)
    outputs = [report_csv, report_json, figure]

    if plot_data:
        series_dir = out_dir / "plot_data"
        series_dir.mkdir(exist_ok=True)
        for i in range(dataset.num_locations):
            p = series_dir / f"location_{i:04d}.csv"
            with open(p, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["time", "actual", "predicted"])
                for r, t in enumerate(times):
                    actual = (
                        repr(float(labels[r, i])) if dataset.label_mask[t, i] else ""
                    )
                    pred = repr(float(preds[r, i])) if have[r, i] else ""
                    writer.writerow([int(t), actual, pred])
            outputs.append(p)

    write_manifest(
        out_dir, "evaluate",
        {"interval": interval, "predictions": str(pred_path)},
        [data_dir / "locations.csv", data_dir / "observations.csv", pred_path],
        outputs, started,
    )
    mean = report.rmse_mean
    click.echo(f"rmse={mean:.6f} smape={report.smape_mean:.3f}% over {report.count} points")


if __name__ == "__main__":
    main()
