"""``flatvi`` command line: simulate, train, diagnose, geodesics, flow matching, evaluation.

Every command writes ``config.lock.json`` (resolved configuration plus tool
version) into its output directory. Passing that file back with ``--config``
reproduces the outputs byte for byte at ``--threads 1``.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import apply_seed_env, load_config, merge, write_lock
from .data_io import (read_counts, read_latents, read_matrix, write_counts, write_latents,
                      write_matrix, write_rows)
from .errors import ConfigError, DataValidationError, FlatVIError, NumericError

logger = logging.getLogger("flatvi")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve(args, overrides: dict) -> dict:
    cfg = apply_seed_env(load_config(args.config))
    cleaned = {s: {k: v for k, v in kv.items() if v is not None} for s, kv in overrides.items()}
    return merge(cfg, {s: kv for s, kv in cleaned.items() if kv})


def _finish(args, cfg: dict) -> Path:
    out = Path(args.out)
    write_lock(cfg, out, __version__)
    return out


def _load_vae(directory):
    from .nbvae import load_model

    try:
        return load_model(directory)
    except (OSError, KeyError, ValueError) as exc:
        raise DataValidationError(f"cannot load VAE checkpoint {directory}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    from .simulate import simulate

    cfg = _resolve(args, {"data": {"n": args.n, "genes": args.genes, "seed": args.seed}})
    d = cfg["data"]
    try:
        ds = simulate(d["n"], d["genes"], d["n_classes"], d["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    ids = [f"c{i}" for i in range(ds.X.shape[0])]
    labels = [str(int(v)) for v in ds.labels]
    write_counts(out / "counts.csv", ds.X, labels=labels, cell_ids=ids)
    genes = [f"g{j}" for j in range(ds.X.shape[1])]
    write_rows(out / "truth_mu.csv", ["cell_id", *genes],
               ([ids[i], *ds.mu_true[i].tolist()] for i in range(len(ids))))
    write_rows(out / "truth_theta.csv", ["gene", "theta"], zip(genes, ds.theta_true.tolist()))
    write_rows(out / "labels.csv", ["cell_id", "label"], zip(ids, labels))
    _finish(args, cfg)
    return EXIT_OK


def _train_config(cfg: dict):
    from .nbvae import TrainConfig

    v, g = cfg["vae"], cfg["geometry"]
    try:
        return TrainConfig(
            lambda_flat=g["lambda"], batch_size=v["batch_size"], max_epochs=v["max_epochs"],
            learning_rate=v["learning_rate"], kl_anneal_epochs=v["kl_anneal_epochs"],
            patience=v["patience"], seed=v["seed"], val_fraction=v["val_fraction"],
            use_size_factor=v["use_size_factor"], flat_subsample=g["flat_subsample"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train_vae(args) -> int:
    from .nbvae import NbVaeModel, latent_means, library_sizes, save_model, train

    cfg = _resolve(args, {
        "vae": {"max_epochs": args.epochs, "seed": args.seed, "use_size_factor": args.size_factor},
        "geometry": {"lambda": args.lambda_flat},
    })
    table = read_counts(args.data)
    tc = _train_config(cfg)
    v = cfg["vae"]
    model = NbVaeModel(table.X.shape[1], v["latent_dim"], tuple(v["hidden"]), seed=v["seed"],
                       use_size_factor=v["use_size_factor"])
    result = train(model, table.X, tc)
    out = Path(args.out)
    cols = ("epoch", "recon", "kl", "flat", "total", "val_total")
    write_rows(out / "history.csv", cols, ([h[c] for c in cols] for h in result.history))
    if result.diverged:
        _finish(args, cfg)
        raise NumericError("training diverged (non-finite loss)")
    save_model(model, out / "checkpoint")
    _write_json(out / "summary.json", {
        "alpha": model.alpha.item(),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
    })
    if args.export_latents:
        x = torch.as_tensor(table.X, dtype=torch.float64)
        z = latent_means(model, x).numpy()
        log_l = torch.log(library_sizes(model, x)).numpy()
        write_latents(out / "latents.csv", table.cell_id, table.t_index, z, log_l)
    _finish(args, cfg)
    return EXIT_OK


def _subsample(n: int, size: int, seed: int) -> np.ndarray:
    if size <= 0 or size >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size, replace=False))


def cmd_diagnose(args) -> int:
    from .geometry import metric_report, pullback_metric
    from .nbvae import latent_means, library_sizes

    cfg = _resolve(args, {"eval": {"subsample": args.subsample}})
    model = _load_vae(args.checkpoint)
    table = read_counts(args.data)
    if table.X.shape[1] != model.n_genes:
        raise DataValidationError(f"data has {table.X.shape[1]} genes, model expects {model.n_genes}")
    idx = _subsample(table.X.shape[0], cfg["eval"]["subsample"], cfg["eval"]["seeds"][0])
    if idx.size < 2:
        raise DataValidationError("diagnose needs at least two cells")
    x = torch.as_tensor(table.X[idx], dtype=torch.float64)
    with torch.no_grad():
        z = latent_means(model, x)
        l = library_sizes(model, x)
    metrics = pullback_metric(model, z, l).detach()
    report = metric_report(metrics)
    out = Path(args.out)
    keys = ("cn", "vor", "trace", "min_eig", "max_eig")
    write_rows(out / "diagnose.csv", ["cell_id", "cn", "vor_contribution", "trace", "min_eig", "max_eig"],
               ([table.cell_id[i], *(float(report[k][r]) for k in keys)] for r, i in enumerate(idx)))
    _write_json(out / "summary.json", {
        "n_cells": int(idx.size),
        "vor": float(np.mean(report["vor"])),
        "mean_cn": float(np.mean(report["cn"])),
        "mean_trace": float(np.mean(report["trace"])),
    })
    _finish(args, cfg)
    return EXIT_OK


def _geodesic_options(cfg: dict):
    from .geodesics import GeodesicOptions

    g = cfg["geodesic"]
    if g["K"] < 1 or g["iters"] < 0 or g["n_steps"] < 2 or g["lr"] <= 0:
        raise ConfigError("geodesic section needs K >= 1, iters >= 0, n_steps >= 2, lr > 0")
    return GeodesicOptions(n_controls=g["K"], iters=g["iters"], lr=g["lr"], n_steps=g["n_steps"])


def cmd_geodesic(args) -> int:
    from .geodesics import optimize_geodesic, pairwise_geodesics
    from .nbvae import decode, latent_means, library_sizes

    cfg = _resolve(args, {"geodesic": {"iters": args.iters}})
    opts = _geodesic_options(cfg)
    model = _load_vae(args.checkpoint)
    out = Path(args.out)
    if args.points is not None:
        pts = read_latents(args.points)
        if pts.z.shape[1] != model.latent_dim:
            raise DataValidationError(f"points have dimension {pts.z.shape[1]}, model expects {model.latent_dim}")
        # one size factor for the whole matrix: the geometric mean over points
        l = float(np.exp(pts.log_l.mean())) if model.use_size_factor else 1.0
        gm = pairwise_geodesics(pts.z, model, l, opts)
        write_matrix(out / "energy.csv", gm.energy, pts.cell_id)
        write_matrix(out / "chord_energy.csv", gm.chord, pts.cell_id)
        _write_json(out / "geodesic.json", {"n_points": len(pts.cell_id), "failed_pairs": int(gm.failed.sum() // 2),
                                            "size_factor": l})
        _finish(args, cfg)
        return EXIT_OK

    if args.data is None or args.cells is None:
        raise ConfigError("geodesic needs either --points or both --data and --cells")
    table = read_counts(args.data)
    pos = {c: i for i, c in enumerate(table.cell_id)}
    missing = [c for c in args.cells if c not in pos]
    if missing:
        raise DataValidationError(f"unknown cell ids: {', '.join(missing)}")
    x = torch.as_tensor(table.X[[pos[c] for c in args.cells]], dtype=torch.float64)
    with torch.no_grad():
        z = latent_means(model, x)
        ls = library_sizes(model, x)
    l = float(torch.exp(torch.log(ls).mean()))
    res = optimize_geodesic(z[0], z[1], model, l, opts)
    t = np.linspace(0.0, 1.0, opts.n_steps + 1)
    with torch.no_grad():
        path = res.path.points(t)
        mu = decode(model, path, l)
    d, g = path.shape[1], mu.shape[1]
    write_rows(out / "path.csv", ["t", *(f"z{k}" for k in range(d)), *(f"mu_g{j}" for j in range(g))],
               ([t[i], *path[i].tolist(), *mu[i].tolist()] for i in range(t.size)))
    _write_json(out / "geodesic.json", {
        "cells": list(args.cells),
        "energy": res.energy,
        "chord_energy": res.chord_energy,
        "length_kl": res.length_kl,
        "converged": res.converged,
        "iterations": res.iterations,
        "size_factor": l,
    })
    if not np.isfinite(res.energy):
        raise NumericError("no finite geodesic energy was found")
    _finish(args, cfg)
    return EXIT_OK


def _cfm_config(cfg: dict):
    from .otcfm import CfmConfig

    c = cfg["cfm"]
    if c["batch"] < 1 or c["epochs"] < 0 or c["sigma"] < 0 or c["lr"] <= 0 or c["ode_steps"] < 1:
        raise ConfigError("cfm section needs batch >= 1, epochs >= 0, sigma >= 0, lr > 0, ode_steps >= 1")
    return CfmConfig(sigma=c["sigma"], batch_size=c["batch"], epochs=c["epochs"],
                     learning_rate=c["lr"], seed=c["seed"])


def cmd_train_cfm(args) -> int:
    from .otcfm import Snapshot, train_otcfm
    from .tensor_core import save_checkpoint

    cfg = _resolve(args, {"cfm": {"epochs": args.epochs, "seed": args.seed}})
    cc = _cfm_config(cfg)
    lat = read_latents(args.latents)
    times = sorted(set(int(t) for t in lat.t_index if t >= 0) - set(args.holdout or []))
    if len(times) < 2:
        raise DataValidationError("need at least two timed snapshots (t_index >= 0) after hold-out")
    states = lat.states
    snaps = [Snapshot(t, states[lat.t_index == t]) for t in times]
    result = train_otcfm(snaps, cc)
    out = Path(args.out)
    save_checkpoint(out / "field", result.field, nets={"field": result.field.config()},
                    meta={"kind": "velocity_field", "state_dim": result.field.state_dim,
                          "times": times})
    write_rows(out / "losses.csv", ["epoch", "loss"], enumerate(result.losses))
    _finish(args, cfg)
    return EXIT_OK


def _load_field(directory):
    from .otcfm import VelocityField
    from .tensor_core import load_into, read_checkpoint

    try:
        manifest, tensors = read_checkpoint(directory)
        meta, net = manifest["meta"], manifest["nets"]["field"]
        hidden = net["layer_dims"][1:-1]
        field = VelocityField(meta["state_dim"], hidden[0], len(hidden), activation=net["activation"])
        load_into(field, tensors)
    except (OSError, KeyError, ValueError, RuntimeError) as exc:
        raise DataValidationError(f"cannot load velocity field {directory}: {exc}") from exc
    field.eval()
    return field


def cmd_trajectory(args) -> int:
    from .otcfm import decode_trajectory, integrate

    cfg = _resolve(args, {"cfm": {"ode_steps": args.steps}})
    field = _load_field(args.field)
    lat = read_latents(args.latents)
    rows = np.flatnonzero(lat.t_index == args.t_start)
    if rows.size == 0:
        raise DataValidationError(f"no cells with t_index {args.t_start}")
    start = lat.states[rows]
    if start.shape[1] != field.state_dim:
        raise DataValidationError(f"states have width {start.shape[1]}, field expects {field.state_dim}")
    if args.t_end <= args.t_start:
        raise ConfigError("--t-end must exceed --t-start")
    n_steps = cfg["cfm"]["ode_steps"]
    path = integrate(field, start, float(args.t_start), float(args.t_end), n_steps)  # (steps+1, n, d+1)
    path_np = path.numpy()
    d = path_np.shape[-1] - 1
    header = ["cell_id", "step", "t", *(f"z{k}" for k in range(d)), "log_l"]
    mu = None
    if args.checkpoint is not None:
        model = _load_vae(args.checkpoint)
        mu = decode_trajectory(model, path)[0].numpy()
        header += [f"mu_g{j}" for j in range(mu.shape[-1])]
    ts = np.linspace(args.t_start, args.t_end, n_steps + 1)

    def rows_iter():
        for step in range(n_steps + 1):
            for r, i in enumerate(rows):
                extra = mu[step, r].tolist() if mu is not None else []
                yield [lat.cell_id[i], step, float(ts[step]), *path_np[step, r].tolist(), *extra]

    out = Path(args.out)
    write_rows(out / "trajectory.csv", header, rows_iter())
    end = path_np[-1]
    write_latents(out / "endpoints.csv", [lat.cell_id[i] for i in rows], np.full(rows.size, args.t_end),
                  end[:, :-1], end[:, -1])
    _finish(args, cfg)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import metrics as M

    cfg = _resolve(args, {})
    e = cfg["eval"]
    if not args.generated and not args.distances:
        raise ConfigError("evaluate needs --generated/--reference or --distances")
    doc: dict = {"seeds": list(e["seeds"]), "subsample": M.SUBSAMPLE_SIZE, "exact_ot_max": M.EXACT_OT_MAX}
    if args.generated:
        if not args.reference:
            raise ConfigError("--generated requires --reference")
        gen, ref = read_latents(args.generated), read_latents(args.reference)
        a, b = gen.states, ref.states
        if args.t_index is not None:
            b = b[ref.t_index == args.t_index]
            if b.shape[0] == 0:
                raise DataValidationError(f"reference has no cells with t_index {args.t_index}")
        if a.shape[1] != b.shape[1]:
            raise DataValidationError("generated and reference states differ in width")
        if not args.raw:
            a, b = M.standardize_like(a, b), M.standardize_like(b, b)
        w2 = [M.wasserstein2(a, b, s) for s in e["seeds"]]
        l2 = [M.mean_l2(a, b, s) for s in e["seeds"]]
        doc["distribution"] = {
            "wasserstein2": float(np.mean(w2)), "wasserstein2_sd": float(np.std(w2)),
            "wasserstein2_per_seed": w2,
            "mean_l2": float(np.mean(l2)), "mean_l2_sd": float(np.std(l2)), "mean_l2_per_seed": l2,
            "mmd_linear": M.mmd_linear(a, b),
            "n_generated": int(a.shape[0]), "n_reference": int(b.shape[0]),
            "standardized": not args.raw,
        }
    if args.distances:
        (_, d1), (_, d2) = read_matrix(args.distances[0]), read_matrix(args.distances[1])
        if d1.shape != d2.shape or d1.shape[0] != d1.shape[1]:
            raise DataValidationError("distance matrices must be square and of equal size")
        n = d1.shape[0]
        doc["neighbourhood"] = {
            "knn_overlap": {str(k): M.knn_overlap(d1, d2, k) for k in e["k_list"] if 0 < k < n},
            "spearman": M.rowwise_spearman(d1, d2),
            "n_points": int(n),
        }
    out = Path(args.out)
    _write_json(out / "metrics.json", doc)
    _finish(args, cfg)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration or a config.lock.json to replay")
    common.add_argument("--out", required=True, help="output directory (created if missing)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")

    p = argparse.ArgumentParser(prog="flatvi", description="Flattened NB-VAE toolkit: simulate, train, diagnose, geodesics, flow matching, evaluation.")
    p.add_argument("--version", action="version", version=f"flatvi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="draw a synthetic NB count matrix")
    s.add_argument("--n", type=int, help="number of cells (data.n)")
    s.add_argument("--genes", type=int, help="number of genes (data.genes)")
    s.add_argument("--seed", type=int, help="random seed (data.seed)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-vae", parents=[common], help="train the NB-VAE, optionally flattened")
    s.add_argument("--data", required=True, help="count matrix CSV")
    s.add_argument("--lambda", dest="lambda_flat", type=float, help="flattening weight (geometry.lambda)")
    s.add_argument("--epochs", type=int, help="maximum epochs (vae.max_epochs)")
    s.add_argument("--seed", type=int, help="training seed (vae.seed)")
    s.add_argument("--size-factor", action=argparse.BooleanOptionalAction, default=None,
                   help="scale decoder means by observed library size (vae.use_size_factor)")
    s.add_argument("--export-latents", action="store_true",
                   help="write latents.csv with posterior means and log size factors")
    s.set_defaults(func=cmd_train_vae)

    s = sub.add_parser("diagnose", parents=[common], help="per-cell condition number and VoR")
    s.add_argument("--checkpoint", required=True, help="VAE checkpoint directory")
    s.add_argument("--data", required=True, help="count matrix CSV")
    s.add_argument("--subsample", type=int, help="cells to diagnose, 0 for all (eval.subsample)")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("geodesic", parents=[common], help="KL-energy spline geodesics")
    s.add_argument("--checkpoint", required=True, help="VAE checkpoint directory")
    s.add_argument("--data", help="count matrix CSV holding the two cells")
    s.add_argument("--cells", nargs=2, metavar=("START", "END"), help="cell ids of the endpoints")
    s.add_argument("--points", help="latent CSV; computes the pairwise energy matrix instead")
    s.add_argument("--iters", type=int, help="optimiser iterations (geodesic.iters)")
    s.set_defaults(func=cmd_geodesic)

    s = sub.add_parser("train-cfm", parents=[common], help="fit an OT-CFM velocity field on latent snapshots")
    s.add_argument("--latents", required=True, help="latent CSV from train-vae --export-latents")
    s.add_argument("--holdout", type=int, nargs="*", help="t_index values to leave out")
    s.add_argument("--epochs", type=int, help="training epochs (cfm.epochs)")
    s.add_argument("--seed", type=int, help="training seed (cfm.seed)")
    s.set_defaults(func=cmd_train_cfm)

    s = sub.add_parser("trajectory", parents=[common], help="integrate the field and decode trajectories")
    s.add_argument("--field", required=True, help="velocity field checkpoint directory")
    s.add_argument("--latents", required=True, help="latent CSV providing start states")
    s.add_argument("--t-start", type=int, required=True, help="start snapshot t_index")
    s.add_argument("--t-end", type=int, required=True, help="end time")
    s.add_argument("--checkpoint", help="VAE checkpoint for decoding means (optional)")
    s.add_argument("--steps", type=int, help="RK4 steps (cfm.ode_steps)")
    s.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("evaluate", parents=[common], help="distribution and neighbourhood metrics")
    s.add_argument("--generated", help="latent CSV of generated states")
    s.add_argument("--reference", help="latent CSV of reference states")
    s.add_argument("--t-index", type=int, help="restrict the reference to this t_index")
    s.add_argument("--raw", action="store_true",
                   help="skip standardising both clouds by the reference mean and std")
    s.add_argument("--distances", nargs=2, metavar=("D1", "D2"),
                   help="two square distance matrix CSVs for kNN overlap and Spearman")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"flatvi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataValidationError as exc:
        print(f"flatvi: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"flatvi: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FlatVIError as exc:
        print(f"flatvi: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
