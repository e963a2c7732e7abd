"""Command-line surface: synth, train, eval, gradcheck, sweep.

Every command is deterministic given its arguments and seeds; outputs
carry the fully resolved configuration so runs can be reproduced from
their artifacts alone. Exit codes: 0 success, 2 usage error, 3 data
error, 4 numerical error, 5 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import caunet as cn
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    RatingScale,
    load_coat_matrix,
    load_triples,
    load_triples_indexed,
    save_dense_matrix,
    save_triples,
    split,
)
from .errors import ArgumentError, DataFormatError, NumericalError
from .metrics import evaluate_predictions
from .simulate import calibrate_policy, generate_ground_truth, sample_observations
from .sweep import sparsity_sweep, write_sweep_csv
from .train import (
    BASELINE_METHODS,
    TrainConfig,
    full_objective_loss,
    train_method,
)
from .autodiff import finite_difference_check

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

METHODS = ("counterclr",) + BASELINE_METHODS

TRAIN_CSV_FIELDS = [
    "epoch", "l_base", "l_pro", "l_con", "total", "val_mse", "val_snips",
    "config",
]
EVAL_CSV_FIELDS = [
    "method", "dataset", "seed", "observed_ratio", "mse", "mae",
    "ndcg_at_5", "n_users_ranked", "ndcg_definition", "config",
]


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve_config(args):
    """Config file values first, then --set overrides, then flags."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            try:
                values.update(json.load(fh))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"config file is not valid JSON: {exc}")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ArgumentError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        values[key] = _parse_value(text)
    for flag in ("mode", "k", "alpha", "beta", "epochs", "learning_rate",
                 "weight_decay", "batch_size", "seed"):
        if getattr(args, flag, None) is not None:
            values[flag] = getattr(args, flag)
    return TrainConfig.from_dict(values)


def _load_training_data(path, scale, val_fraction, split_seed):
    """Accepts a synth output directory, a TSV file, or a dense matrix."""
    if os.path.isdir(path):
        manifest_path = os.path.join(path, "manifest.json")
        if not os.path.isfile(manifest_path):
            raise DataFormatError(f"no manifest.json in directory {path}")
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        scale = RatingScale(manifest["r_min"], manifest["r_max"])
        dataset = load_triples_indexed(
            os.path.join(path, "observed.tsv"), scale,
            manifest["n_users"], manifest["n_items"],
        )
    elif path.endswith(".tsv"):
        dataset = load_triples(path, scale)
    else:
        dataset = load_coat_matrix(path, scale)
    return split(dataset, val_fraction, split_seed), dataset.scale


def _load_test_data(path, n_users, n_items, scale):
    if os.path.isdir(path):
        return load_triples_indexed(
            os.path.join(path, "test.tsv"), scale, n_users, n_items
        )
    if path.endswith(".tsv"):
        return load_triples_indexed(path, scale, n_users, n_items)
    return load_coat_matrix(path, scale)


def _predict_matrix(model):
    if hasattr(model, "predict_matrix"):
        return model.predict_matrix()
    return cn.predict_matrix(model)


def cmd_synth(args):
    if not 0.0 < args.ratio <= 1.0:
        raise ArgumentError(f"--ratio must be in (0, 1], got {args.ratio}")
    scale = RatingScale(args.rmin, args.rmax)
    gt = generate_ground_truth(
        args.users, args.items, args.rank, args.noise, scale, args.seed
    )
    policy = calibrate_policy(gt, args.slope, args.ratio)
    observed, held_out = sample_observations(gt, policy, args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_dense_matrix(gt.full_matrix, os.path.join(args.out, "ground_truth.txt"))
    save_triples(observed, os.path.join(args.out, "observed.tsv"))
    save_triples(held_out, os.path.join(args.out, "test.tsv"))
    manifest = {
        "n_users": args.users,
        "n_items": args.items,
        "rank": args.rank,
        "noise_std": args.noise,
        "r_min": args.rmin,
        "r_max": args.rmax,
        "seed": args.seed,
        "target_ratio": args.ratio,
        "slope": args.slope,
        "intercept": policy.intercept,
        "n_observed": observed.n_observed,
        "n_test": held_out.n_observed,
        "files": ["ground_truth.txt", "observed.tsv", "test.tsv"],
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {observed.n_observed} observed / {held_out.n_observed} "
          f"held-out cells to {args.out}")
    return EXIT_OK


def cmd_train(args):
    config = _resolve_config(args)
    scale = RatingScale(args.rmin, args.rmax)
    data, scale = _load_training_data(
        args.data, scale, args.val_fraction, config.seed
    )
    model, report = train_method(data, config, args.method)
    os.makedirs(args.out, exist_ok=True)
    config_echo = config.to_dict()
    training_summary = {
        "method": report.method,
        "best_epoch": report.best_epoch,
        "best_val_mse": report.best_val_mse,
        "n_epochs_run": len(report.epochs),
    }
    save_checkpoint(
        os.path.join(args.out, "checkpoint.json"), model,
        training=training_summary, config=config_echo,
    )
    config_json = json.dumps(config_echo, sort_keys=True)
    with open(os.path.join(args.out, "report.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAIN_CSV_FIELDS)
        writer.writeheader()
        for row in report.epochs:
            writer.writerow({**row, "config": config_json})
    with open(os.path.join(args.out, "run_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(config_echo, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"method={args.method} best_epoch={report.best_epoch} "
          f"best_val_mse={report.best_val_mse:.6f} "
          f"wall_clock={report.wall_clock_seconds:.1f}s -> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    model, payload = load_checkpoint(args.checkpoint)
    test = _load_test_data(args.data, model.n_users, model.n_items, model.scale)
    method = payload["model"].get("method", payload["model"]["type"])
    config = payload.get("config") or {}
    report = evaluate_predictions(
        _predict_matrix(model), test,
        metadata={
            "method": method,
            "dataset": args.data,
            "seed": config.get("seed", ""),
            "observed_ratio": args.observed_ratio,
        },
    )
    fields = report.csv_fields()
    fields["config"] = json.dumps(config, sort_keys=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_CSV_FIELDS)
        writer.writeheader()
        writer.writerow({k: fields.get(k, "") for k in EVAL_CSV_FIELDS})
    print(f"mse={report.mse:.6f} mae={report.mae:.6f} "
          f"ndcg@5={report.ndcg_at_5:.6f} ({report.n_users_ranked} users) "
          f"-> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    scale = RatingScale(args.rmin, args.rmax)
    gt = generate_ground_truth(
        args.users, args.items, min(2, args.users, args.items), 0.3, scale,
        args.seed,
    )
    policy = calibrate_policy(gt, 1.0, 0.5)
    observed, _ = sample_observations(gt, policy, args.seed)
    if observed.n_observed == 0:
        raise NumericalError("gradcheck instance has no observed cells")
    rng = np.random.default_rng(args.seed)
    encoder = TrainConfig(mode=args.mode, k=args.k).encoder_config()
    model = cn.init_caunet(
        args.users, args.items, scale, encoder, rng,
        alpha=args.alpha, propensity_clip=0.05,
    )
    # check at a generic parameter point, not the symmetric init
    model.params.randomize(rng)
    loss_fn = full_objective_loss(
        model, observed, alpha=args.alpha, beta=args.beta,
        temperature=args.temperature, tau=args.tau,
    )
    grad_transform = None
    if args.flip_block:
        flip = args.flip_block

        def grad_transform(grads):
            if flip not in grads:
                raise ArgumentError(
                    f"--flip-block {flip!r} is not a trainable block; "
                    f"have {sorted(grads)}"
                )
            grads = dict(grads)
            grads[flip] = -grads[flip]
            return grads

    report = finite_difference_check(
        loss_fn, model.params, step=args.step, rel_tol=args.rel_tol,
        grad_transform=grad_transform,
    )
    for line in report.lines():
        print(line)
    if report.passed:
        print(f"PASS max_rel_error={report.max_rel_error:.3e} "
              f"<= rel_tol={report.rel_tol:.1e}")
        return EXIT_OK
    print(f"FAIL worst block {report.worst_block()!r} "
          f"max_rel_error={report.max_rel_error:.3e} "
          f"> rel_tol={report.rel_tol:.1e}")
    return EXIT_NUMERICAL


def cmd_sweep(args):
    ratios = [float(x) for x in args.ratios.split(",")]
    methods = args.methods.split(",")
    for method in methods:
        if method not in METHODS:
            raise ArgumentError(
                f"unknown method {method!r}; valid methods: {', '.join(METHODS)}"
            )
    seeds = [int(x) for x in args.seeds.split(",")]
    config = _resolve_config(args)
    scale = RatingScale(args.rmin, args.rmax)
    gt = generate_ground_truth(
        args.users, args.items, args.rank, args.noise, scale, args.gt_seed
    )
    rows = sparsity_sweep(
        gt, ratios, methods, seeds, config, slope=args.slope,
        val_fraction=args.val_fraction,
    )
    write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} sweep rows -> {args.out}")
    return EXIT_OK


def _add_scale_args(parser):
    parser.add_argument("--rmin", type=float, default=1.0,
                        help="minimum possible rating")
    parser.add_argument("--rmax", type=float, default=5.0,
                        help="maximum possible rating")


def _add_config_args(parser):
    parser.add_argument("--config", help="JSON file of TrainConfig fields")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any TrainConfig field (repeatable)")
    parser.add_argument("--mode", choices=("mf", "ncf"))
    parser.add_argument("--k", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="counterclr",
        description="Debiased rating prediction on MNAR feedback",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic MNAR dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--ratio", type=float, required=True,
                   help="target observed ratio in (0, 1]")
    p.add_argument("--slope", type=float, default=2.0,
                   help="rating sensitivity of exposure (0 = uniform)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_scale_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a method and write a checkpoint")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--data", required=True,
                   help="synth output dir, TSV triples, or dense matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", dest="val_fraction", type=float,
                   default=0.1)
    _add_scale_args(p)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="synth output dir, indexed TSV, or dense matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--observed-ratio", dest="observed_ratio", default="",
                   help="observed ratio to record in the report metadata")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients of the full objective")
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--items", type=int, default=6)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--mode", choices=("mf", "ncf"), default="ncf")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-4)
    p.add_argument("--flip-block", dest="flip_block",
                   help="fault injection: negate this block's analytic "
                        "gradient (the check must then fail)")
    _add_scale_args(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="observed-ratio sparsity sweep")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--gt-seed", dest="gt_seed", type=int, default=7)
    p.add_argument("--ratios", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--methods", default="counterclr,naive")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--slope", type=float, default=2.0)
    p.add_argument("--val-fraction", dest="val_fraction", type=float,
                   default=0.1)
    p.add_argument("--out", required=True)
    _add_scale_args(p)
    _add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArgumentError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
