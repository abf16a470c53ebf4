"""Command-line entry points.

Subcommands: synth, search, train, register, eval. One JSON config file
drives synth/search/train; its raw bytes are echoed into every output
directory as config.json so outputs carry their provenance. Exit codes:
0 success, 2 config error, 3 data error, 4 numerical abort, 5
non-convergence under --strict-convergence.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import fields, io, losses, report
from .config import config_from_dict, config_to_dict
from .data import SPLITS, load_dataset, save_dataset
from .exceptions import AutoregError, ConfigError, ConvergenceError, DataError
from .search import run_search
from .synth import generate_splits
from .train import (baseline_records, evaluate_model, load_model_bundle,
                    register_pair, train_weights, write_eval_table)

log = logging.getLogger("autoreg.cli")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="autoreg",
        description="Joint architecture and loss-hyperparameter search "
                    "for deformable image registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, data=False, model=False):
        if config:
            p.add_argument("-c", "--config", required=True,
                           help="JSON config file")
        if data:
            p.add_argument("-d", "--data", required=True,
                           help="dataset directory (from `autoreg synth`)")
        if model:
            p.add_argument("-m", "--model", required=True,
                           help="checkpoint directory")
        p.add_argument("-o", "--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="write into a non-empty output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, config=True)

    p = sub.add_parser("search", help="run the three-stage search pipeline")
    common(p, config=True, data=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint directory to resume from")
    p.add_argument("--strict-convergence", action="store_true",
                   help="exit 5 when any stage hits its epoch budget")

    p = sub.add_parser("train", help="train weights for a searched model")
    common(p, config=True, data=True, model=True)

    p = sub.add_parser("register", help="register one pair of volumes")
    common(p, model=True)
    p.add_argument("-s", "--source", required=True, help="source ARVF")
    p.add_argument("-t", "--target", required=True, help="target ARVF")

    p = sub.add_parser("eval", help="evaluate a model on the test split")
    common(p, data=True, model=True)
    return parser


def _apply_thread_cap():
    raw = os.environ.get("AUTOREG_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("AUTOREG_THREADS must be an integer, got %r" % raw)
    if n < 1:
        raise ConfigError("AUTOREG_THREADS must be >= 1, got %d" % n)
    torch.set_num_threads(n)


def _load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc))
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError("config %s is not valid JSON: %s" % (path, exc))
    return config_from_dict(data), raw


def _prepare_out(path, force, allow_existing=False):
    if os.path.isdir(path) and os.listdir(path) and not (force or allow_existing):
        raise ConfigError("output directory %s is not empty; pass --force "
                          "to write into it" % path)
    os.makedirs(path, exist_ok=True)


def _echo_config(out_dir, raw):
    tmp = os.path.join(out_dir, "config.json.tmp")
    with open(tmp, "wb") as fh:
        fh.write(raw)
    os.replace(tmp, os.path.join(out_dir, "config.json"))


def _mean_dice(records):
    vals = [r.dice for r in records if r.dice is not None]
    return sum(vals) / len(vals) if vals else None


def cmd_synth(args):
    cfg, raw = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    _prepare_out(args.out, args.force)
    splits = generate_splits(cfg.synth, seed)
    save_dataset(args.out, splits, cfg.synth.num_labels,
                 config_to_dict(cfg.synth), seed)
    _echo_config(args.out, raw)
    for split in SPLITS:
        dice = _mean_dice(baseline_records(splits[split],
                                           cfg.synth.num_labels))
        print("%s: %d pairs, pre-registration dice %.3f"
              % (split, len(splits[split]), dice))
    return 0


def cmd_search(args):
    cfg, raw = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    dataset = load_dataset(args.data)
    _prepare_out(args.out, args.force, allow_existing=args.resume is not None)
    _echo_config(args.out, raw)
    result = run_search(dataset, cfg.search, seed, dtype=cfg.dtype,
                        out_dir=args.out, resume=args.resume)
    report.render_search_figures(args.out)
    print("derived F ops:", result.derived["F"])
    print("derived D ops:", result.derived["D"])
    print("lambda:", [round(float(x), 6) for x in result.lam])
    missing = [s for s in ("feature", "deform", "hyper")
               if not result.converged.get(s, False)]
    if missing:
        print("non-converged stages:", ",".join(missing))
        if args.strict_convergence:
            raise ConvergenceError("stages stopped by their epoch budget: %s"
                                   % ",".join(missing))
    return 0


def cmd_train(args):
    cfg, raw = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    bundle = load_model_bundle(args.model)
    dataset = load_dataset(args.data)
    _prepare_out(args.out, args.force)
    _echo_config(args.out, raw)
    result = train_weights(bundle, dataset.train, cfg.train, seed,
                           out_dir=args.out)
    report.render_train_figures(args.out)
    print("trained %d epochs, final loss %.6g"
          % (result.epochs_run,
             result.loss_rows[-1][1] if result.loss_rows else float("nan")))
    return 0


def _load_scalar_volume(path):
    try:
        arr, kind = io.load_volume(path)
    except OSError as exc:
        raise DataError("cannot read %s: %s" % (path, exc))
    if kind != "scalar":
        raise DataError("%s holds a %s volume, expected a scalar image"
                        % (path, kind))
    return arr


def cmd_register(args):
    bundle = load_model_bundle(args.model)
    s_arr = _load_scalar_volume(args.source)
    t_arr = _load_scalar_volume(args.target)
    if s_arr.shape != t_arr.shape:
        raise DataError("source shape %s != target shape %s"
                        % (s_arr.shape, t_arr.shape))
    if s_arr.ndim != bundle.ndim:
        raise DataError("volumes are %dD but the model is %dD"
                        % (s_arr.ndim, bundle.ndim))
    _prepare_out(args.out, args.force)
    s = torch.from_numpy(s_arr).to(bundle.dtype)
    t = torch.from_numpy(t_arr).to(bundle.dtype)
    res = register_pair(bundle, s, t)
    warped = res.warped.numpy()
    err_before = np.abs(s_arr - t_arr)
    err_after = np.abs(warped - t_arr)
    io.save_volume(os.path.join(args.out, "phi.arvf"), res.phi.numpy(),
                   kind="vector")
    io.save_volume(os.path.join(args.out, "warped.arvf"), warped)
    io.save_volume(os.path.join(args.out, "err_before.arvf"), err_before)
    io.save_volume(os.path.join(args.out, "err_after.arvf"), err_after)
    report.render_register_figures(args.out, s_arr, t_arr, warped,
                                   err_before, err_after)
    folds = int(fields.count_folds(res.phi))
    print("registered in %.4f s, %d folds, mean |err| %.4f -> %.4f"
          % (res.seconds, folds, float(err_before.mean()),
             float(err_after.mean())))
    return 0


def cmd_eval(args):
    bundle = load_model_bundle(args.model)
    dataset = load_dataset(args.data)
    if not dataset.test:
        raise DataError("dataset has no test split")
    _prepare_out(args.out, args.force)
    records = evaluate_model(bundle, dataset.test)
    agg = write_eval_table(os.path.join(args.out, "eval_table.csv"), records)
    base = baseline_records(dataset.test, dataset.num_labels, bundle.dtype)
    write_eval_table(os.path.join(args.out, "baseline_table.csv"), base)
    report.render_eval_figures(args.out)
    print("dice %s  ncc %s  folds %s  seconds %s"
          % (agg["dice_mean"], agg["ncc"], agg["folds"], agg["seconds"]))
    return 0


_COMMANDS = {"synth": cmd_synth, "search": cmd_search, "train": cmd_train,
             "register": cmd_register, "eval": cmd_eval}


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr)
    args = _build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return _COMMANDS[args.command](args)
    except AutoregError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
