"""``fatlab`` command line: train, eval, landscape, sweep, gen-data, config.

Exit status is 0 on success, 1 for user errors (bad config, missing or
corrupt files, shape mismatches) and 2 for anything unexpected.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

from fatlab.config import ConfigError, ExperimentConfig, load_config, render_config
from fatlab.data import DataError, Dataset, load_dataset, save_idx_pair
from fatlab.evaluation import evaluate, landscape_grid, strength_sweep, write_sweep_csv
from fatlab.models import CheckpointError, ModelParams, ModelSpec, load_checkpoint
from fatlab.rng import keyed_rng
from fatlab.trainer import TrainingError, run_training


class UserError(Exception):
    pass


USER_ERRORS = (UserError, ConfigError, DataError, CheckpointError, TrainingError, FileNotFoundError)


def _head(dataset: Dataset, n: int) -> Dataset:
    return dataset.subset(slice(0, min(n, len(dataset))))


def _checkpoint_and_data(args, samples_attr: str) -> tuple[ExperimentConfig, ModelParams, Dataset]:
    cfg = load_config(args.config)
    params, _ = load_checkpoint(args.checkpoint)
    _, held_out = load_dataset(cfg.data)
    if held_out.dim != params.spec.input_dim:
        raise UserError(f"checkpoint {args.checkpoint} expects {params.spec.input_dim} input features "
                        f"but the dataset has {held_out.dim}")
    return cfg, params, _head(held_out, getattr(cfg, samples_attr).samples)


def _report_path(cfg: ExperimentConfig, given: str | None, name: str) -> Path:
    return Path(given) if given else cfg.output_path() / "reports" / name


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.output_path()
    train, held_out = load_dataset(cfg.data)
    spec = ModelSpec(train.dim, cfg.hidden_dims, train.num_classes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(render_config(cfg))
    monitor = cfg.train.co_monitor
    result = run_training(cfg.train, spec, train, _head(held_out, monitor.eval_samples), out)
    status = result.co.label if result.co else "not evaluated"
    print(f"trained {len(result.records)} epochs -> {out} (co: {status})")
    return 0


def cmd_eval(args) -> int:
    cfg, params, data = _checkpoint_and_data(args, "eval")
    report = evaluate(params, data, cfg.eval.attacks(), seed=cfg.eval.seed)
    path = report.write(_report_path(cfg, args.out, "eval.json"))
    accs = " ".join(f"{k}={v:.4f}" for k, v in report.robust_acc.items())
    print(f"clean_acc={report.clean_acc:.4f} clean_ce={report.clean_ce:.6f} {accs} -> {path}")
    return 0


def cmd_landscape(args) -> int:
    cfg, params, data = _checkpoint_and_data(args, "landscape")
    ls = cfg.landscape
    grid = landscape_grid(params, data.x, data.y, ls.eta, ls.n1, ls.n2, rng=keyed_rng(ls.seed, "landscape"))
    path = grid.write_csv(_report_path(cfg, args.out, "landscape.csv"))
    print(f"landscape {ls.n1}x{ls.n2}, center CE {grid.center:.6f} -> {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg, params, data = _checkpoint_and_data(args, "sweep")
    sw = cfg.sweep
    rows = strength_sweep(params, data, sw.eps_list, sw.template, seed=sw.seed, nested=sw.nested)
    path = write_sweep_csv(rows, _report_path(cfg, args.out, "sweep.csv"), sw.template)
    print(" ".join(f"{e:.4g}:{a:.3f}" for e, a in rows) + f" -> {path}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.data.source == "idx":
        raise UserError("gen-data needs a synthetic data source")
    train, held_out = load_dataset(cfg.data)
    out = Path(args.out_dir)
    for name, ds in (("train", train), ("eval", held_out)):
        save_idx_pair(ds, out / f"{name}-images.idx", out / f"{name}-labels.idx")
    print(f"wrote {len(train)} + {len(held_out)} samples to {out}")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(render_config(load_config(args.config)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fatlab", description="Fast adversarial training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write records, checkpoints and reports")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: [output] dir)")
    p.set_defaults(func=cmd_train)

    for name, func, what in (("eval", cmd_eval, "clean and robust accuracy report (JSON)"),
                             ("landscape", cmd_landscape, "loss landscape grid (CSV)"),
                             ("sweep", cmd_sweep, "robust accuracy against attack budget (CSV)")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--config", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", help="report file (default: under the output directory)")
        p.set_defaults(func=func)

    p = sub.add_parser("gen-data", help="write the configured synthetic dataset as IDX files")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("config", help="print the resolved configuration")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
